#pragma once

// Explicit Runge-Kutta initial-value solvers on the recorded graph.
//
// Gradients are obtained by differentiating through the solver arithmetic (discretize, then
// optimize). Step-size decisions in the adaptive scheme are made on plain values and are not
// differentiated.

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "gradcheck.hpp"

namespace slode {

/// Strictly increasing, finite observation times.
class TimeGrid {
public:
    TimeGrid() = default;
    explicit TimeGrid(std::vector<double> times) : times_(std::move(times)) { validate(); }

    static TimeGrid uniform(double t0, double t1, std::size_t n) {
        if (n < 2) throw ArgumentError("TimeGrid::uniform needs at least 2 points");
        std::vector<double> t(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = t0 + (t1 - t0) * static_cast<double>(i) / static_cast<double>(n - 1);
        }
        t.back() = t1;
        return TimeGrid(std::move(t));
    }

    const std::vector<double>& times() const noexcept { return times_; }
    std::size_t size() const noexcept { return times_.size(); }
    double operator[](std::size_t i) const { return times_[i]; }
    double front() const { return times_.front(); }
    double back() const { return times_.back(); }

    friend bool operator==(const TimeGrid& a, const TimeGrid& b) { return a.times_ == b.times_; }

private:
    void validate() const {
        if (times_.size() < 2) throw ArgumentError("TimeGrid: need at least 2 time points");
        for (std::size_t i = 0; i < times_.size(); ++i) {
            if (!std::isfinite(times_[i])) throw ArgumentError("TimeGrid: non-finite time");
            if (i > 0 && !(times_[i] > times_[i - 1])) {
                throw ArgumentError("TimeGrid: times must be strictly increasing (index " + std::to_string(i) + ")");
            }
        }
    }

    std::vector<double> times_;
};

enum class SolverMethod { rk4, dopri5 };

inline std::string to_string(SolverMethod m) { return m == SolverMethod::rk4 ? "rk4" : "dopri5"; }

inline SolverMethod solver_method_from_string(const std::string& s) {
    if (s == "rk4") return SolverMethod::rk4;
    if (s == "dopri5") return SolverMethod::dopri5;
    throw ArgumentError("unknown solver method '" + s + "'");
}

struct SolverConfig {
    SolverMethod method = SolverMethod::rk4;
    double rtol = 1e-6;
    double atol = 1e-8;
    std::size_t max_steps = 10000;
    std::size_t substeps_per_interval = 4;

    void validate() const {
        if (!(rtol > 0.0) || !(atol > 0.0)) throw ArgumentError("SolverConfig: rtol and atol must be positive");
        if (max_steps < 1) throw ArgumentError("SolverConfig: max_steps must be >= 1");
        if (substeps_per_interval < 1) throw ArgumentError("SolverConfig: substeps_per_interval must be >= 1");
    }
};

/// Raised when the solve cannot proceed; carries the time and step where it stopped.
class IntegrationError : public std::runtime_error {
public:
    IntegrationError(const std::string& what, double t, double h)
        : std::runtime_error(what + " (t=" + fmt(t) + ", h=" + fmt(h) + ")"), t_(t), h_(h) {}
    double time() const noexcept { return t_; }
    double step() const noexcept { return h_; }

private:
    static std::string fmt(double v) {
        std::ostringstream os;
        os.precision(10);
        os << v;
        return os.str();
    }
    double t_, h_;
};

/// dx/dt = f(x, t). x may be a vector [D] or a batch of states [B x D].
using VectorField = std::function<Var(const Var& x, double t)>;

struct StateTrajectory {
    Var x0;
    std::vector<Var> states; ///< states[j] is the solution at grid[j]; states[0] is x0
    TimeGrid grid;

    /// D x T matrix for one row of a batched solve (or the only series for an unbatched one).
    Array matrix(std::size_t series = 0) const {
        const Var& s0 = states.front();
        const std::size_t d = s0.rank() == 1 ? s0.dim(0) : s0.dim(1);
        Array out(Shape{d, states.size()});
        for (std::size_t j = 0; j < states.size(); ++j)
            for (std::size_t i = 0; i < d; ++i) out.at(i, j) = states[j].value()[series * d + i];
        return out;
    }
};

namespace detail {

inline void require_finite(const Var& v, const char* what, double t, double h) {
    if (!v.value().all_finite()) throw IntegrationError(std::string("non-finite ") + what, t, h);
}

} // namespace detail

/// Classical fourth-order Runge-Kutta step.
inline Var rk4_step(const VectorField& f, const Var& x, double t, double h) {
    if (!(h > 0.0)) throw ArgumentError("rk4_step: h must be positive");
    Var k1 = f(x, t);
    detail::require_finite(k1, "stage value", t, h);
    Var k2 = f(lincomb({x, k1}, {1.0, 0.5 * h}), t + 0.5 * h);
    detail::require_finite(k2, "stage value", t, h);
    Var k3 = f(lincomb({x, k2}, {1.0, 0.5 * h}), t + 0.5 * h);
    detail::require_finite(k3, "stage value", t, h);
    Var k4 = f(lincomb({x, k3}, {1.0, h}), t + h);
    detail::require_finite(k4, "stage value", t, h);
    return lincomb({x, k1, k2, k3, k4}, {1.0, h / 6.0, h / 3.0, h / 3.0, h / 6.0});
}

namespace detail {

inline StateTrajectory solve_rk4(const VectorField& f, const Var& x0, const TimeGrid& grid, const SolverConfig& cfg) {
    StateTrajectory traj{x0, {x0}, grid};
    traj.states.reserve(grid.size());
    const std::size_t n = cfg.substeps_per_interval;
    if ((grid.size() - 1) * n > cfg.max_steps) {
        throw IntegrationError("rk4 step budget exceeds max_steps", grid.front(), 0.0);
    }
    Var x = x0;
    for (std::size_t j = 0; j + 1 < grid.size(); ++j) {
        const double t0 = grid[j];
        const double h = (grid[j + 1] - t0) / static_cast<double>(n);
        for (std::size_t s = 0; s < n; ++s) {
            const double t = t0 + h * static_cast<double>(s);
            x = rk4_step(f, x, t, h);
            require_finite(x, "state", t, h);
        }
        traj.states.push_back(x);
    }
    return traj;
}

struct Dopri5Tableau {
    static constexpr double c[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
    static constexpr double a[7][6] = {
        {0, 0, 0, 0, 0, 0},
        {1.0 / 5, 0, 0, 0, 0, 0},
        {3.0 / 40, 9.0 / 40, 0, 0, 0, 0},
        {44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0},
        {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0},
        {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656, 0},
        {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
    };
    // fifth-order weights minus embedded fourth-order weights
    static constexpr double e[7] = {71.0 / 57600,  0.0, -71.0 / 16695, 71.0 / 1920,
                                    -17253.0 / 339200, 22.0 / 525, -1.0 / 40};
};

inline double scaled_rms(const Array& err, const Array& x, const Array& y, double atol, double rtol) {
    double s = 0.0;
    for (std::size_t i = 0; i < err.size(); ++i) {
        const double sc = atol + rtol * std::max(std::abs(x[i]), std::abs(y[i]));
        const double r = err[i] / sc;
        s += r * r;
    }
    return std::sqrt(s / static_cast<double>(std::max<std::size_t>(err.size(), 1)));
}

inline double initial_step(const VectorField& f, const Array& x0, const Array& f0, double t0, double span,
                           const SolverConfig& cfg) {
    NoGradGuard no_grad;
    auto norm = [&](const Array& v) {
        double s = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double r = v[i] / (cfg.atol + cfg.rtol * std::abs(x0[i]));
            s += r * r;
        }
        return std::sqrt(s / static_cast<double>(std::max<std::size_t>(v.size(), 1)));
    };
    const double d0 = norm(x0), d1 = norm(f0);
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, span);
    Array x1(x0.shape());
    for (std::size_t i = 0; i < x1.size(); ++i) x1[i] = x0[i] + h0 * f0[i];
    Array f1 = f(Var::constant(x1), t0 + h0).value();
    Array df(f1.shape());
    for (std::size_t i = 0; i < df.size(); ++i) df[i] = f1[i] - f0[i];
    const double d2 = std::isfinite(norm(df)) ? norm(df) / h0 : 0.0;
    const double h1 = std::max(d1, d2) <= 1e-15 ? std::max(1e-6, h0 * 1e-3)
                                                : std::pow(0.01 / std::max(d1, d2), 1.0 / 5.0);
    return std::min({100.0 * h0, h1, span});
}

// Quartic Hermite interpolant through (x0, f0), (x1, f1) and the fourth-order midpoint estimate
// of the Dormand-Prince continuous extension. k = [k1..k6, x1, k7]; theta in (0, 1).
inline Var dense_output(const Var& x0, const Var& x1, const std::vector<Var>& k, double h, double th) {
    static constexpr double c_mid[7] = {6025192743.0 / 30085553152.0 / 2,  0.0,
                                        51252292925.0 / 65400821598.0 / 2, -2691868925.0 / 45128329728.0 / 2,
                                        187940372067.0 / 1594534317056.0 / 2, -1776094331.0 / 19743644256.0 / 2,
                                        11237099.0 / 235043384.0 / 2};
    const double t2 = th * th, t3 = t2 * th, t4 = t3 * th;
    const double w_x0 = 1 - 11 * t2 + 18 * t3 - 8 * t4;
    const double w_x1 = -5 * t2 + 14 * t3 - 8 * t4;
    const double w_mid = 16 * t2 - 32 * t3 + 16 * t4;
    const double w_f0 = h * (th - 4 * t2 + 5 * t3 - 2 * t4);
    const double w_f1 = h * (t2 - 3 * t3 + 2 * t4);
    // x_mid = x0 + h * sum c_mid[i] k_i, folded into the same linear combination
    std::vector<Var> terms{x0, x1, k[0], k[7]};
    std::vector<double> coeffs{w_x0 + w_mid, w_x1, w_f0 + w_mid * h * c_mid[0], w_f1 + w_mid * h * c_mid[6]};
    for (int i = 1; i < 6; ++i) {
        if (c_mid[i] == 0.0) continue;
        terms.push_back(k[static_cast<std::size_t>(i)]);
        coeffs.push_back(w_mid * h * c_mid[i]);
    }
    return lincomb(terms, coeffs);
}

inline StateTrajectory solve_dopri5(const VectorField& f, const Var& x0, const TimeGrid& grid,
                                    const SolverConfig& cfg) {
    using T = Dopri5Tableau;
    constexpr double safety = 0.9, min_factor = 0.2, max_factor = 5.0;
    constexpr double beta = 0.04, alpha = 0.2 - 0.75 * beta;

    StateTrajectory traj{x0, {x0}, grid};
    traj.states.reserve(grid.size());
    const double t_end = grid.back();
    double t = grid.front();
    Var x = x0;
    Var fx = f(x, t);
    require_finite(fx, "derivative", t, 0.0);
    double h = initial_step(f, x.value(), fx.value(), t, t_end - t, cfg);
    double err_prev = 1e-4;
    std::size_t next = 1;
    std::size_t attempts = 0;

    while (next < grid.size()) {
        if (++attempts > cfg.max_steps) {
            throw IntegrationError("dopri5 exceeded max_steps=" + std::to_string(cfg.max_steps), t, h);
        }
        bool last = false;
        if (h >= t_end - t) {
            h = t_end - t;
            last = true;
        }
        if (!(h > 0.0) || t + h == t) throw IntegrationError("dopri5 step size underflow", t, h);

        std::vector<Var> k{fx};
        bool finite = true;
        for (int s = 1; s < 7 && finite; ++s) {
            std::vector<Var> terms{x};
            std::vector<double> coeffs{1.0};
            for (int q = 0; q < s; ++q) {
                if (T::a[s][q] == 0.0) continue;
                terms.push_back(k[static_cast<std::size_t>(q)]);
                coeffs.push_back(h * T::a[s][q]);
            }
            Var xs = lincomb(terms, coeffs);
            if (s == 6) {
                // last stage evaluates f at the fifth-order solution (first-same-as-last)
                k.push_back(xs);
                finite = xs.value().all_finite();
                if (finite) {
                    Var f_new = f(xs, t + h);
                    k.push_back(f_new);
                    finite = f_new.value().all_finite();
                }
                break;
            }
            Var ks = f(xs, t + T::c[s] * h);
            finite = ks.value().all_finite();
            k.push_back(ks);
        }

        double err = INFINITY;
        if (finite) {
            // k = [k1..k6, x_new, k7]
            const Array& x_new = k[6].value();
            Array err_vec(x_new.shape());
            const std::size_t kidx[7] = {0, 1, 2, 3, 4, 5, 7};
            for (int s = 0; s < 7; ++s) {
                if (T::e[s] == 0.0) continue;
                const Array& ks = k[kidx[s]].value();
                for (std::size_t i = 0; i < err_vec.size(); ++i) err_vec[i] += h * T::e[s] * ks[i];
            }
            err = scaled_rms(err_vec, x.value(), x_new, cfg.atol, cfg.rtol);
        }

        if (!std::isfinite(err)) {
            h *= min_factor;
            if (h < 1e-14 * std::max(1.0, std::abs(t))) {
                throw IntegrationError("non-finite state in dopri5 step", t, h);
            }
            continue;
        }

        if (err <= 1.0) {
            const double t_new = last ? t_end : t + h;
            Var x_new = k[6];
            Var f_new = k[7];
            while (next < grid.size() && grid[next] <= t_new) {
                if (grid[next] == t_new) {
                    traj.states.push_back(x_new);
                } else {
                    traj.states.push_back(dense_output(x, x_new, k, h, (grid[next] - t) / h));
                }
                ++next;
            }
            const double err_c = std::max(err, 1e-10);
            double factor = safety * std::pow(err_c, -alpha) * std::pow(err_prev, beta);
            factor = std::clamp(factor, min_factor, max_factor);
            err_prev = err_c;
            t = t_new;
            x = x_new;
            fx = f_new;
            h *= factor;
        } else {
            const double factor = std::max(min_factor, safety * std::pow(err, -1.0 / 5.0));
            h *= factor;
        }
    }
    return traj;
}

} // namespace detail

/// Solution of dx/dt = f(x, t), x(grid[0]) = x0, evaluated exactly at every grid time.
inline StateTrajectory ode_solve(const VectorField& f, const Var& x0, const TimeGrid& grid,
                                 const SolverConfig& cfg = {}) {
    cfg.validate();
    if (grid.size() < 2) throw ArgumentError("ode_solve: grid needs at least 2 points");
    if (!x0.value().all_finite()) throw IntegrationError("non-finite initial state", grid.front(), 0.0);
    return cfg.method == SolverMethod::rk4 ? detail::solve_rk4(f, x0, grid, cfg)
                                           : detail::solve_dopri5(f, x0, grid, cfg);
}

struct SolveGradientReport {
    double max_rel_error = 0.0;
    double max_abs_gradient = 0.0;
    GradCheckReport detail;
};

/// Checks backward-through-solver gradients of functional(X) with respect to `leaves`
/// (vector-field parameters and/or x0) against central finite differences.
/// Intended for small problems; use a fixed-step method so the discretization does not move.
inline SolveGradientReport solve_gradient_check(const VectorField& f, const Var& x0, const TimeGrid& grid,
                                                const SolverConfig& cfg, std::vector<Var> leaves,
                                                const std::function<Var(const StateTrajectory&)>& functional,
                                                double step = 1e-5) {
    auto loss = [&]() { return functional(ode_solve(f, x0, grid, cfg)); };
    SolveGradientReport rep;
    rep.detail = check_gradients(loss, std::move(leaves), step, 1e-10);
    rep.max_rel_error = rep.detail.max_rel_error;
    for (const auto& a : rep.detail.analytic)
        for (double v : a.data()) rep.max_abs_gradient = std::max(rep.max_abs_gradient, std::abs(v));
    return rep;
}

} // namespace slode
