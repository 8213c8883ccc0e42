#pragma once

// Independent reference computations shared by the unit tests and the acceptance suite.
// Nothing here calls into the code under test except to read plain arrays.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "slode/autodiff.hpp"
#include "slode/gradcheck.hpp"
#include "slode/objective.hpp"
#include "slode/odeint.hpp"

namespace oracle {

using slode::Array;
using slode::Shape;
using slode::Var;

inline Array random_array(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
    Array a(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : a.data()) v = d(rng);
    return a;
}

// ---------------------------------------------------------------------------------------------
// Randomized finite-difference sweep over every differentiable op

struct OpCase {
    std::string name;
    std::vector<Shape> shapes;
    std::function<Var(std::vector<Var>&)> build;
    bool positive = false;
};

inline std::vector<OpCase> op_catalogue() {
    using namespace slode;
    return {
        {"add", {{3, 4}, {4}}, [](auto& v) { return add(v[0], v[1]); }},
        {"sub", {{3, 4}, {3, 1}}, [](auto& v) { return sub(v[0], v[1]); }},
        {"mul", {{2, 3, 4}, {3, 4}}, [](auto& v) { return mul(v[0], v[1]); }},
        {"div", {{3, 4}, {3, 4}}, [](auto& v) { return div(v[0], v[1]); }, true},
        {"scale", {{3, 4}}, [](auto& v) { return scale(v[0], -1.7); }},
        {"shift", {{3, 4}}, [](auto& v) { return shift(v[0], 0.4); }},
        {"relu", {{3, 4}}, [](auto& v) { return relu(v[0]); }},
        {"sigmoid", {{3, 4}}, [](auto& v) { return sigmoid(v[0]); }},
        {"softplus", {{3, 4}}, [](auto& v) { return softplus(v[0]); }},
        {"exp", {{3, 4}}, [](auto& v) { return exp(v[0]); }},
        {"log", {{3, 4}}, [](auto& v) { return log(v[0]); }, true},
        {"square", {{3, 4}}, [](auto& v) { return square(v[0]); }},
        {"pinball", {{3, 4}}, [](auto& v) { return pinball(v[0], 0.3); }},
        {"matmul", {{3, 4}, {4, 2}}, [](auto& v) { return matmul(v[0], v[1]); }},
        {"conv1d", {{2, 2, 8}, {3, 2, 3}}, [](auto& v) { return conv1d(v[0], v[1], 1); }},
        {"conv1d_bias_stride", {{2, 9}, {3, 2, 3}, {3}}, [](auto& v) { return conv1d(v[0], v[1], &v[2], 2); }},
        {"avg_pool", {{2, 7}}, [](auto& v) { return avg_pool(v[0], 3); }},
        {"log_softmax", {{3, 5}}, [](auto& v) { return log_softmax(v[0]); }},
        {"logsumexp0", {{4, 3}}, [](auto& v) { return logsumexp(v[0], 0); }},
        {"logsumexp1", {{4, 3}}, [](auto& v) { return logsumexp(v[0], 1); }},
        {"sum", {{3, 4}}, [](auto& v) { return sum(v[0]); }},
        {"mean", {{3, 4}}, [](auto& v) { return mean(v[0]); }},
        {"sum_axis", {{2, 3, 4}}, [](auto& v) { return sum_axis(v[0], 1); }},
        {"sum_rows", {{3, 4}}, [](auto& v) { return sum_rows(v[0]); }},
        {"slice_cols", {{3, 5}}, [](auto& v) { return slice_cols(v[0], 1, 4); }},
        {"slice_rows", {{4, 2}}, [](auto& v) { return slice_rows(v[0], 1, 3); }},
        {"concat_cols", {{3, 2}, {3, 1}}, [](auto& v) { return concat_cols({v[0], v[1]}); }},
        {"concat_rows", {{1, 3}, {2, 3}}, [](auto& v) { return concat_rows({v[0], v[1]}); }},
        {"lincomb", {{3}, {3}}, [](auto& v) { return lincomb({v[0], v[1]}, {0.7, -1.3}); }},
        {"reshape", {{2, 6}}, [](auto& v) { return reshape(v[0], {3, 4}); }},
    };
}

struct OpSweepResult {
    std::string name;
    double worst_rel_error = 0.0;
};

/// Runs `trials` random instances of each op; the loss is sum(out * w) with random w so every
/// output element carries a distinct cotangent.
inline std::vector<OpSweepResult> op_fd_sweep(int trials, std::uint64_t seed) {
    using namespace slode;
    std::mt19937_64 rng(seed);
    std::vector<OpSweepResult> out;
    for (const auto& c : op_catalogue()) {
        double worst = 0.0;
        for (int t = 0; t < trials; ++t) {
            std::vector<Var> leaves;
            for (const auto& s : c.shapes) {
                Array a = random_array(s, rng);
                if (c.positive) {
                    for (auto& x : a.data()) x = std::abs(x) + 0.2;
                }
                leaves.push_back(Var::leaf(a));
            }
            Var probe = c.build(leaves);
            Array w = random_array(probe.shape(), rng, -1.0, 1.0);
            auto rep = check_gradients([&] { return sum(mul(c.build(leaves), Var::constant(w))); }, leaves, 1e-5,
                                       1e-6);
            worst = std::max(worst, rep.max_rel_error);
        }
        out.push_back({c.name, worst});
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Linear ODEs

inline Array mat_mul(const Array& a, const Array& b) {
    const std::size_t n = a.dim(0);
    Array c(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t j = 0; j < n; ++j) c.at(i, j) += a.at(i, k) * b.at(k, j);
    return c;
}

/// Matrix exponential by scaling, 20-term Taylor series, and repeated squaring.
inline Array expm(const Array& a) {
    const std::size_t n = a.dim(0);
    double norm = 0.0;
    for (double v : a.values()) norm += v * v;
    int squarings = std::max(0, static_cast<int>(std::ceil(std::log2(std::sqrt(norm) + 1e-300))) + 4);
    Array s = a;
    for (auto& v : s.data()) v /= std::pow(2.0, squarings);
    Array result(Shape{n, n}), term(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) result.at(i, i) = term.at(i, i) = 1.0;
    for (int k = 1; k <= 20; ++k) {
        term = mat_mul(term, s);
        for (auto& v : term.data()) v /= k;
        for (std::size_t i = 0; i < result.size(); ++i) result[i] += term[i];
    }
    for (int q = 0; q < squarings; ++q) result = mat_mul(result, result);
    return result;
}

/// Random 3x3 matrix with spectral norm at most 1.
inline Array random_contraction(std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Array a(Shape{3, 3});
    double fro = 0.0;
    for (auto& v : a.data()) {
        v = nd(rng);
        fro += v * v;
    }
    for (auto& v : a.data()) v /= std::sqrt(fro);
    return a;
}

/// dx/dt = A x for row-vector states [B x D].
inline slode::VectorField linear_field(const Array& a) {
    Array at(Shape{a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) at.at(j, i) = a.at(i, j);
    return [at](const Var& x, double) { return slode::matmul(x, Var::constant(at)); };
}

/// Largest |solver - expm| over `trials` random contractions, both methods, t = 1.
inline double linear_system_max_error(int trials, std::uint64_t seed) {
    using namespace slode;
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        Array a = random_contraction(rng);
        Array e = expm(a);
        Array x0 = Array::matrix({{0.3, -0.7, 1.1}});
        SolverConfig dp;
        dp.method = SolverMethod::dopri5;
        dp.rtol = 1e-10;
        dp.atol = 1e-12;
        SolverConfig rk;
        rk.substeps_per_interval = 50;
        for (const auto& cfg : {dp, rk}) {
            auto traj = ode_solve(linear_field(a), Var(x0), TimeGrid({0.0, 0.5, 1.0}), cfg);
            for (std::size_t i = 0; i < 3; ++i) {
                double expected = 0.0;
                for (std::size_t j = 0; j < 3; ++j) expected += e.at(i, j) * x0[j];
                worst = std::max(worst, std::abs(traj.states.back().value()[i] - expected));
            }
        }
    }
    return worst;
}

/// Error of rk4 on dx/dt = -x over [0, 1] with n steps.
inline double rk4_decay_error(std::size_t n) {
    using namespace slode;
    SolverConfig cfg;
    cfg.substeps_per_interval = n;
    VectorField f = [](const Var& x, double) { return neg(x); };
    auto traj = ode_solve(f, Var(Array::vector({1.0})), TimeGrid({0.0, 1.0}), cfg);
    return std::abs(traj.states[1].item() - std::exp(-1.0));
}

/// Smallest observed order log2(e(n)/e(2n)) over n = 2, 4, 8.
inline double rk4_min_observed_order() {
    double lo = INFINITY;
    for (std::size_t n : {2u, 4u, 8u}) lo = std::min(lo, std::log2(rk4_decay_error(n) / rk4_decay_error(2 * n)));
    return lo;
}

// ---------------------------------------------------------------------------------------------
// Quadrature

/// Composite trapezoid rule with n intervals.
inline double trapezoid(const std::function<double(double)>& f, double a, double b, std::size_t n) {
    const double h = (b - a) / static_cast<double>(n);
    double s = 0.5 * (f(a) + f(b));
    for (std::size_t i = 1; i < n; ++i) s += f(a + h * static_cast<double>(i));
    return s * h;
}

struct AldMass {
    double total = 0.0;
    double below = 0.0;
};

/// Integrates exp(ald_log_density) with a node at the location. Each side extends until its
/// exponential tail is below e^-30 (the left side decays at rate (1-tau)/sigma, the right at tau/sigma).
inline AldMass ald_mass(double m, double sigma, double tau, std::size_t n = 400000) {
    auto f = [&](double y) { return std::exp(slode::ald_log_density(y, m, sigma, tau)); };
    const double left = 30.0 * sigma / (1.0 - tau), right = 30.0 * sigma / tau;
    AldMass r;
    r.below = trapezoid(f, m - left, m, n);
    r.total = r.below + trapezoid(f, m, m + right, n);
    return r;
}

/// Laplace log-density with scale b.
inline double laplace_log_density(double y, double m, double b) { return -std::log(2.0 * b) - std::abs(y - m) / b; }

/// Sorting oracle for the minimizer of the pinball loss: the ceil(n tau)-th smallest sample
/// (unique when n tau is not an integer).
inline double empirical_quantile(std::vector<double> ys, double tau) {
    std::sort(ys.begin(), ys.end());
    const auto k = static_cast<std::size_t>(std::ceil(static_cast<double>(ys.size()) * tau)) - 1;
    return ys[k];
}

/// Among the candidate points, the one maximizing sum_i ald_log_density(y_i, m, sigma, tau).
inline double ald_argmax(const std::vector<double>& ys, const std::vector<double>& candidates, double sigma,
                         double tau) {
    double best = -INFINITY, arg = candidates.front();
    for (double m : candidates) {
        double s = 0.0;
        for (double y : ys) s += slode::ald_log_density(y, m, sigma, tau);
        if (s > best) {
            best = s;
            arg = m;
        }
    }
    return arg;
}

// ---------------------------------------------------------------------------------------------
// Linear-Gaussian toy for the bound property
//
//   u in {0, 1} uniform; z_u | u ~ N(mu_u, s_u^2); z_eps ~ N(0, 1); y | z ~ N(a z_u + b z_eps, s_y^2)
//   encoder  q(z | y) = N(alpha_u y, v_u) x N(alpha_e y, v_e)   (deliberately not the true posterior)
//   classifier q(u = 1 | z_u) = sigmoid(k z_u)

struct LinearGaussianToy {
    double mu[2] = {-1.0, 1.0};
    double s_u = 0.8;
    double a = 1.2, b = 0.5, s_y = 0.4;
    double alpha_u = 0.6, alpha_e = 0.2;
    double log_v_u = std::log(0.25), log_v_e = std::log(0.49);
    double k = 2.0;

    double log_q_u(int u, double z_u) const {
        const double logit = k * z_u;
        return u == 1 ? -slode::softplus_value(-logit) : -slode::softplus_value(logit);
    }

    /// log p(y, u) by 2-D trapezoid quadrature over (z_u, z_eps).
    double evidence_quadrature(double y, int u, std::size_t n = 1200, double half_width = 10.0) const {
        const double h = 2.0 * half_width / static_cast<double>(n);
        double s = 0.0;
        for (std::size_t i = 0; i <= n; ++i) {
            const double zu = -half_width + h * static_cast<double>(i);
            const double wi = (i == 0 || i == n) ? 0.5 : 1.0;
            const double lpu = slode::gaussian_log_density(zu, mu[u], 2.0 * std::log(s_u));
            for (std::size_t j = 0; j <= n; ++j) {
                const double ze = -half_width + h * static_cast<double>(j);
                const double wj = (j == 0 || j == n) ? 0.5 : 1.0;
                const double l = lpu + slode::gaussian_log_density(ze, 0.0, 0.0) +
                                 slode::gaussian_log_density(y, a * zu + b * ze, 2.0 * std::log(s_y));
                s += wi * wj * std::exp(l);
            }
        }
        return std::log(0.5) + std::log(s * h * h);
    }

    /// Closed form of the same quantity: y | u ~ N(a mu_u, a^2 s_u^2 + b^2 + s_y^2).
    double evidence_closed_form(double y, int u) const {
        const double var = a * a * s_u * s_u + b * b + s_y * s_y;
        return std::log(0.5) + slode::gaussian_log_density(y, a * mu[u], std::log(var));
    }

    /// `draws` independent single-sample bounds, each with its own S-sample q_hat, combined by
    /// the library's bound assembly. Returns the per-draw totals.
    std::vector<double> elbo_draws(double y, int u, std::size_t draws, std::size_t S, std::mt19937_64& rng) const {
        using namespace slode;
        std::normal_distribution<double> nd;
        const double mq_u = alpha_u * y, mq_e = alpha_e * y;
        const double sd_u = std::exp(0.5 * log_v_u), sd_e = std::exp(0.5 * log_v_e);
        Array recon(Shape{draws}), lpzu(Shape{draws}), lpze(Shape{draws}), lquz(Shape{draws}), lqz(Shape{draws}),
            lqhat(Shape{draws}), lpu(Shape{draws}, std::log(0.5));
        for (std::size_t d = 0; d < draws; ++d) {
            const double zu = mq_u + sd_u * nd(rng), ze = mq_e + sd_e * nd(rng);
            recon[d] = gaussian_log_density(y, a * zu + b * ze, 2.0 * std::log(s_y));
            lpzu[d] = gaussian_log_density(zu, mu[u], 2.0 * std::log(s_u));
            lpze[d] = gaussian_log_density(ze, 0.0, 0.0);
            lquz[d] = log_q_u(u, zu);
            lqz[d] = gaussian_log_density(zu, mq_u, log_v_u) + gaussian_log_density(ze, mq_e, log_v_e);
            double mx = -INFINITY;
            std::vector<double> ls(S);
            for (std::size_t s = 0; s < S; ++s) {
                ls[s] = log_q_u(u, mq_u + sd_u * nd(rng));
                mx = std::max(mx, ls[s]);
            }
            double acc = 0.0;
            for (double l : ls) acc += std::exp(l - mx);
            lqhat[d] = mx + std::log(acc / static_cast<double>(S));
        }
        ElboTerms t{Var::constant(recon), Var::constant(lpzu), Var::constant(lpze), Var::constant(lquz),
                    Var::constant(lquz), Var::constant(lqz), Var::constant(lqhat), lpu, Var{}};
        auto r = combine_elbo(t);
        return r.totals.value().values();
    }
};

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
};

inline MeanSe mean_and_se(const std::vector<double>& xs) {
    const double n = static_cast<double>(xs.size());
    double m = 0.0;
    for (double x : xs) m += x;
    m /= n;
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    v /= (n - 1.0);
    return {m, std::sqrt(v / n)};
}

} // namespace oracle

namespace oracle {

struct GroupError {
    std::string name;
    double rel_error = 0.0;
};

/// Small model for gradient probes: 2 states, 21 grid points, one rk4 step per interval.
inline slode::ModelConfig probe_config(slode::EmissionMode mode = slode::EmissionMode::ald) {
    slode::ModelConfig c;
    c.n_times = 21;
    c.state_dim = 2;
    c.d_u = 3;
    c.d_eps = 2;
    c.hidden = 6;
    c.conv_channels = 4;
    c.emission = mode;
    return c;
}

/// Compares backward() of the batch bound against central differences with all noise and all
/// stop-gradient values frozen. One group per named parameter tensor; the error is
/// ||analytic - numeric|| / max(||analytic||, ||numeric||).
inline std::vector<GroupError> frozen_elbo_gradcheck(std::uint64_t seed,
                                                     slode::EmissionMode mode = slode::EmissionMode::ald,
                                                     slode::WeightGradient wg = slode::WeightGradient::numerator_only) {
    using namespace slode;
    SlOdeModel model(probe_config(mode), seed);
    const auto& c = model.config();
    std::mt19937_64 rng(seed + 1);
    const TimeGrid grid = TimeGrid::uniform(0.0, 4.0, c.n_times);
    SolverConfig solver;
    solver.substeps_per_interval = 1;

    Array y = random_array({2, c.channels, c.n_times}, rng, 0.05, 0.95);
    SystemInput u;
    u.labels = {1, 3};
    u.continuous = random_array({2, 2}, rng, -1.0, 1.0);
    ElboNoise noise = ElboNoise::draw(2, c.latent_dim(), c.d_u, 5, rng);

    StopGradientTape tape;
    ElboOptions opt{solver, &tape, wg};
    std::vector<std::string> names = model.parameters().names();
    std::vector<Var> leaves;
    for (const auto& n : names) leaves.push_back(model.parameters().get(n));
    auto rep = check_gradients(
        [&] {
            tape.begin_pass();
            return elbo(model, y, u, grid, noise, opt).objective;
        },
        leaves, 1e-5, 1e-8);
    std::vector<GroupError> out;
    for (std::size_t i = 0; i < names.size(); ++i) out.push_back({names[i], rep.group_rel_error[i]});
    return out;
}

} // namespace oracle
