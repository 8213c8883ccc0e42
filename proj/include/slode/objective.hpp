#pragma once

// Likelihoods and the weighted evidence lower bound.
//
// Per series, with z ~ q(z | Y) and w = q(u | z_u) / q_hat(u | Y):
//
//   total = log q_hat(u | Y) + log p(u)
//         + w * [log p(Y | z) + log p(z_u | u) + log p(z_eps) - log q(u | z_u) - log q(z | Y)]
//
// q_hat is a Monte Carlo estimate from S fresh encoder samples. Gradient flow:
//   - log q_hat (first term) is differentiated through the estimator;
//   - the weight's denominator is held constant;
//   - the weight's numerator reaches the input head only (z_u held constant there).

#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <vector>

#include "model.hpp"
#include "optim.hpp"

namespace slode {

namespace detail {
inline void check_ald_args(double sigma, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw DomainError("ald: tau must lie in (0, 1), got " + std::to_string(tau));
    if (!(sigma > 0.0)) throw DomainError("ald: sigma must be positive, got " + std::to_string(sigma));
}
inline constexpr double kLog2Pi = 1.8378770664093454836; // log(2 pi)
} // namespace detail

/// Asymmetric Laplace log-density with location m, scale sigma, skew tau.
inline double ald_log_density(double y, double m, double sigma, double tau) {
    detail::check_ald_args(sigma, tau);
    const double r = (y - m) / sigma;
    return std::log(tau * (1.0 - tau) / sigma) - r * (tau - (y <= m ? 1.0 : 0.0));
}

/// Elementwise ALD log-density with the scale given as log sigma. At y == m the
/// derivative takes the y > m branch.
inline Var ald_log_density(const Var& y, const Var& m, const Var& log_sigma, double tau) {
    detail::check_ald_args(1.0, tau);
    Var r = mul(sub(y, m), exp(neg(log_sigma)));
    return shift(neg(add(log_sigma, pinball(r, tau))), std::log(tau * (1.0 - tau)));
}

inline double gaussian_log_density(double y, double mean, double log_var) {
    const double d = y - mean;
    return -0.5 * (detail::kLog2Pi + log_var + d * d * std::exp(-log_var));
}

/// Elementwise Gaussian log-density.
inline Var gaussian_log_density(const Var& y, const Var& mean, const Var& log_var) {
    Var quad = mul(square(sub(y, mean)), exp(neg(log_var)));
    return scale(shift(add(log_var, quad), detail::kLog2Pi), -0.5);
}

/// Diagonal Gaussian log-density summed over each row: [B x d] -> [B].
inline Var gaussian_log_density_rows(const Var& z, const GaussianParams& p) {
    return sum_rows(gaussian_log_density(z, p.mean, p.log_var));
}

/// KL(q || p) between diagonal Gaussians, one value per row.
inline Var gaussian_kl(const GaussianParams& q, const GaussianParams& p) {
    if (q.mean.shape() != p.mean.shape() || q.log_var.shape() != p.log_var.shape() ||
        q.mean.shape() != q.log_var.shape()) {
        throw DimensionError("gaussian_kl: " + shape_str(q.mean.shape()) + " vs " + shape_str(p.mean.shape()));
    }
    Var ratio = exp(sub(q.log_var, p.log_var));
    Var maha = mul(square(sub(q.mean, p.mean)), exp(neg(p.log_var)));
    Var per = lincomb({sub(p.log_var, q.log_var), ratio, maha}, {0.5, 0.5, 0.5});
    Var rows = q.mean.rank() == 1 ? reshape(per, {1, per.size()}) : per;
    return shift(sum_rows(rows), -0.5 * static_cast<double>(rows.dim(1)));
}

/// Sums a [T x B x K] tensor to one value per series: [B].
inline Var sum_per_series(const Var& tbk) {
    const std::size_t b = tbk.dim(1), k = tbk.dim(2);
    return sum_rows(reshape(sum_axis(tbk, 0), {b, k}));
}

/// Quantile reconstruction log-likelihood per series: sum over channels, times, and the three
/// levels of the ALD log-density at that level's location with the shared scale.
/// y_tm is [T x B x K] (see to_time_major).
inline Var recon_log_lik(const Var& y_tm, const QuantileEmission& em) {
    if (y_tm.shape() != em.median.shape()) {
        throw DimensionError("recon_log_lik: observations " + shape_str(y_tm.shape()) + " vs emission " +
                             shape_str(em.median.shape()));
    }
    Var acc = ald_log_density(y_tm, em.lower, em.log_sigma, kQuantileLevels[0]);
    acc = add(acc, ald_log_density(y_tm, em.median, em.log_sigma, kQuantileLevels[1]));
    acc = add(acc, ald_log_density(y_tm, em.upper, em.log_sigma, kQuantileLevels[2]));
    return sum_per_series(acc);
}

inline Var recon_log_lik(const Var& y_tm, const GaussianEmission& em) {
    if (y_tm.shape() != em.mean.shape()) {
        throw DimensionError("recon_log_lik: observations " + shape_str(y_tm.shape()) + " vs emission " +
                             shape_str(em.mean.shape()));
    }
    return sum_per_series(gaussian_log_density(y_tm, em.mean, em.log_var));
}

/// log q(u | z_u) per row, categorical and continuous parts factorized.
inline Var log_q_u_given_z(const InputPosterior& post, const SystemInput& u) {
    Var out;
    bool have = false;
    if (post.has_categorical) {
        out = sum_rows(mul(post.log_probs, Var::constant(one_hot(u.labels, post.log_probs.dim(1)))));
        have = true;
    }
    if (post.has_continuous) {
        Var c = gaussian_log_density_rows(Var::constant(u.continuous), post.gaussian);
        out = have ? add(out, c) : c;
        have = true;
    }
    if (!have) throw ContractError("log_q_u_given_z: input posterior is empty");
    return out;
}

/// log p(u): uniform over classes, standard normal over the continuous inputs.
inline Array log_prior_u(const SystemInput& u, const InputSpec& spec) {
    const std::size_t b = u.batch();
    Array out(Shape{b});
    for (std::size_t i = 0; i < b; ++i) {
        double v = 0.0;
        if (spec.n_classes > 0) v -= std::log(static_cast<double>(spec.n_classes));
        for (std::size_t j = 0; j < spec.n_continuous; ++j) v += gaussian_log_density(u.continuous.at(i, j), 0.0, 0.0);
        out[i] = v;
    }
    return out;
}

/// log((1/S) sum_s exp(a[s, b])) for an [S x B] matrix -> [B].
inline Var log_mean_exp(const Var& a) {
    return shift(logsumexp(a, 0), -std::log(static_cast<double>(a.dim(0))));
}

/// Monte Carlo log q(u | Y) from S samples of z_u ~ q(z | Y). `eta` is [S x B x d_u].
/// log q(u|z_u) at z_u = mean + sd * eta for each of the S noise slices; [S x B].
inline Var log_q_u_given_z_samples(const SlOdeModel& model, const GaussianParams& q, const SystemInput& u,
                                   const Array& eta) {
    const std::size_t du = model.config().d_u, b = q.mean.dim(0);
    if (eta.rank() != 3 || eta.dim(1) != b || eta.dim(2) != du || eta.dim(0) < 1) {
        throw DimensionError("estimate_log_q_u_given_y: noise must be [S x " + std::to_string(b) + " x " +
                             std::to_string(du) + "], got " + shape_str(eta.shape()));
    }
    const std::size_t s = eta.dim(0);
    Var mu = slice_cols(q.mean, 0, du);
    Var sd = exp(scale(slice_cols(q.log_var, 0, du), 0.5));
    Var z = add(mul(Var::constant(eta), sd), mu); // [S x B x d_u]
    Var lq = log_q_u_given_z(model.input_head(reshape(z, {s * b, du})), u.tiled(s));
    return reshape(lq, {s, b});
}

inline Var estimate_log_q_u_given_y(const SlOdeModel& model, const GaussianParams& q, const SystemInput& u,
                                    const Array& eta) {
    return log_mean_exp(log_q_u_given_z_samples(model, q, u, eta));
}

inline Var estimate_log_q_u_given_y(const SlOdeModel& model, const Array& y, const SystemInput& u, std::size_t S,
                                    std::mt19937_64& rng) {
    if (S < 1) throw ArgumentError("estimate_log_q_u_given_y: S must be at least 1");
    auto q = model.encode(Var::constant(y));
    Array eta = SlOdeModel::standard_normal({S, q.mean.dim(0), model.config().d_u}, rng);
    return estimate_log_q_u_given_y(model, q, u, eta);
}

struct ElboBreakdown {
    double total = 0.0;
    double recon_log_lik = 0.0;
    double weighted_log_ratio = 0.0;
    double log_q_u_given_y = 0.0;
    double log_p_u = 0.0;
    double importance_weight = 0.0;
};

/// Reparameterization noise for one ELBO evaluation.
struct ElboNoise {
    Array outer; ///< [B x (d_u + d_eps)]
    Array inner; ///< [S x B x d_u]

    static ElboNoise draw(std::size_t batch, std::size_t d_latent, std::size_t d_u, std::size_t S,
                          std::mt19937_64& rng) {
        ElboNoise n;
        n.outer = SlOdeModel::standard_normal({batch, d_latent}, rng);
        n.inner = SlOdeModel::standard_normal({S, batch, d_u}, rng);
        return n;
    }

    /// One stream per series, so a series' noise does not depend on how it was batched.
    static ElboNoise draw(std::vector<std::mt19937_64>& streams, std::size_t d_latent, std::size_t d_u,
                         std::size_t S) {
        const std::size_t b = streams.size();
        ElboNoise n{Array(Shape{b, d_latent}), Array(Shape{S, b, d_u})};
        for (std::size_t i = 0; i < b; ++i) {
            std::normal_distribution<double> nd(0.0, 1.0);
            for (std::size_t j = 0; j < d_latent; ++j) n.outer.at(i, j) = nd(streams[i]);
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t j = 0; j < d_u; ++j) n.inner.at(s, i, j) = nd(streams[i]);
        }
        return n;
    }
};

/// Stop-gradient points that can be frozen. The first pass records the values it detaches;
/// later passes replay them as constants, so a finite-difference probe sees the same function
/// that backward() differentiates.
class StopGradientTape {
public:
    void begin_pass() {
        if (passes_++ > 0) {
            replay_ = true;
            cursor_ = 0;
        }
    }

    Var apply(const Var& v) {
        if (!replay_) {
            values_.push_back(v.value());
            return detach(v);
        }
        if (cursor_ >= values_.size()) throw ContractError("StopGradientTape: more stop points than recorded");
        const Array& a = values_[cursor_++];
        if (a.shape() != v.shape()) throw ContractError("StopGradientTape: replayed shape mismatch");
        return Var::constant(a);
    }

private:
    std::vector<Array> values_;
    std::size_t cursor_ = 0;
    std::size_t passes_ = 0;
    bool replay_ = false;
};

inline Var stop_gradient(const Var& v, StopGradientTape* tape) { return tape ? tape->apply(v) : detach(v); }

/// The per-series pieces of the bound, each [B].
struct ElboTerms {
    Var recon;
    Var log_p_z_u;
    Var log_p_z_eps;
    Var log_q_u_given_z;        ///< on the sampled z_u
    Var log_q_u_given_z_weight; ///< on the sampled z_u with z_u held constant
    Var log_q_z;
    Var log_q_hat;
    Array log_p_u;
    Var head_fit; ///< mean over the S samples of log q(u|z_u); [B]
};

struct ElboResult {
    Var totals;    ///< [B]
    Var objective; ///< mean of totals
    Var log_q_hat; ///< [B]
    Var head_fit;  ///< [B]
    std::vector<ElboBreakdown> series;
};

/// Where the weight w = q(u|z_u) / q_hat(u|Y) passes gradient.
enum class WeightGradient {
    ratio,          ///< through numerator and denominator (self-normalized importance weight)
    numerator_only, ///< denominator held constant
};

inline std::string to_string(WeightGradient w) { return w == WeightGradient::ratio ? "ratio" : "numerator_only"; }

inline WeightGradient weight_gradient_from_string(const std::string& s) {
    if (s == "ratio") return WeightGradient::ratio;
    if (s == "numerator_only") return WeightGradient::numerator_only;
    throw ArgumentError("unknown weight gradient '" + s + "' (expected ratio or numerator_only)");
}

/// Combines the pieces into the weighted bound.
inline ElboResult combine_elbo(const ElboTerms& t, StopGradientTape* tape = nullptr,
                               WeightGradient wg = WeightGradient::numerator_only) {
    Var bracket = lincomb({t.recon, t.log_p_z_u, t.log_p_z_eps, t.log_q_u_given_z, t.log_q_z}, {1, 1, 1, -1, -1});
    Var denom = wg == WeightGradient::ratio ? t.log_q_hat : stop_gradient(t.log_q_hat, tape);
    Var w = exp(sub(t.log_q_u_given_z_weight, denom));
    Var weighted = mul(w, bracket);
    ElboResult r;
    r.totals = add(add(t.log_q_hat, Var::constant(t.log_p_u)), weighted);
    r.objective = mean(r.totals);
    r.log_q_hat = t.log_q_hat;
    r.head_fit = t.head_fit;
    const std::size_t b = r.totals.size();
    r.series.resize(b);
    for (std::size_t i = 0; i < b; ++i) {
        auto& s = r.series[i];
        s.total = r.totals[i];
        s.recon_log_lik = t.recon[i];
        s.weighted_log_ratio = weighted[i];
        s.log_q_u_given_y = t.log_q_hat[i];
        s.log_p_u = t.log_p_u[i];
        s.importance_weight = w[i];
    }
    return r;
}

struct ElboOptions {
    SolverConfig solver;
    StopGradientTape* tape = nullptr;
    WeightGradient weight_gradient = WeightGradient::numerator_only;
};

/// Weighted bound for a batch. y is [B x K x T] in normalized units on `grid`.
inline ElboResult elbo(const SlOdeModel& model, const Array& y, const SystemInput& u, const TimeGrid& grid,
                       const ElboNoise& noise, const ElboOptions& opt = {}) {
    const ModelConfig& cfg = model.config();
    if (y.rank() != 3 || y.dim(2) != grid.size()) {
        throw DimensionError("elbo: observations " + shape_str(y.shape()) + " do not match a grid of " +
                             std::to_string(grid.size()) + " points");
    }
    const std::size_t b = y.dim(0);
    u.validate(cfg.inputs);
    if (u.batch() != b) throw DimensionError("elbo: inputs for " + std::to_string(u.batch()) + " series, data for " +
                                             std::to_string(b));

    ElboTerms t;
    auto q = model.encode(Var::constant(y));
    LatentCode lat = model.reparameterize(q, noise.outer);
    auto traj = model.solve(lat, grid, opt.solver);
    Var y_tm = Var::constant(to_time_major(y));
    t.recon = cfg.emission == EmissionMode::ald ? recon_log_lik(y_tm, model.emit(traj))
                                                : recon_log_lik(y_tm, model.emit_gaussian(traj));
    t.log_p_z_u = gaussian_log_density_rows(lat.z_u, model.conditional_prior(u));
    t.log_p_z_eps = gaussian_log_density_rows(lat.z_eps, model.noise_prior(b));
    t.log_q_z = gaussian_log_density_rows(lat.z, q);
    t.log_q_u_given_z = log_q_u_given_z(model.input_head(lat.z_u), u);
    t.log_q_u_given_z_weight = log_q_u_given_z(model.input_head(stop_gradient(lat.z_u, opt.tape)), u);
    Var samples = log_q_u_given_z_samples(model, q, u, noise.inner);
    t.log_q_hat = log_mean_exp(samples);
    t.head_fit = scale(sum_axis(samples, 0), 1.0 / static_cast<double>(samples.dim(0)));
    t.log_p_u = log_prior_u(u, cfg.inputs);
    return combine_elbo(t, opt.tape, opt.weight_gradient);
}

inline ElboResult elbo(const SlOdeModel& model, const Array& y, const SystemInput& u, const TimeGrid& grid,
                       std::size_t S, std::mt19937_64& rng, const ElboOptions& opt = {}) {
    if (S < 1) throw ArgumentError("elbo: S must be at least 1");
    const auto& cfg = model.config();
    return elbo(model, y, u, grid, ElboNoise::draw(y.dim(0), cfg.latent_dim(), cfg.d_u, S, rng), opt);
}

/// Which gradient the input head's parameters receive during training.
enum class HeadGradient {
    supervised, ///< average of log q(u|z_u) over the S posterior samples; every other parameter gets the bound's gradient
    auxiliary,  ///< as supervised, and the encoder also receives that average's gradient (scaled) on top of the bound's
    bound,      ///< the bound's gradient, like every other parameter
};

inline std::string to_string(HeadGradient h) {
    switch (h) {
    case HeadGradient::supervised: return "supervised";
    case HeadGradient::auxiliary: return "auxiliary";
    case HeadGradient::bound: break;
    }
    return "bound";
}

inline HeadGradient head_gradient_from_string(const std::string& s) {
    if (s == "supervised") return HeadGradient::supervised;
    if (s == "auxiliary") return HeadGradient::auxiliary;
    if (s == "bound") return HeadGradient::bound;
    throw ArgumentError("unknown head gradient '" + s + "' (expected supervised, auxiliary or bound)");
}

/// Accumulates the ascent gradient of r into the leaves' grads, negated for minimisation.
/// Other modes replace the input head's gradient by that of -mean(head_fit); auxiliary also adds it, times
/// `encoder_weight`, to the encoder's.
inline void backward_elbo(const ElboResult& r, ParameterSet& params, HeadGradient hg = HeadGradient::supervised,
                          double encoder_weight = 1.0) {
    backward(neg(r.objective));
    if (hg == HeadGradient::bound) return;
    std::map<std::string, Array> bound_grads;
    for (auto& [name, e] : params) {
        bound_grads.emplace(name, e.param.grad());
        e.param.zero_grad();
    }
    backward(neg(mean(r.head_fit)));
    for (auto& [name, e] : params) {
        if (SlOdeModel::is_input_head_parameter(name)) continue;
        Array g = bound_grads.at(name);
        if (hg == HeadGradient::auxiliary && SlOdeModel::is_encoder_parameter(name)) {
            const Array& extra = e.param.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += encoder_weight * extra[i];
        }
        e.param.mutable_grad() = std::move(g);
    }
}

} // namespace slode
