#pragma once

// Network components of the structured latent ODE model:
//
//   encoder      q(z | Y)        1-D conv -> ReLU -> average pool -> 2-layer MLP -> (mean, log_var)
//   prior        p(z_u | u)      2-layer MLP on [continuous u, one-hot label]
//   input head   q(u | z_u)      2-layer MLP -> class logits and/or Gaussian over continuous u
//   init state   z -> x0         2-layer MLP with sigmoid output
//   dynamics     dx/dt = f1(x, z, t) - x * f2(x, z, t), both 2-layer MLPs with sigmoid outputs
//   emission     x(t) -> quantile locations and log-scale (or Gaussian mean/log-variance)
//
// All tensors carry a leading batch axis. Parameters live in one ParameterSet so the whole
// model can be optimized, checkpointed, and compared by name.

#include <array>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "odeint.hpp"
#include "optim.hpp"

namespace slode {

enum class EmissionMode { ald, gaussian };

inline std::string to_string(EmissionMode m) { return m == EmissionMode::ald ? "ald" : "gaussian"; }

inline EmissionMode emission_mode_from_string(const std::string& s) {
    if (s == "ald") return EmissionMode::ald;
    if (s == "gaussian") return EmissionMode::gaussian;
    throw ArgumentError("unknown emission mode '" + s + "'");
}

/// Quantile levels of the emission heads: lower, median, upper.
inline constexpr std::array<double, 3> kQuantileLevels{0.025, 0.5, 0.975};

/// Which kinds of static input the model sees.
struct InputSpec {
    std::size_t n_classes = 0;    ///< C; 0 when there is no categorical input
    std::size_t n_continuous = 0; ///< P; 0 when there is no continuous input

    std::size_t feature_size() const { return n_continuous + n_classes; }
    friend bool operator==(const InputSpec&, const InputSpec&) = default;
};

struct ModelConfig {
    std::size_t channels = 3; ///< K
    std::size_t n_times = 50; ///< T; fixes the encoder's flattened feature size
    InputSpec inputs{4, 2};
    std::size_t d_u = 8;
    std::size_t d_eps = 8;
    std::size_t state_dim = 5; ///< D
    std::size_t hidden = 25;
    std::size_t conv_channels = 16;
    std::size_t kernel_width = 5;
    std::size_t conv_stride = 1;
    std::size_t pool_window = 2;
    EmissionMode emission = EmissionMode::ald;

    std::size_t latent_dim() const { return d_u + d_eps; }

    std::size_t conv_length() const {
        if (kernel_width > n_times) {
            throw DimensionError("encoder: series length " + std::to_string(n_times) + " shorter than kernel width " +
                                 std::to_string(kernel_width));
        }
        return (n_times - kernel_width) / conv_stride + 1;
    }

    std::size_t pooled_length() const {
        const std::size_t l = conv_length();
        if (pool_window > l) {
            throw DimensionError("encoder: conv output length " + std::to_string(l) + " shorter than pool window " +
                                 std::to_string(pool_window));
        }
        return l / pool_window;
    }

    std::size_t encoder_features() const { return conv_channels * pooled_length(); }

    void validate() const {
        if (channels < 1 || state_dim < 1 || hidden < 1 || d_u < 1 || conv_channels < 1 || kernel_width < 1 ||
            conv_stride < 1 || pool_window < 1) {
            throw ArgumentError("ModelConfig: sizes must be positive");
        }
        if (inputs.n_classes == 0 && inputs.n_continuous == 0) {
            throw ArgumentError("ModelConfig: at least one kind of system input is required");
        }
        (void)encoder_features();
    }
};

/// Diagonal Gaussian, [B x d] each.
struct GaussianParams {
    Var mean;
    Var log_var;
};

struct LatentCode {
    Var z_u;   ///< [B x d_u]
    Var z_eps; ///< [B x d_eps]
    Var z;     ///< [B x (d_u + d_eps)], z_u first
};

/// Static per-series conditions for a batch.
struct SystemInput {
    Array continuous = Array(Shape{0, 0}); ///< [B x P]; P = 0 when absent
    std::vector<int> labels;               ///< size B, or empty when absent

    std::size_t batch() const { return labels.empty() ? continuous.dim(0) : labels.size(); }

    void validate(const InputSpec& spec) const {
        const std::size_t b = batch();
        if (spec.n_classes > 0) {
            if (labels.size() != b) throw ArgumentError("SystemInput: expected " + std::to_string(b) + " labels");
            for (int l : labels) {
                if (l < 0 || static_cast<std::size_t>(l) >= spec.n_classes) {
                    throw ArgumentError("SystemInput: label " + std::to_string(l) + " outside [0, " +
                                        std::to_string(spec.n_classes) + ")");
                }
            }
        }
        if (spec.n_continuous > 0) {
            if (continuous.rank() != 2 || continuous.dim(0) != b || continuous.dim(1) != spec.n_continuous) {
                throw ArgumentError("SystemInput: continuous inputs must be [" + std::to_string(b) + " x " +
                                    std::to_string(spec.n_continuous) + "], got " + shape_str(continuous.shape()));
            }
            if (!continuous.all_finite()) throw ArgumentError("SystemInput: non-finite continuous input");
        }
    }

    /// Each row repeated `times` times as consecutive blocks: block s holds the whole batch.
    SystemInput tiled(std::size_t times) const {
        SystemInput out;
        const std::size_t b = batch();
        if (continuous.size() > 0) {
            const std::size_t p = continuous.dim(1);
            Array c(Shape{b * times, p});
            for (std::size_t s = 0; s < times; ++s)
                for (std::size_t i = 0; i < b * p; ++i) c[s * b * p + i] = continuous[i];
            out.continuous = std::move(c);
        } else {
            out.continuous = Array(Shape{b * times, 0});
        }
        for (std::size_t s = 0; s < times; ++s) out.labels.insert(out.labels.end(), labels.begin(), labels.end());
        return out;
    }
};

/// q(u | z_u): class log-probabilities and/or a Gaussian over the continuous inputs.
struct InputPosterior {
    Var log_probs;           ///< [B x C], valid when C > 0
    GaussianParams gaussian; ///< [B x P] each, valid when P > 0
    bool has_categorical = false;
    bool has_continuous = false;

    Array probs() const {
        Array p = log_probs.value();
        for (auto& v : p.data()) v = std::exp(v);
        return p;
    }
};

/// Emitted locations, laid out [T x B x K]. lower <= median <= upper by construction.
struct QuantileEmission {
    Var median;
    Var lower;
    Var upper;
    Var log_sigma;

    const Var& location(std::size_t level) const { return level == 0 ? lower : level == 1 ? median : upper; }
};

/// Gaussian emission (ablation), laid out [T x B x K].
struct GaussianEmission {
    Var mean;
    Var log_var;
};

/// K x T slice of a [T x B x K] emission tensor.
inline Array series_slice(const Array& tbk, std::size_t series) {
    const std::size_t t_len = tbk.dim(0), b = tbk.dim(1), k = tbk.dim(2);
    Array out(Shape{k, t_len});
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t c = 0; c < k; ++c) out.at(c, t) = tbk[(t * b + series) * k + c];
    return out;
}

/// [B x K x T] -> [T x B x K]
inline Array to_time_major(const Array& bkt) {
    const std::size_t b = bkt.dim(0), k = bkt.dim(1), t_len = bkt.dim(2);
    Array out(Shape{t_len, b, k});
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t t = 0; t < t_len; ++t) out[(t * b + i) * k + c] = bkt[(i * k + c) * t_len + t];
    return out;
}

inline Array one_hot(const std::vector<int>& labels, std::size_t n_classes) {
    Array out(Shape{labels.size(), n_classes});
    for (std::size_t i = 0; i < labels.size(); ++i) out.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
    return out;
}

/// y = x W + b with W [in x out].
class Linear {
public:
    Linear() = default;
    Linear(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng)
        : weight_(ps.add(prefix + ".weight", glorot_uniform({in, out}, in, out, rng))),
          bias_(ps.add(prefix + ".bias", Array(Shape{out}))) {}

    Var operator()(const Var& x) const { return add(matmul(x, weight_), bias_); }

    const Var& weight() const { return weight_; }
    const Var& bias() const { return bias_; }

private:
    Var weight_;
    Var bias_;
};

/// Two-layer perceptron: Linear -> ReLU -> Linear.
class Mlp {
public:
    Mlp() = default;
    Mlp(ParameterSet& ps, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
        std::mt19937_64& rng)
        : fc1_(ps, prefix + ".fc1", in, hidden, rng), fc2_(ps, prefix + ".fc2", hidden, out, rng) {}

    Var operator()(const Var& x) const { return fc2_(relu(fc1_(x))); }

    const Linear& fc1() const { return fc1_; }
    const Linear& fc2() const { return fc2_; }

private:
    Linear fc1_;
    Linear fc2_;
};

class SlOdeModel {
public:
    explicit SlOdeModel(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937_64 rng(seed);
        const std::size_t dz = cfg_.latent_dim();
        const std::size_t w = cfg_.kernel_width, c_in = cfg_.channels, c_out = cfg_.conv_channels;
        conv_weight_ = params_.add("encoder.conv.weight", glorot_uniform({c_out, c_in, w}, c_in * w, c_out * w, rng));
        conv_bias_ = params_.add("encoder.conv.bias", Array(Shape{c_out}));
        encoder_mlp_ = Mlp(params_, "encoder", cfg_.encoder_features(), cfg_.hidden, 2 * dz, rng);
        prior_mlp_ = Mlp(params_, "prior", cfg_.inputs.feature_size(), cfg_.hidden, 2 * cfg_.d_u, rng);
        head_mlp_ = Mlp(params_, "input_head", cfg_.d_u, cfg_.hidden,
                        cfg_.inputs.n_classes + 2 * cfg_.inputs.n_continuous, rng);
        init_mlp_ = Mlp(params_, "init_state", dz, cfg_.hidden, cfg_.state_dim, rng);
        const std::size_t dyn_in = cfg_.state_dim + dz + 1;
        f1_ = Mlp(params_, "dynamics.f1", dyn_in, cfg_.hidden, cfg_.state_dim, rng);
        f2_ = Mlp(params_, "dynamics.f2", dyn_in, cfg_.hidden, cfg_.state_dim, rng);
        if (cfg_.emission == EmissionMode::ald) {
            emission_ = Linear(params_, "emission", cfg_.state_dim, 4 * cfg_.channels, rng);
        } else {
            emission_ = Linear(params_, "emission_gaussian", cfg_.state_dim, 2 * cfg_.channels, rng);
        }
    }

    SlOdeModel(const SlOdeModel&) = delete;
    SlOdeModel& operator=(const SlOdeModel&) = delete;
    SlOdeModel(SlOdeModel&&) = default;
    SlOdeModel& operator=(SlOdeModel&&) = default;

    const ModelConfig& config() const noexcept { return cfg_; }
    ParameterSet& parameters() noexcept { return params_; }
    const ParameterSet& parameters() const noexcept { return params_; }

    /// Emission parameters are the only ones that differ between emission modes.
    static bool is_emission_parameter(const std::string& name) { return name.rfind("emission", 0) == 0; }
    static bool is_input_head_parameter(const std::string& name) { return name.rfind("input_head", 0) == 0; }
    static bool is_encoder_parameter(const std::string& name) { return name.rfind("encoder", 0) == 0; }

    // -----------------------------------------------------------------------------------------
    // q(z | Y)

    /// Y is [K x T] or [B x K x T]; returns [B x (d_u + d_eps)] mean and log-variance.
    GaussianParams encode(const Var& y) const {
        Var y3 = y.rank() == 2 ? reshape(y, {1, y.dim(0), y.dim(1)}) : y;
        if (y3.rank() != 3 || y3.dim(1) != cfg_.channels) {
            throw DimensionError("encode: expected [B x " + std::to_string(cfg_.channels) + " x T], got " +
                                 shape_str(y.shape()));
        }
        if (y3.dim(2) != cfg_.n_times) {
            throw DimensionError("encode: series length " + std::to_string(y3.dim(2)) +
                                 " does not match the configured length " + std::to_string(cfg_.n_times));
        }
        const std::size_t b = y3.dim(0), dz = cfg_.latent_dim();
        Var h = relu(conv1d(y3, conv_weight_, &conv_bias_, cfg_.conv_stride));
        h = avg_pool(h, cfg_.pool_window);
        h = reshape(h, {b, cfg_.encoder_features()});
        Var out = encoder_mlp_(h);
        return {slice_cols(out, 0, dz), slice_cols(out, dz, 2 * dz)};
    }

    // -----------------------------------------------------------------------------------------
    // Latent sampling

    /// z = mean + exp(log_var / 2) * eta, with eta supplied by the caller.
    LatentCode reparameterize(const GaussianParams& q, const Array& eta) const {
        if (eta.shape() != q.mean.shape()) {
            throw DimensionError("reparameterize: noise " + shape_str(eta.shape()) + " vs mean " +
                                 shape_str(q.mean.shape()));
        }
        Var z = add(q.mean, mul(exp(scale(q.log_var, 0.5)), Var::constant(eta)));
        return split_latent(z);
    }

    LatentCode sample_latent(const GaussianParams& q, std::mt19937_64& rng) const {
        return reparameterize(q, standard_normal(q.mean.shape(), rng));
    }

    LatentCode split_latent(const Var& z) const {
        return {slice_cols(z, 0, cfg_.d_u), slice_cols(z, cfg_.d_u, cfg_.latent_dim()), z};
    }

    static Array standard_normal(const Shape& shape, std::mt19937_64& rng) {
        std::normal_distribution<double> nd(0.0, 1.0);
        Array a(shape);
        for (auto& v : a.data()) v = nd(rng);
        return a;
    }

    // -----------------------------------------------------------------------------------------
    // Priors

    /// p(z_u | u): [B x d_u] mean and log-variance.
    GaussianParams conditional_prior(const SystemInput& u) const {
        u.validate(cfg_.inputs);
        Var feats = Var::constant(input_features(u));
        Var out = prior_mlp_(feats);
        return {slice_cols(out, 0, cfg_.d_u), slice_cols(out, cfg_.d_u, 2 * cfg_.d_u)};
    }

    /// p(z_eps) = N(0, I).
    GaussianParams noise_prior(std::size_t batch) const {
        return {Var::constant(Array(Shape{batch, cfg_.d_eps})), Var::constant(Array(Shape{batch, cfg_.d_eps}))};
    }

    Array input_features(const SystemInput& u) const {
        const std::size_t b = u.batch(), p = cfg_.inputs.n_continuous, c = cfg_.inputs.n_classes;
        Array f(Shape{b, p + c});
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < p; ++j) f.at(i, j) = u.continuous.at(i, j);
            if (c > 0) f.at(i, p + static_cast<std::size_t>(u.labels[i])) = 1.0;
        }
        return f;
    }

    // -----------------------------------------------------------------------------------------
    // q(u | z_u)

    InputPosterior input_head(const Var& z_u) const {
        const std::size_t c = cfg_.inputs.n_classes, p = cfg_.inputs.n_continuous;
        Var out = head_mlp_(z_u);
        InputPosterior post;
        if (c > 0) {
            post.log_probs = log_softmax(slice_cols(out, 0, c));
            post.has_categorical = true;
        }
        if (p > 0) {
            post.gaussian = {slice_cols(out, c, c + p), slice_cols(out, c + p, c + 2 * p)};
            post.has_continuous = true;
        }
        return post;
    }

    // -----------------------------------------------------------------------------------------
    // Generative path

    /// x0 in (0, 1)^D.
    Var init_state(const Var& z) const { return sigmoid(init_mlp_(z)); }

    /// f1(x, z, t) - x * f2(x, z, t), evaluated on the explicit concatenation [x, z, t].
    Var dynamics(const Var& x, const Var& z, double t) const {
        const std::size_t b = x.dim(0);
        Var xzt = concat_cols({x, z, Var::constant(Array(Shape{b, 1}, t))});
        Var f1 = sigmoid(f1_(xzt));
        Var f2 = sigmoid(f2_(xzt));
        return sub(f1, mul(x, f2));
    }

    /// The same vector field as dynamics(), with the z-dependent part of the first layer
    /// computed once per solve.
    VectorField dynamics_field(const Var& z) const {
        const std::size_t d = cfg_.state_dim, dz = cfg_.latent_dim();
        struct Cached {
            Var wx, wt, zc, w2, b2;
        };
        auto cache = std::make_shared<Cached>();
        Var w1 = concat_cols({f1_.fc1().weight(), f2_.fc1().weight()}); // [(D+dz+1) x 2H]
        Var b1 = concat_cols({reshape(f1_.fc1().bias(), {1, cfg_.hidden}), reshape(f2_.fc1().bias(), {1, cfg_.hidden})});
        cache->wx = slice_rows(w1, 0, d);
        cache->wt = slice_rows(w1, d + dz, d + dz + 1);
        cache->zc = add(matmul(z, slice_rows(w1, d, d + dz)), b1);
        // block-diagonal second layer: [2H x 2D]
        const std::size_t h = cfg_.hidden;
        Var zeros_hd = Var::constant(Array(Shape{h, d}));
        cache->w2 = concat_rows({concat_cols({f1_.fc2().weight(), zeros_hd}), concat_cols({zeros_hd, f2_.fc2().weight()})});
        cache->b2 = concat_cols({reshape(f1_.fc2().bias(), {1, d}), reshape(f2_.fc2().bias(), {1, d})});
        return [cache, d](const Var& x, double t) {
            Var pre = add(matmul(x, cache->wx), add(cache->zc, scale(cache->wt, t)));
            Var f = sigmoid(add(matmul(relu(pre), cache->w2), cache->b2)); // [B x 2D]
            return sub(slice_cols(f, 0, d), mul(x, slice_cols(f, d, 2 * d)));
        };
    }

    StateTrajectory solve(const LatentCode& z, const TimeGrid& grid, const SolverConfig& solver) const {
        return ode_solve(dynamics_field(z.z), init_state(z.z), grid, solver);
    }

    /// Quantile emission from each state: median, lower = median - softplus(gap_low),
    /// upper = median + softplus(gap_up), and a per-channel log-scale shared by the three levels.
    QuantileEmission emit(const StateTrajectory& traj) const {
        if (cfg_.emission != EmissionMode::ald) throw ContractError("emit: model was built with Gaussian emission");
        const std::size_t k = cfg_.channels;
        auto [out, t_len, b] = emission_outputs(traj);
        auto block = [&](std::size_t i) { return reshape(slice_cols(out, i * k, (i + 1) * k), {t_len, b, k}); };
        QuantileEmission em;
        em.median = block(0);
        em.lower = sub(em.median, softplus(block(1)));
        em.upper = add(em.median, softplus(block(2)));
        em.log_sigma = block(3);
        return em;
    }

    GaussianEmission emit_gaussian(const StateTrajectory& traj) const {
        if (cfg_.emission != EmissionMode::gaussian) {
            throw ContractError("emit_gaussian: model was built with quantile emission");
        }
        const std::size_t k = cfg_.channels;
        auto [out, t_len, b] = emission_outputs(traj);
        return {reshape(slice_cols(out, 0, k), {t_len, b, k}), reshape(slice_cols(out, k, 2 * k), {t_len, b, k})};
    }

    const Linear& emission_layer() const { return emission_; }

private:
    struct EmissionOut {
        Var out;
        std::size_t t_len;
        std::size_t batch;
    };

    EmissionOut emission_outputs(const StateTrajectory& traj) const {
        for (const auto& s : traj.states) {
            if (!s.value().all_finite()) throw DomainError("emit: non-finite state");
        }
        const Var& s0 = traj.states.front();
        if (s0.rank() != 2 || s0.dim(1) != cfg_.state_dim) {
            throw DimensionError("emit: states must be [B x " + std::to_string(cfg_.state_dim) + "], got " +
                                 shape_str(s0.shape()));
        }
        return {emission_(concat_rows(traj.states)), traj.states.size(), s0.dim(0)};
    }

    ModelConfig cfg_;
    ParameterSet params_;
    Var conv_weight_;
    Var conv_bias_;
    Mlp encoder_mlp_;
    Mlp prior_mlp_;
    Mlp head_mlp_;
    Mlp init_mlp_;
    Mlp f1_;
    Mlp f2_;
    Linear emission_;
};

} // namespace slode
