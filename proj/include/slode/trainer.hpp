#pragma once

// Mini-batch maximization of the weighted bound with Adam, validation-based early stopping,
// and the key=value form of the training configuration.

#include <chrono>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "datagen.hpp"
#include "model.hpp"
#include "objective.hpp"
#include "optim.hpp"
#include "random.hpp"
#include "textio.hpp"

namespace slode {

struct TrainConfig {
    ModelConfig model;
    SolverConfig solver;
    std::size_t batch_size = 128;
    double lr = 1e-3;
    std::size_t max_epochs = 500;
    std::size_t patience = 20;
    std::uint64_t seed = 0;
    std::size_t S_qu = 50;          ///< samples behind the q(u|Y) estimate
    double clip_norm = 10.0;        ///< 0 disables gradient clipping
    std::size_t outer_samples = 1;  ///< z draws per series per step
    WeightGradient weight_gradient = WeightGradient::numerator_only;
    HeadGradient head_gradient = HeadGradient::auxiliary;
    double head_fit_weight = 1.0;   ///< encoder weight of the head fit per observed entry (times K*T), auxiliary mode
    std::size_t n_z = 32;           ///< posterior draws for inference metrics
    std::size_t n_prior = 200;      ///< prior draws for generation

    void validate() const {
        model.validate();
        solver.validate();
        if (batch_size < 1) throw ArgumentError("TrainConfig: batch_size must be at least 1");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ArgumentError("TrainConfig: lr must be positive");
        if (patience < 1) throw ArgumentError("TrainConfig: patience must be at least 1");
        if (S_qu < 1 || outer_samples < 1 || n_z < 1 || n_prior < 1) {
            throw ArgumentError("TrainConfig: sample counts must be at least 1");
        }
        if (!(clip_norm >= 0.0)) throw ArgumentError("TrainConfig: clip_norm must be non-negative");
        if (!(head_fit_weight >= 0.0) || !std::isfinite(head_fit_weight)) {
            throw ArgumentError("TrainConfig: head_fit_weight must be finite and non-negative");
        }
    }
};

// ---------------------------------------------------------------------------------------------
// key=value form

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline KeyValues to_key_values(const TrainConfig& c) {
    auto u = [](std::size_t v) { return std::to_string(v); };
    return {
        {"batch_size", u(c.batch_size)},
        {"lr", format_real(c.lr)},
        {"max_epochs", u(c.max_epochs)},
        {"patience", u(c.patience)},
        {"seed", std::to_string(c.seed)},
        {"S_qu", u(c.S_qu)},
        {"clip_norm", format_real(c.clip_norm)},
        {"outer_samples", u(c.outer_samples)},
        {"weight_gradient", to_string(c.weight_gradient)},
        {"head_gradient", to_string(c.head_gradient)},
        {"head_fit_weight", format_real(c.head_fit_weight)},
        {"n_z", u(c.n_z)},
        {"n_prior", u(c.n_prior)},
        {"emission", to_string(c.model.emission)},
        {"channels", u(c.model.channels)},
        {"n_times", u(c.model.n_times)},
        {"n_classes", u(c.model.inputs.n_classes)},
        {"n_continuous", u(c.model.inputs.n_continuous)},
        {"d_u", u(c.model.d_u)},
        {"d_eps", u(c.model.d_eps)},
        {"state_dim", u(c.model.state_dim)},
        {"hidden", u(c.model.hidden)},
        {"conv_channels", u(c.model.conv_channels)},
        {"kernel_width", u(c.model.kernel_width)},
        {"conv_stride", u(c.model.conv_stride)},
        {"pool_window", u(c.model.pool_window)},
        {"solver", to_string(c.solver.method)},
        {"rtol", format_real(c.solver.rtol)},
        {"atol", format_real(c.solver.atol)},
        {"max_steps", u(c.solver.max_steps)},
        {"substeps", u(c.solver.substeps_per_interval)},
    };
}

/// Sets one field from its text form. Returns false for a key this config does not own.
inline bool set_key(TrainConfig& c, const std::string& key, const std::string& value) {
    auto size = [&](std::size_t& dst) {
        const long long v = parse_int(value, key);
        if (v < 0) throw ParseError(key + ": expected a non-negative integer, got '" + value + "'");
        dst = static_cast<std::size_t>(v);
    };
    auto real = [&](double& dst) { dst = parse_real(value, key); };
    try {
        if (key == "batch_size") size(c.batch_size);
        else if (key == "lr") real(c.lr);
        else if (key == "max_epochs" || key == "epochs") size(c.max_epochs);
        else if (key == "patience") size(c.patience);
        else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(value, key));
        else if (key == "S_qu") size(c.S_qu);
        else if (key == "clip_norm") real(c.clip_norm);
        else if (key == "outer_samples") size(c.outer_samples);
        else if (key == "weight_gradient") c.weight_gradient = weight_gradient_from_string(value);
        else if (key == "head_gradient") c.head_gradient = head_gradient_from_string(value);
        else if (key == "head_fit_weight") real(c.head_fit_weight);
        else if (key == "n_z") size(c.n_z);
        else if (key == "n_prior") size(c.n_prior);
        else if (key == "emission") c.model.emission = emission_mode_from_string(value);
        else if (key == "channels") size(c.model.channels);
        else if (key == "n_times") size(c.model.n_times);
        else if (key == "n_classes") size(c.model.inputs.n_classes);
        else if (key == "n_continuous") size(c.model.inputs.n_continuous);
        else if (key == "d_u") size(c.model.d_u);
        else if (key == "d_eps") size(c.model.d_eps);
        else if (key == "state_dim") size(c.model.state_dim);
        else if (key == "hidden") size(c.model.hidden);
        else if (key == "conv_channels") size(c.model.conv_channels);
        else if (key == "kernel_width") size(c.model.kernel_width);
        else if (key == "conv_stride") size(c.model.conv_stride);
        else if (key == "pool_window") size(c.model.pool_window);
        else if (key == "solver") c.solver.method = solver_method_from_string(value);
        else if (key == "rtol") real(c.solver.rtol);
        else if (key == "atol") real(c.solver.atol);
        else if (key == "max_steps") size(c.solver.max_steps);
        else if (key == "substeps") size(c.solver.substeps_per_interval);
        else return false;
    } catch (const ArgumentError& e) {
        throw ParseError(key + ": " + e.what());
    }
    return true;
}

// ---------------------------------------------------------------------------------------------
// Training

/// More than 1% of an epoch's batches failed to integrate.
class TrainingAborted : public std::runtime_error {
public:
    TrainingAborted(const std::string& what, std::size_t epoch) : std::runtime_error(what), epoch_(epoch) {}
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

struct EpochLog {
    std::size_t epoch = 0;
    double train_elbo = 0.0;
    double val_elbo = 0.0;
    double wall_seconds = 0.0;
    std::size_t failed_batches = 0;
};

using NamedArrays = std::map<std::string, Array>;

inline NamedArrays snapshot(const ParameterSet& params) {
    NamedArrays out;
    for (const auto& [name, e] : params) out.emplace(name, e.param.value());
    return out;
}

inline void restore(ParameterSet& params, const NamedArrays& values) {
    for (const auto& [name, v] : values) params.assign(name, v);
}

/// Trained weights plus everything needed to rebuild and use them.
struct Checkpoint {
    TrainConfig config;
    Normalization norm;
    double t_max = 10.0; ///< observation grid is uniform on [0, t_max] with config.model.n_times points
    std::size_t epoch = 0;
    double best_val_elbo = -std::numeric_limits<double>::infinity();
    NamedArrays params;

    SlOdeModel instantiate() const {
        SlOdeModel m(config.model);
        const auto names = m.parameters().names();
        for (const auto& n : names) {
            if (!params.count(n)) throw ArgumentError("checkpoint lacks parameter '" + n + "'");
        }
        for (const auto& [n, v] : params) {
            if (!m.parameters().contains(n)) throw ArgumentError("checkpoint has unknown parameter '" + n + "'");
        }
        restore(m.parameters(), params);
        return m;
    }

    TimeGrid grid() const { return TimeGrid::uniform(0.0, t_max, config.model.n_times); }
};

struct TrainResult {
    Checkpoint best;
    std::vector<EpochLog> history;
    bool early_stopped = false;
};

/// Per-series noise streams for one pass over a set of series.
inline std::vector<std::mt19937_64> series_streams(std::uint64_t seed, StreamTag tag, std::uint64_t pass,
                                                   const std::vector<const LabeledSeries*>& series,
                                                   std::size_t repeats = 1) {
    std::vector<std::mt19937_64> out;
    out.reserve(series.size() * repeats);
    for (std::size_t r = 0; r < repeats; ++r) {
        for (const auto* s : series) {
            const std::uint64_t id = static_cast<std::uint64_t>(s->series_id) | (pass << 32) | (std::uint64_t(r) << 56);
            out.push_back(derive_stream(seed, tag, id));
        }
    }
    return out;
}

inline std::vector<const LabeledSeries*> pointers(const std::vector<LabeledSeries>& series) {
    std::vector<const LabeledSeries*> out;
    out.reserve(series.size());
    for (const auto& s : series) out.push_back(&s);
    return out;
}

/// Tiles a batch `times` over: block r is a copy of the whole batch.
inline SeriesBatch tile_batch(const SeriesBatch& b, std::size_t times) {
    if (times == 1) return b;
    SeriesBatch out;
    const std::size_t n = b.y.dim(0), k = b.y.dim(1), t = b.y.dim(2);
    out.y = Array(Shape{n * times, k, t});
    for (std::size_t r = 0; r < times; ++r) {
        std::copy(b.y.data().begin(), b.y.data().end(), out.y.data().begin() + static_cast<std::ptrdiff_t>(r * n * k * t));
        out.series_ids.insert(out.series_ids.end(), b.series_ids.begin(), b.series_ids.end());
    }
    out.u = b.u.tiled(times);
    return out;
}

/// Mean per-series bound over `series`, no gradient, noise fixed per series by (seed, tag).
inline double mean_elbo(const SlOdeModel& model, const std::vector<LabeledSeries>& series, const Normalization& norm,
                        const TimeGrid& grid, const TrainConfig& cfg, StreamTag tag) {
    NoGradGuard ng;
    const auto all = pointers(series);
    double sum = 0.0;
    for (std::size_t start = 0; start < all.size(); start += cfg.batch_size) {
        const std::size_t stop = std::min(all.size(), start + cfg.batch_size);
        std::vector<const LabeledSeries*> chunk(all.begin() + static_cast<std::ptrdiff_t>(start),
                                                all.begin() + static_cast<std::ptrdiff_t>(stop));
        SeriesBatch b = make_batch(chunk, norm);
        auto streams = series_streams(cfg.seed, tag, 0, chunk);
        auto noise = ElboNoise::draw(streams, cfg.model.latent_dim(), cfg.model.d_u, cfg.S_qu);
        ElboOptions opt;
        opt.solver = cfg.solver;
        ElboResult r = elbo(model, b.y, b.u, grid, noise, opt);
        for (std::size_t i = 0; i < r.series.size(); ++i) sum += r.series[i].total;
    }
    return sum / static_cast<double>(all.size());
}

/// Seed used for parameter initialization.
inline std::uint64_t init_seed(std::uint64_t seed) { return derive_stream(seed, StreamTag::init)(); }

/// Fits the model to `data.splits.train`, stopping early on the validation bound.
/// Returns the checkpoint with the best validation bound (the initialization when no epoch ran).
inline TrainResult train(const Dataset& data, TrainConfig cfg,
                         const std::function<void(const EpochLog&, const SlOdeModel&)>& on_epoch = nullptr) {
    if (data.splits.train.empty() || data.splits.val.empty()) {
        throw ArgumentError("train: training and validation splits must be non-empty");
    }
    const TimeGrid grid = data.grid();
    cfg.model.n_times = grid.size();
    cfg.model.channels = data.splits.train.front().y.dim(0);
    cfg.validate();

    SlOdeModel model(cfg.model, init_seed(cfg.seed));
    ParameterSet& params = model.parameters();

    TrainResult result;
    result.best.config = cfg;
    result.best.norm = data.norm;
    result.best.t_max = data.config.t_max;
    result.best.params = snapshot(params);

    const auto train_ptrs = pointers(data.splits.train);
    const std::size_t n_train = train_ptrs.size();
    const std::size_t n_batches = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(n_train);
        std::iota(order.begin(), order.end(), 0);
        auto shuffle_rng = derive_stream(cfg.seed, StreamTag::shuffle, epoch);
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double train_sum = 0.0;
        std::size_t train_count = 0, failures = 0;
        for (std::size_t bi = 0; bi < n_batches; ++bi) {
            std::vector<const LabeledSeries*> chunk;
            for (std::size_t i = bi * cfg.batch_size; i < std::min(n_train, (bi + 1) * cfg.batch_size); ++i) {
                chunk.push_back(train_ptrs[order[i]]);
            }
            SeriesBatch b = tile_batch(make_batch(chunk, data.norm), cfg.outer_samples);
            auto streams = series_streams(cfg.seed, StreamTag::train_noise, epoch, chunk, cfg.outer_samples);
            auto noise = ElboNoise::draw(streams, cfg.model.latent_dim(), cfg.model.d_u, cfg.S_qu);
            ElboOptions opt;
            opt.solver = cfg.solver;
            opt.weight_gradient = cfg.weight_gradient;
            try {
                ElboResult r = elbo(model, b.y, b.u, grid, noise, opt);
                const double value = r.objective.value().item();
                if (!std::isfinite(value)) throw DomainError("non-finite bound");
                const double entries = static_cast<double>(cfg.model.channels * cfg.model.n_times);
                backward_elbo(r, params, cfg.head_gradient, cfg.head_fit_weight * entries);
                if (cfg.clip_norm > 0.0) clip_grad_norm(params, cfg.clip_norm);
                adam_step(params, cfg.lr);
                train_sum += value * static_cast<double>(chunk.size());
                train_count += chunk.size();
            } catch (const IntegrationError&) {
                params.zero_grad();
                ++failures;
            } catch (const DomainError&) {
                params.zero_grad();
                ++failures;
            }
            if (static_cast<double>(failures) > 0.01 * static_cast<double>(n_batches)) {
                throw TrainingAborted("training aborted in epoch " + std::to_string(epoch) + ": " +
                                          std::to_string(failures) + " of " + std::to_string(n_batches) +
                                          " batches failed to integrate",
                                      epoch);
            }
        }

        EpochLog log;
        log.epoch = epoch;
        log.failed_batches = failures;
        log.train_elbo = train_count ? train_sum / static_cast<double>(train_count) : std::nan("");
        log.val_elbo = mean_elbo(model, data.splits.val, data.norm, grid, cfg, StreamTag::val_noise);
        log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(log);
        if (on_epoch) on_epoch(log, model);

        if (log.val_elbo > result.best.best_val_elbo) {
            result.best.best_val_elbo = log.val_elbo;
            result.best.epoch = epoch;
            result.best.params = snapshot(params);
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

/// Trailing moving average over `window` epochs (shorter at the start).
inline std::vector<double> smoothed(const std::vector<double>& v, std::size_t window) {
    std::vector<double> out(v.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        acc += v[i];
        if (i >= window) acc -= v[i - window];
        out[i] = acc / static_cast<double>(std::min(i + 1, window));
    }
    return out;
}

} // namespace slode
