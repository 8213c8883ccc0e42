#pragma once

// Evaluation: input inference, posterior and prior reconstructions, band coverage, and the
// mean bound. Every random draw comes from a per-series stream, so results do not depend on
// chunking or on the number of worker threads.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "checkpoint.hpp"
#include "trainer.hpp"

namespace slode {

/// Worker count from SLODE_THREADS (default 1).
inline std::size_t worker_threads() {
    const char* env = std::getenv("SLODE_THREADS");
    if (!env || !*env) return 1;
    try {
        const long long n = parse_int(env, "SLODE_THREADS");
        return n < 1 ? 1 : static_cast<std::size_t>(n);
    } catch (const ParseError&) {
        return 1;
    }
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be written by index.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

struct EvalSettings {
    std::uint64_t seed = 0;
    std::size_t n_z = 32;
    std::size_t n_prior = 200;
    std::size_t S_qu = 50;
    std::size_t batch_size = 128;
    SolverConfig solver;
    std::size_t threads = 1;

    static EvalSettings from(const TrainConfig& c) {
        EvalSettings s;
        s.seed = c.seed;
        s.n_z = c.n_z;
        s.n_prior = c.n_prior;
        s.S_qu = c.S_qu;
        s.batch_size = c.batch_size;
        s.solver = c.solver;
        s.threads = worker_threads();
        return s;
    }
};

/// Posterior-averaged quantities for one series.
struct PosteriorSummary {
    int series_id = 0;
    std::vector<double> probs;      ///< averaged class probabilities (C)
    int label = -1;                 ///< argmax of probs
    std::vector<double> continuous; ///< averaged continuous means (P)
    Array median;                   ///< [K x T] raw units
    Array lower;
    Array upper;
};

namespace detail {

inline std::size_t argmax(const std::vector<double>& v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Median and the 2.5% / 97.5% band of one emission, [T x B x K] each, normalized units.
struct Bands {
    Array median, lower, upper;
};

inline Bands emission_bands(const SlOdeModel& model, const StateTrajectory& traj) {
    if (model.config().emission == EmissionMode::ald) {
        auto em = model.emit(traj);
        return {em.median.value(), em.lower.value(), em.upper.value()};
    }
    auto em = model.emit_gaussian(traj);
    Bands b{em.mean.value(), em.mean.value(), em.mean.value()};
    const double z = 1.959963984540054;
    for (std::size_t i = 0; i < b.median.size(); ++i) {
        const double sd = std::exp(0.5 * em.log_var.value()[i]);
        b.lower[i] -= z * sd;
        b.upper[i] += z * sd;
    }
    return b;
}

constexpr std::size_t kChunk = 8;

} // namespace detail

/// Averages the input head (and, with `reconstruct`, the emitted bands) over n_z draws from
/// q(z|Y) for each series.
inline std::vector<PosteriorSummary> posterior_pass(const SlOdeModel& model, const Normalization& norm,
                                                    const std::vector<LabeledSeries>& series, const TimeGrid& grid,
                                                    const EvalSettings& s, bool reconstruct) {
    const ModelConfig& cfg = model.config();
    const std::size_t n = series.size(), dz = cfg.latent_dim(), nz = s.n_z;
    const std::size_t c = cfg.inputs.n_classes, p = cfg.inputs.n_continuous, k = cfg.channels, t = grid.size();
    std::vector<PosteriorSummary> out(n);
    const std::size_t chunks = (n + detail::kChunk - 1) / detail::kChunk;

    parallel_for(chunks, s.threads, [&](std::size_t ci) {
        NoGradGuard ng;
        const std::size_t lo = ci * detail::kChunk, hi = std::min(n, lo + detail::kChunk), b = hi - lo;
        std::vector<const LabeledSeries*> chunk;
        for (std::size_t i = lo; i < hi; ++i) chunk.push_back(&series[i]);
        SeriesBatch batch = make_batch(chunk, norm);
        auto q = model.encode(Var::constant(batch.y));
        const Array& mean = q.mean.value();
        const Array& log_var = q.log_var.value();

        // row r = sample * b + series
        Array z(Shape{nz * b, dz});
        for (std::size_t i = 0; i < b; ++i) {
            auto rng = derive_stream(s.seed, StreamTag::inference, static_cast<std::uint64_t>(chunk[i]->series_id));
            std::normal_distribution<double> nd(0.0, 1.0);
            for (std::size_t smp = 0; smp < nz; ++smp)
                for (std::size_t j = 0; j < dz; ++j) {
                    z.at(smp * b + i, j) = mean.at(i, j) + std::exp(0.5 * log_var.at(i, j)) * nd(rng);
                }
        }
        LatentCode lat = model.split_latent(Var::constant(z));
        InputPosterior post = model.input_head(lat.z_u);
        const Array probs = c > 0 ? post.probs() : Array(Shape{nz * b, 0});
        const Array cont = p > 0 ? post.gaussian.mean.value() : Array(Shape{nz * b, 0});

        detail::Bands bands;
        if (reconstruct) bands = detail::emission_bands(model, model.solve(lat, grid, s.solver));

        for (std::size_t i = 0; i < b; ++i) {
            PosteriorSummary& ps = out[lo + i];
            ps.series_id = chunk[i]->series_id;
            ps.probs.assign(c, 0.0);
            ps.continuous.assign(p, 0.0);
            for (std::size_t smp = 0; smp < nz; ++smp) {
                for (std::size_t j = 0; j < c; ++j) ps.probs[j] += probs.at(smp * b + i, j) / static_cast<double>(nz);
                for (std::size_t j = 0; j < p; ++j) ps.continuous[j] += cont.at(smp * b + i, j) / static_cast<double>(nz);
            }
            if (c > 0) ps.label = static_cast<int>(detail::argmax(ps.probs));
            if (!reconstruct) continue;
            ps.median = Array(Shape{k, t});
            ps.lower = Array(Shape{k, t});
            ps.upper = Array(Shape{k, t});
            for (std::size_t smp = 0; smp < nz; ++smp)
                for (std::size_t tt = 0; tt < t; ++tt)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const std::size_t row = smp * b + i;
                        ps.median.at(kk, tt) += bands.median.at(tt, row, kk);
                        ps.lower.at(kk, tt) += bands.lower.at(tt, row, kk);
                        ps.upper.at(kk, tt) += bands.upper.at(tt, row, kk);
                    }
            for (Array* a : {&ps.median, &ps.lower, &ps.upper}) {
                for (auto& v : a->data()) v /= static_cast<double>(nz);
                *a = norm.invert(*a);
            }
        }
    });
    return out;
}

/// Trajectories drawn from the generative path for one system input.
struct GeneratedSummary {
    Array samples; ///< [n x K x T] median (or mean) head per draw, raw units
    Array median;  ///< [K x T] per-point empirical quantiles over the draws
    Array lower;
    Array upper;
    Array mean;    ///< [K x T] average over the draws
};

/// Linear-interpolation empirical quantile of sorted values.
inline double sorted_quantile(const std::vector<double>& sorted, double level) {
    if (sorted.empty()) throw ArgumentError("sorted_quantile: no values");
    const double pos = level * static_cast<double>(sorted.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    if (i + 1 >= sorted.size()) return sorted.back();
    const double f = pos - static_cast<double>(i);
    return sorted[i] + f * (sorted[i + 1] - sorted[i]);
}

/// z_u ~ p(z_u | u), z_eps ~ N(0, I), then solve and emit, n_samples times.
/// `u` holds a single system input.
inline GeneratedSummary prior_generate(const SlOdeModel& model, const Normalization& norm, const SystemInput& u,
                                       std::size_t n_samples, const TimeGrid& grid, const SolverConfig& solver,
                                       std::mt19937_64& rng) {
    if (n_samples < 1) throw ArgumentError("prior_generate: n_samples must be at least 1");
    if (u.batch() != 1) throw ArgumentError("prior_generate: expects exactly one system input");
    NoGradGuard ng;
    const ModelConfig& cfg = model.config();
    const std::size_t n = n_samples, k = cfg.channels, t = grid.size(), du = cfg.d_u, de = cfg.d_eps;
    auto prior = model.conditional_prior(u);
    Array z(Shape{n, du + de});
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t smp = 0; smp < n; ++smp) {
        for (std::size_t j = 0; j < du; ++j) {
            z.at(smp, j) = prior.mean.value()[j] + std::exp(0.5 * prior.log_var.value()[j]) * nd(rng);
        }
        for (std::size_t j = 0; j < de; ++j) z.at(smp, du + j) = nd(rng);
    }
    auto bands = detail::emission_bands(model, model.solve(model.split_latent(Var::constant(z)), grid, solver));

    GeneratedSummary g;
    g.samples = Array(Shape{n, k, t});
    for (std::size_t smp = 0; smp < n; ++smp)
        for (std::size_t kk = 0; kk < k; ++kk)
            for (std::size_t tt = 0; tt < t; ++tt) {
                g.samples.at(smp, kk, tt) = norm.invert(kk, bands.median.at(tt, smp, kk));
            }
    g.median = Array(Shape{k, t});
    g.lower = Array(Shape{k, t});
    g.upper = Array(Shape{k, t});
    g.mean = Array(Shape{k, t});
    std::vector<double> col(n);
    for (std::size_t kk = 0; kk < k; ++kk)
        for (std::size_t tt = 0; tt < t; ++tt) {
            double sum = 0.0;
            for (std::size_t smp = 0; smp < n; ++smp) sum += col[smp] = g.samples.at(smp, kk, tt);
            std::sort(col.begin(), col.end());
            g.median.at(kk, tt) = sorted_quantile(col, 0.5);
            g.lower.at(kk, tt) = sorted_quantile(col, kQuantileLevels[0]);
            g.upper.at(kk, tt) = sorted_quantile(col, kQuantileLevels[2]);
            g.mean.at(kk, tt) = sum / static_cast<double>(n);
        }
    return g;
}

/// The system input of one stored series, as a batch of one.
inline SystemInput series_input(const LabeledSeries& s) {
    SystemInput u;
    u.continuous = Array::matrix({{s.u1, s.u2}});
    u.labels = {s.label};
    return u;
}

/// Prior-sampled average reconstruction for each series, [K x T] raw units.
inline std::vector<Array> prior_reconstructions(const SlOdeModel& model, const Normalization& norm,
                                                const std::vector<LabeledSeries>& series, const TimeGrid& grid,
                                                const EvalSettings& s) {
    std::vector<Array> out(series.size());
    parallel_for(series.size(), s.threads, [&](std::size_t i) {
        auto rng = derive_stream(s.seed, StreamTag::prior, static_cast<std::uint64_t>(series[i].series_id));
        out[i] = prior_generate(model, norm, series_input(series[i]), s.n_prior, grid, s.solver, rng).mean;
    });
    return out;
}

/// Mean absolute error per class, then averaged over the classes present.
inline double class_averaged_l1(const std::vector<Array>& predicted, const std::vector<Array>& observed,
                                const std::vector<int>& labels) {
    if (predicted.size() != observed.size() || predicted.size() != labels.size() || predicted.empty()) {
        throw DimensionError("class_averaged_l1: need matching, non-empty prediction, observation and label lists");
    }
    std::map<int, std::pair<double, std::size_t>> acc;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i].shape() != observed[i].shape()) throw DimensionError("class_averaged_l1: shape mismatch");
        auto& [sum, count] = acc[labels[i]];
        for (std::size_t j = 0; j < predicted[i].size(); ++j) sum += std::abs(predicted[i][j] - observed[i][j]);
        count += predicted[i].size();
    }
    double total = 0.0;
    for (const auto& [label, sc] : acc) total += sc.first / static_cast<double>(sc.second);
    return total / static_cast<double>(acc.size());
}

/// Fraction of observed points inside [lower, upper].
inline double band_coverage(const std::vector<Array>& observed, const std::vector<Array>& lower,
                            const std::vector<Array>& upper) {
    std::size_t inside = 0, total = 0;
    for (std::size_t i = 0; i < observed.size(); ++i) {
        for (std::size_t j = 0; j < observed[i].size(); ++j) {
            inside += observed[i][j] >= lower[i][j] && observed[i][j] <= upper[i][j];
            ++total;
        }
    }
    if (total == 0) throw ArgumentError("band_coverage: no points");
    return static_cast<double>(inside) / static_cast<double>(total);
}

struct MetricsReport {
    std::string emission;
    std::size_t n_series = 0;
    double u_accuracy = 0.0;
    double u_mse = 0.0;
    double l1_posterior = 0.0;
    double l1_prior = 0.0;
    double elbo_mean = 0.0;
    double coverage_95 = 0.0;
};

inline std::string format_report(const MetricsReport& r) {
    std::string s;
    s += "emission: " + r.emission + "\n";
    s += "n_series: " + std::to_string(r.n_series) + "\n";
    s += "u_accuracy: " + format_real(r.u_accuracy) + "\n";
    s += "u_mse: " + format_real(r.u_mse) + "\n";
    s += "l1_posterior: " + format_real(r.l1_posterior) + "\n";
    s += "l1_prior: " + format_real(r.l1_prior) + "\n";
    s += "elbo_mean: " + format_real(r.elbo_mean) + "\n";
    s += "coverage_95: " + format_real(r.coverage_95) + "\n";
    return s;
}

/// Classification accuracy and continuous-input MSE from posterior summaries.
inline std::pair<double, double> input_scores(const std::vector<PosteriorSummary>& post,
                                              const std::vector<LabeledSeries>& series) {
    double correct = 0.0, sq = 0.0;
    std::size_t n_cont = 0;
    for (std::size_t i = 0; i < post.size(); ++i) {
        correct += post[i].label == series[i].label;
        const double truth[2] = {series[i].u1, series[i].u2};
        for (std::size_t j = 0; j < post[i].continuous.size() && j < 2; ++j) {
            sq += (post[i].continuous[j] - truth[j]) * (post[i].continuous[j] - truth[j]);
            ++n_cont;
        }
    }
    const double acc = correct / static_cast<double>(post.size());
    return {acc, n_cont ? sq / static_cast<double>(n_cont) : 0.0};
}

/// All report fields for one split.
inline MetricsReport evaluate(const SlOdeModel& model, const Normalization& norm,
                              const std::vector<LabeledSeries>& series, const TimeGrid& grid, const EvalSettings& s) {
    if (series.empty()) throw ArgumentError("evaluate: empty split");
    MetricsReport r;
    r.emission = to_string(model.config().emission);
    r.n_series = series.size();

    const auto post = posterior_pass(model, norm, series, grid, s, true);
    std::tie(r.u_accuracy, r.u_mse) = input_scores(post, series);

    std::vector<Array> observed, median, lower, upper;
    std::vector<int> labels;
    for (std::size_t i = 0; i < series.size(); ++i) {
        observed.push_back(series[i].y);
        median.push_back(post[i].median);
        lower.push_back(post[i].lower);
        upper.push_back(post[i].upper);
        labels.push_back(series[i].label);
    }
    r.l1_posterior = class_averaged_l1(median, observed, labels);
    r.coverage_95 = band_coverage(observed, lower, upper);
    r.l1_prior = class_averaged_l1(prior_reconstructions(model, norm, series, grid, s), observed, labels);

    TrainConfig tc;
    tc.model = model.config();
    tc.seed = s.seed;
    tc.S_qu = s.S_qu;
    tc.batch_size = s.batch_size;
    tc.solver = s.solver;
    r.elbo_mean = mean_elbo(model, series, norm, grid, tc, StreamTag::eval_noise);
    return r;
}

inline MetricsReport evaluate(const Checkpoint& ckpt, const std::vector<LabeledSeries>& series, const TimeGrid& grid,
                              const EvalSettings& s) {
    SlOdeModel model = ckpt.instantiate();
    return evaluate(model, ckpt.norm, series, grid, s);
}

} // namespace slode
