#pragma once

// Command-line front end: gen-data, train, eval, infer, generate.
// Exit codes: 0 success, 2 usage, 3 I/O, 4 training abort, 5 incompatible inputs.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "datagen.hpp"
#include "metrics.hpp"
#include "trainer.hpp"

namespace slode::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kAborted = 4, kIncompatible = 5 };

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IncompatibleError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Everything a config file can set.
struct RunConfig {
    GeneratorConfig gen;
    TrainConfig train;
};

/// Returns false for an unknown key. Model sizes fixed by the data (channels, input spec,
/// series length) are not settable.
inline bool apply_key(RunConfig& c, const std::string& key, const std::string& value) {
    auto size = [&](std::size_t& dst) {
        const long long v = parse_int(value, key);
        if (v < 0) throw ParseError(key + ": expected a non-negative integer, got '" + value + "'");
        dst = static_cast<std::size_t>(v);
    };
    if (key == "n_series") size(c.gen.n_series);
    else if (key == "n_times") size(c.gen.n_times);
    else if (key == "t_max") c.gen.t_max = parse_real(value, key);
    else if (key == "noise_scale") c.gen.noise_scale = parse_real(value, key);
    else if (key == "noise_kind") {
        try {
            c.gen.noise_kind = noise_kind_from_string(value);
        } catch (const ArgumentError& e) {
            throw ParseError(key + ": " + e.what());
        }
    } else if (key == "seed") {
        c.gen.seed = static_cast<std::uint64_t>(parse_int(value, key));
        c.train.seed = c.gen.seed;
    } else if (key == "channels" || key == "n_classes" || key == "n_continuous") {
        return false;
    } else {
        return set_key(c.train, key, value);
    }
    return true;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file '" + path.string() + "'");
    RunConfig c;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        const std::string l = trim(line);
        if (l.empty() || l[0] == '#') continue;
        const auto eq = l.find('=');
        const std::string where = path.string() + ":" + std::to_string(n);
        if (eq == std::string::npos) throw UsageError(where + ": expected key=value");
        const std::string key = trim(l.substr(0, eq)), value = trim(l.substr(eq + 1));
        try {
            if (!apply_key(c, key, value)) throw UsageError(where + ": unknown key '" + key + "'");
        } catch (const ParseError& e) {
            throw UsageError(where + ": " + e.what());
        }
    }
    return c;
}

/// Parses "a,b" into two finite reals.
inline std::pair<double, double> parse_input_pair(const std::string& text) {
    const auto f = split_fields(text);
    if (f.size() != 2) throw UsageError("--u expects two comma-separated reals, got '" + text + "'");
    try {
        const double a = parse_real(trim(f[0]), "--u"), b = parse_real(trim(f[1]), "--u");
        if (!std::isfinite(a) || !std::isfinite(b)) throw UsageError("--u values must be finite");
        return {a, b};
    } catch (const ParseError& e) {
        throw UsageError(e.what());
    }
}

namespace detail {

inline Dataset open_dataset(const std::string& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("data directory '" + dir + "' does not exist");
    return load_dataset(dir);
}

inline void check_compatible(const Checkpoint& ck, std::size_t channels, const TimeGrid& grid) {
    const auto& m = ck.config.model;
    if (channels != m.channels) {
        throw IncompatibleError("data has " + std::to_string(channels) + " channels, model expects " +
                                std::to_string(m.channels));
    }
    if (grid.size() != m.n_times) {
        throw IncompatibleError("data has " + std::to_string(grid.size()) + " time points, model expects " +
                                std::to_string(m.n_times));
    }
    const TimeGrid trained = ck.grid();
    bool same = true;
    for (std::size_t t = 0; t < grid.size(); ++t) same = same && std::abs(grid[t] - trained[t]) <= 1e-9;
    if (!same) {
        throw IncompatibleError("data time grid differs from the grid the model was trained on");
    }
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    return out;
}

inline void finish(std::ofstream& out, const std::string& path) {
    out.flush();
    if (!out) throw IoError("failed writing '" + path + "'");
}

} // namespace detail

/// Runs one command line; diagnostics go to `err`, summaries to `out`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Structured latent ODE toolkit: surrogate data, training, evaluation, inference, generation",
                 "slode"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::optional<std::uint64_t> seed;
    bool verbose = false;
    app.add_option("--config", config_path, "key=value configuration file");
    app.add_option("--seed", seed, "random seed (overrides the config file)");
    app.add_flag("--verbose", verbose, "progress on standard error");

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate the surrogate dataset");
    std::string gen_out;
    std::optional<long long> gen_n, gen_times;
    std::optional<double> gen_tmax, gen_scale;
    std::optional<std::string> gen_noise;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--n", gen_n, "number of series");
    gen->add_option("--n-times", gen_times, "observation times per series");
    gen->add_option("--t-max", gen_tmax, "end of the observation window");
    gen->add_option("--noise", gen_noise, "gaussian or asymmetric");
    gen->add_option("--noise-scale", gen_scale, "observation noise scale");

    // train
    auto* trn = app.add_subcommand("train", "fit a model");
    std::string trn_data, trn_out, trn_log;
    std::optional<std::size_t> trn_epochs, trn_batch, trn_patience;
    std::optional<double> trn_lr;
    std::optional<std::string> trn_emission, trn_solver;
    trn->add_option("--data", trn_data, "dataset directory")->required();
    trn->add_option("--out", trn_out, "checkpoint path")->required();
    trn->add_option("--log", trn_log, "per-epoch log (default: <out>.log)");
    trn->add_option("--epochs", trn_epochs, "maximum epochs");
    trn->add_option("--batch-size", trn_batch, "series per batch");
    trn->add_option("--patience", trn_patience, "early-stopping patience");
    trn->add_option("--lr", trn_lr, "Adam learning rate");
    trn->add_option("--emission", trn_emission, "ald or gaussian");
    trn->add_option("--solver", trn_solver, "rk4 or dopri5");

    // eval
    auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    std::string evl_model, evl_data, evl_split = "test", evl_out;
    evl->add_option("--model", evl_model, "checkpoint")->required();
    evl->add_option("--data", evl_data, "dataset directory")->required();
    evl->add_option("--split", evl_split, "train, val or test");
    evl->add_option("--out", evl_out, "metrics report path")->required();

    // infer
    auto* inf = app.add_subcommand("infer", "infer system inputs for observed series");
    std::string inf_model, inf_data, inf_split = "test", inf_obs, inf_out;
    inf->add_option("--model", inf_model, "checkpoint")->required();
    auto* inf_data_opt = inf->add_option("--data", inf_data, "dataset directory");
    inf->add_option("--split", inf_split, "train, val or test");
    auto* inf_obs_opt = inf->add_option("--observations", inf_obs, "observations file");
    inf_data_opt->excludes(inf_obs_opt);
    inf->add_option("--out", inf_out, "predictions path")->required();

    // generate
    auto* gnr = app.add_subcommand("generate", "sample trajectories for given system inputs");
    std::string gnr_model, gnr_u, gnr_out;
    std::optional<std::size_t> gnr_samples;
    gnr->add_option("--model", gnr_model, "checkpoint")->required();
    gnr->add_option("--u", gnr_u, "system input as \"u1,u2\"")->required();
    gnr->add_option("--samples", gnr_samples, "number of draws");
    gnr->add_option("--out", gnr_out, "trajectory summary path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }

    auto say = [&](const std::string& s) {
        if (verbose) err << s << "\n";
    };

    try {
        RunConfig rc = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (seed) {
            rc.gen.seed = *seed;
            rc.train.seed = *seed;
        }

        if (*gen) {
            if (gen_n) {
                if (*gen_n < 1) throw UsageError("--n must be at least 1");
                rc.gen.n_series = static_cast<std::size_t>(*gen_n);
            }
            if (gen_times) {
                if (*gen_times < 2) throw UsageError("--n-times must be at least 2");
                rc.gen.n_times = static_cast<std::size_t>(*gen_times);
            }
            if (gen_tmax) rc.gen.t_max = *gen_tmax;
            if (gen_scale) rc.gen.noise_scale = *gen_scale;
            if (gen_noise) rc.gen.noise_kind = noise_kind_from_string(*gen_noise);
            rc.gen.validate();
            Dataset d = make_dataset(rc.gen);
            save_dataset(d, gen_out);
            out << "wrote " << rc.gen.n_series << " series (train " << d.splits.train.size() << ", val "
                << d.splits.val.size() << ", test " << d.splits.test.size() << ") to " << gen_out << "\n";
            return kOk;
        }

        if (*trn) {
            TrainConfig& tc = rc.train;
            if (trn_epochs) tc.max_epochs = *trn_epochs;
            if (trn_batch) tc.batch_size = *trn_batch;
            if (trn_patience) tc.patience = *trn_patience;
            if (trn_lr) tc.lr = *trn_lr;
            if (trn_emission) tc.model.emission = emission_mode_from_string(*trn_emission);
            if (trn_solver) tc.solver.method = solver_method_from_string(*trn_solver);
            Dataset d = detail::open_dataset(trn_data);
            tc.model.n_times = d.grid().size();
            tc.validate();
            if (trn_log.empty()) trn_log = trn_out + ".log";
            auto log = detail::open_out(trn_log);
            log << "emission,epoch,train_elbo,val_elbo,wall_seconds\n";
            const std::string mode = to_string(tc.model.emission);
            say("training (" + mode + " emission) on " + std::to_string(d.splits.train.size()) + " series");
            TrainResult r;
            try {
                r = train(d, tc, [&](const EpochLog& e, const SlOdeModel&) {
                    log << mode << "," << e.epoch << "," << format_real(e.train_elbo) << "," << format_real(e.val_elbo)
                        << "," << format_real(e.wall_seconds) << "\n";
                    log.flush();
                    say("epoch " + std::to_string(e.epoch) + " train " + format_real(e.train_elbo) + " val " +
                        format_real(e.val_elbo));
                });
            } catch (const TrainingAborted& e) {
                detail::finish(log, trn_log);
                throw;
            }
            detail::finish(log, trn_log);
            save_checkpoint(r.best, trn_out);
            out << "trained " << mode << " model: " << r.history.size() << " epochs, best epoch " << r.best.epoch
                << ", best val_elbo " << format_real(r.best.best_val_elbo) << "\n";
            return kOk;
        }

        if (*evl) {
            Checkpoint ck = load_checkpoint(evl_model);
            Dataset d = detail::open_dataset(evl_data);
            const auto& series = d.split(evl_split);
            if (series.empty()) throw UsageError("split '" + evl_split + "' is empty");
            detail::check_compatible(ck, series.front().y.dim(0), d.grid());
            EvalSettings s = EvalSettings::from(ck.config);
            if (seed) s.seed = *seed;
            MetricsReport m = evaluate(ck, series, d.grid(), s);
            auto f = detail::open_out(evl_out);
            f << format_report(m);
            detail::finish(f, evl_out);
            out << "emission " << m.emission << " n " << m.n_series << " u_accuracy " << format_real(m.u_accuracy)
                << " l1_posterior " << format_real(m.l1_posterior) << " l1_prior " << format_real(m.l1_prior)
                << " elbo_mean " << format_real(m.elbo_mean) << " coverage_95 " << format_real(m.coverage_95) << "\n";
            return kOk;
        }

        if (*inf) {
            Checkpoint ck = load_checkpoint(inf_model);
            std::vector<LabeledSeries> series;
            TimeGrid grid;
            bool labelled = false;
            if (!inf_obs.empty()) {
                ObservationSet obs = load_observations(inf_obs);
                series = std::move(obs.series);
                grid = obs.grid;
            } else if (!inf_data.empty()) {
                Dataset d = detail::open_dataset(inf_data);
                series = d.split(inf_split);
                grid = d.grid();
                labelled = true;
            } else {
                throw UsageError("infer needs --data or --observations");
            }
            if (series.empty()) throw UsageError("no series to infer");
            detail::check_compatible(ck, series.front().y.dim(0), grid);
            EvalSettings s = EvalSettings::from(ck.config);
            if (seed) s.seed = *seed;
            SlOdeModel model = ck.instantiate();
            auto post = posterior_pass(model, ck.norm, series, grid, s, false);
            auto f = detail::open_out(inf_out);
            f << "series_id,label";
            for (std::size_t c = 0; c < ck.config.model.inputs.n_classes; ++c) f << ",p" << c;
            for (std::size_t j = 0; j < ck.config.model.inputs.n_continuous; ++j) f << ",u" << j + 1;
            f << "\n";
            for (const auto& p : post) {
                f << p.series_id << "," << p.label;
                for (double v : p.probs) f << "," << format_real(v);
                for (double v : p.continuous) f << "," << format_real(v);
                f << "\n";
            }
            detail::finish(f, inf_out);
            out << "inferred inputs for " << post.size() << " series";
            if (labelled) out << "; accuracy " << format_real(input_scores(post, series).first);
            out << "\n";
            return kOk;
        }

        if (*gnr) {
            const auto [u1, u2] = parse_input_pair(gnr_u);
            Checkpoint ck = load_checkpoint(gnr_model);
            const std::size_t n = gnr_samples.value_or(ck.config.n_prior);
            if (n < 1) throw UsageError("--samples must be at least 1");
            SlOdeModel model = ck.instantiate();
            SystemInput u;
            u.continuous = Array::matrix({{u1, u2}});
            u.labels = {label_from_signs(u1, u2)};
            auto rng = derive_stream(seed.value_or(ck.config.seed), StreamTag::prior);
            const TimeGrid grid = ck.grid();
            GeneratedSummary g = prior_generate(model, ck.norm, u, n, grid, ck.config.solver, rng);
            auto f = detail::open_out(gnr_out);
            f << "time,channel,median,lower,upper\n";
            for (std::size_t k = 0; k < g.median.dim(0); ++k)
                for (std::size_t t = 0; t < grid.size(); ++t) {
                    f << format_real(grid[t]) << "," << k + 1 << "," << format_real(g.median.at(k, t)) << ","
                      << format_real(g.lower.at(k, t)) << "," << format_real(g.upper.at(k, t)) << "\n";
                }
            detail::finish(f, gnr_out);
            out << "generated " << n << " trajectories for u = (" << format_real(u1) << ", " << format_real(u2)
                << "), class " << u.labels[0] << "\n";
            return kOk;
        }
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ArgumentError& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return kIo;
    } catch (const ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kIo;
    } catch (const CheckpointError& e) {
        err << "error: " << e.what() << "\n";
        return kIo;
    } catch (const TrainingAborted& e) {
        err << "error: " << e.what() << "\n";
        return kAborted;
    } catch (const IncompatibleError& e) {
        err << "error: " << e.what() << "\n";
        return kIncompatible;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kUsage;
}

} // namespace slode::cli
