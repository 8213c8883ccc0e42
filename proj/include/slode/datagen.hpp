#pragma once

// Surrogate dataset: a damped, driven oscillator whose two static inputs set the forcing
// (u1) and the stiffness (u2). Signs of (u1, u2) define four classes.
//
//   dx1/dt = x2
//   dx2/dt = -omega^2 (1 + 0.5 u2) x1 - gamma x2 + A u1,   x(0) = (1, 0)
//
// Observed channels are (x1, x2, x1 * x2) plus i.i.d. noise.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "model.hpp"
#include "odeint.hpp"
#include "random.hpp"
#include "textio.hpp"

namespace slode {

enum class NoiseKind { gaussian, asymmetric };

inline std::string to_string(NoiseKind k) { return k == NoiseKind::gaussian ? "gaussian" : "asymmetric"; }

inline NoiseKind noise_kind_from_string(const std::string& s) {
    if (s == "gaussian") return NoiseKind::gaussian;
    if (s == "asymmetric") return NoiseKind::asymmetric;
    throw ArgumentError("unknown noise kind '" + s + "'");
}

/// Skew of the asymmetric observation noise; its location 0 is the 0.8 quantile.
inline constexpr double kAsymmetricNoiseTau = 0.8;
inline constexpr std::size_t kSurrogateChannels = 3;
inline constexpr std::size_t kSurrogateClasses = 4;

struct GeneratorConfig {
    std::size_t n_series = 1000;
    double t_max = 10.0;
    std::size_t n_times = 50;
    NoiseKind noise_kind = NoiseKind::gaussian;
    double noise_scale = 0.05;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_series < 1) throw ArgumentError("GeneratorConfig: n_series must be at least 1");
        if (n_times < 2) throw ArgumentError("GeneratorConfig: n_times must be at least 2");
        if (!(noise_scale >= 0.0) || !std::isfinite(noise_scale)) {
            throw ArgumentError("GeneratorConfig: noise_scale must be a finite non-negative number");
        }
        if (!(t_max > 0.0) || !std::isfinite(t_max)) throw ArgumentError("GeneratorConfig: t_max must be positive");
    }

    TimeGrid grid() const { return TimeGrid::uniform(0.0, t_max, n_times); }
};

struct LabeledSeries {
    int series_id = 0;
    double u1 = 0.0;
    double u2 = 0.0;
    int label = 0;
    Array y = Array(Shape{kSurrogateChannels, 0}); ///< [K x T], raw units
};

struct SampledInput {
    double u1 = 0.0;
    double u2 = 0.0;
    int label = 0;
};

/// 2 * [u1 < 0] + [u2 < 0]
inline int label_from_signs(double u1, double u2) { return 2 * (u1 < 0.0 ? 1 : 0) + (u2 < 0.0 ? 1 : 0); }

/// Independent signs (+/- equiprobable) and magnitudes uniform on [0.2, 1.0].
inline SampledInput sample_inputs(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> mag(0.2, 1.0);
    std::bernoulli_distribution neg(0.5);
    SampledInput s;
    s.u1 = mag(rng) * (neg(rng) ? -1.0 : 1.0);
    s.u2 = mag(rng) * (neg(rng) ? -1.0 : 1.0);
    s.label = label_from_signs(s.u1, s.u2);
    return s;
}

/// Extension point for the ground-truth system. Another mechanistic model can be dropped in
/// by implementing these two functions; nothing downstream depends on the oscillator.
class GroundTruthSystem {
public:
    virtual ~GroundTruthSystem() = default;
    /// Hidden state trajectory [D_true x T] for inputs u on the grid.
    virtual Array simulate(double u1, double u2, const TimeGrid& grid) const = 0;
    /// Noise-free observation channels [K x T] from a state trajectory.
    virtual Array channels(const Array& states) const = 0;
};

struct OscillatorParams {
    double omega = 2.0;
    double gamma = 0.3;
    double amplitude = 1.5;
    std::size_t substeps = 40;
};

class Oscillator final : public GroundTruthSystem {
public:
    explicit Oscillator(OscillatorParams p = {}) : p_(p) {}

    VectorField field(double u1, double u2) const {
        const double k = p_.omega * p_.omega * (1.0 + 0.5 * u2), g = p_.gamma, f = p_.amplitude * u1;
        // state rows are [x1, x2]; dx = x M + c with M = [[0, -k], [1, -g]]
        Array m = Array::matrix({{0.0, -k}, {1.0, -g}});
        Array c = Array::matrix({{0.0, f}});
        return [m, c](const Var& x, double) { return add(matmul(x, Var::constant(m)), Var::constant(c)); };
    }

    Array simulate(double u1, double u2, const TimeGrid& grid) const override {
        NoGradGuard ng;
        SolverConfig cfg;
        cfg.method = SolverMethod::rk4;
        cfg.substeps_per_interval = p_.substeps;
        cfg.max_steps = std::max<std::size_t>(cfg.max_steps, (grid.size() - 1) * p_.substeps);
        auto traj = ode_solve(field(u1, u2), Var(Array::matrix({{1.0, 0.0}})), grid, cfg);
        return traj.matrix();
    }

    Array channels(const Array& x) const override {
        const std::size_t t = x.dim(1);
        Array y(Shape{kSurrogateChannels, t});
        for (std::size_t j = 0; j < t; ++j) {
            y.at(0, j) = x.at(0, j);
            y.at(1, j) = x.at(1, j);
            y.at(2, j) = x.at(0, j) * x.at(1, j);
        }
        return y;
    }

    const OscillatorParams& params() const { return p_; }

private:
    OscillatorParams p_;
};

/// States [2 x T] of the default oscillator.
inline Array simulate_truth(double u1, double u2, const TimeGrid& grid) { return Oscillator().simulate(u1, u2, grid); }

/// Draw from ALD(0, sigma, tau) by inverting its CDF.
inline double sample_ald(double sigma, double tau, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    double p = ud(rng);
    while (p <= 0.0) p = ud(rng);
    if (p <= tau) return sigma / (1.0 - tau) * std::log(p / tau);
    return -sigma / tau * std::log((1.0 - p) / (1.0 - tau));
}

/// Adds i.i.d. observation noise to noise-free channels.
inline Array add_noise(const Array& clean, NoiseKind kind, double noise_scale, std::mt19937_64& rng) {
    Array y = clean;
    if (noise_scale == 0.0) return y;
    if (kind == NoiseKind::gaussian) {
        std::normal_distribution<double> nd(0.0, noise_scale);
        for (auto& v : y.data()) v += nd(rng);
    } else {
        for (auto& v : y.data()) v += sample_ald(noise_scale, kAsymmetricNoiseTau, rng);
    }
    return y;
}

/// Noisy channels [3 x T] from oscillator states [2 x T].
inline Array observe(const Array& states, NoiseKind kind, double noise_scale, std::mt19937_64& rng) {
    return add_noise(Oscillator().channels(states), kind, noise_scale, rng);
}

/// One series from its own stream: inputs first, then noise.
inline LabeledSeries generate_series(const GeneratorConfig& cfg, int series_id, const GroundTruthSystem& system) {
    auto rng = derive_stream(cfg.seed, StreamTag::series, static_cast<std::uint64_t>(series_id));
    const SampledInput in = sample_inputs(rng);
    LabeledSeries s;
    s.series_id = series_id;
    s.u1 = in.u1;
    s.u2 = in.u2;
    s.label = in.label;
    Array clean = system.channels(system.simulate(in.u1, in.u2, cfg.grid()));
    s.y = add_noise(clean, cfg.noise_kind, cfg.noise_scale, rng);
    return s;
}

inline std::vector<LabeledSeries> generate_series(const GeneratorConfig& cfg, const GroundTruthSystem& system) {
    cfg.validate();
    std::vector<LabeledSeries> out;
    out.reserve(cfg.n_series);
    for (std::size_t i = 0; i < cfg.n_series; ++i) out.push_back(generate_series(cfg, static_cast<int>(i), system));
    return out;
}

// ---------------------------------------------------------------------------------------------
// Normalization

/// Per-channel affine map normalized = (raw - shift) / scale.
struct Normalization {
    std::vector<double> shift;
    std::vector<double> scale;

    std::size_t channels() const { return shift.size(); }

    double apply(std::size_t k, double raw) const { return (raw - shift[k]) / scale[k]; }
    double invert(std::size_t k, double norm) const { return norm * scale[k] + shift[k]; }

    /// [K x T] or [B x K x T]
    Array apply(const Array& raw) const { return map(raw, false); }
    Array invert(const Array& norm) const { return map(norm, true); }

    friend bool operator==(const Normalization&, const Normalization&) = default;

private:
    Array map(const Array& a, bool inverse) const {
        const std::size_t k = channels();
        const std::size_t ch_axis = a.rank() - 2;
        if (a.rank() < 2 || a.dim(ch_axis) != k) {
            throw DimensionError("Normalization: expected " + std::to_string(k) + " channels, got " +
                                 shape_str(a.shape()));
        }
        const std::size_t t = a.dim(a.rank() - 1);
        Array out = a;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::size_t c = (i / t) % k;
            out[i] = inverse ? invert(c, a[i]) : apply(c, a[i]);
        }
        return out;
    }
};

/// Sends each channel's training min to 0.05 and max to 0.95. A constant channel gets
/// scale 1 and is centred on 0.5.
inline Normalization normalize_fit(const std::vector<LabeledSeries>& train) {
    if (train.empty()) throw ArgumentError("normalize_fit: empty training split");
    const std::size_t k = train.front().y.dim(0);
    std::vector<double> lo(k, INFINITY), hi(k, -INFINITY);
    for (const auto& s : train) {
        if (s.y.dim(0) != k) throw DimensionError("normalize_fit: inconsistent channel counts");
        const std::size_t t = s.y.dim(1);
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t j = 0; j < t; ++j) {
                lo[c] = std::min(lo[c], s.y.at(c, j));
                hi[c] = std::max(hi[c], s.y.at(c, j));
            }
    }
    Normalization n{std::vector<double>(k), std::vector<double>(k)};
    for (std::size_t c = 0; c < k; ++c) {
        if (hi[c] > lo[c]) {
            n.scale[c] = (hi[c] - lo[c]) / 0.9;
            n.shift[c] = lo[c] - 0.05 * n.scale[c];
        } else {
            n.scale[c] = 1.0;
            n.shift[c] = lo[c] - 0.5;
        }
    }
    return n;
}

// ---------------------------------------------------------------------------------------------
// Splits

struct Splits {
    std::vector<LabeledSeries> train;
    std::vector<LabeledSeries> val;
    std::vector<LabeledSeries> test;
};

inline std::array<double, kSurrogateClasses> class_fractions(const std::vector<LabeledSeries>& s) {
    std::array<double, kSurrogateClasses> f{};
    for (const auto& x : s) f[static_cast<std::size_t>(x.label)] += 1.0;
    for (auto& v : f) v /= std::max<double>(1.0, static_cast<double>(s.size()));
    return f;
}

/// Shuffles and cuts contiguous train/val/test blocks. Reshuffles (up to 100 attempts) until
/// each block's class proportions are within 0.05 of the overall ones; otherwise keeps the
/// attempt with the smallest deviation.
inline Splits split(const std::vector<LabeledSeries>& series, std::array<double, 3> fractions, std::mt19937_64& rng) {
    if (series.size() < 10) throw ArgumentError("split: need at least 10 series, got " + std::to_string(series.size()));
    const double total = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(total - 1.0) > 1e-9 || fractions[0] < 0 || fractions[1] < 0 || fractions[2] < 0) {
        throw ArgumentError("split: fractions must be non-negative and sum to 1");
    }
    const std::size_t n = series.size();
    const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
    const auto overall = class_fractions(series);

    std::vector<std::size_t> order(n);
    Splits best;
    double best_dev = INFINITY;
    for (int attempt = 0; attempt < 100; ++attempt) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        Splits s;
        for (std::size_t i = 0; i < n; ++i) {
            auto& dst = i < n_train ? s.train : i < n_train + n_val ? s.val : s.test;
            dst.push_back(series[order[i]]);
        }
        double dev = 0.0;
        for (const auto* part : {&s.train, &s.val, &s.test}) {
            if (part->empty()) continue;
            const auto f = class_fractions(*part);
            for (std::size_t c = 0; c < kSurrogateClasses; ++c) dev = std::max(dev, std::abs(f[c] - overall[c]));
        }
        if (dev < best_dev) {
            best_dev = dev;
            best = std::move(s);
        }
        if (best_dev <= 0.05) break;
    }
    return best;
}

// ---------------------------------------------------------------------------------------------
// Dataset and files

struct Dataset {
    GeneratorConfig config;
    Normalization norm;
    Splits splits;

    TimeGrid grid() const { return config.grid(); }

    const std::vector<LabeledSeries>& split(const std::string& name) const {
        if (name == "train") return splits.train;
        if (name == "val") return splits.val;
        if (name == "test") return splits.test;
        throw ArgumentError("unknown split '" + name + "' (expected train, val, or test)");
    }
};

inline Dataset make_dataset(const GeneratorConfig& cfg, const GroundTruthSystem& system = Oscillator()) {
    Dataset d;
    d.config = cfg;
    auto all = generate_series(cfg, system);
    auto rng = derive_stream(cfg.seed, StreamTag::split);
    d.splits = split(all, {0.8, 0.1, 0.1}, rng);
    d.norm = normalize_fit(d.splits.train);
    return d;
}

inline constexpr int kDataFormatVersion = 1;
inline const char* const kObservationsHeader = "series_id,t,y1,y2,y3";
inline const char* const kInputsHeader = "series_id,u1,u2,label";

namespace detail {

inline std::string manifest_text(const Dataset& d) {
    std::ostringstream os;
    os << "format_version=" << kDataFormatVersion << '\n'
       << "n_series=" << d.config.n_series << '\n'
       << "n_times=" << d.config.n_times << '\n'
       << "t_max=" << format_real(d.config.t_max) << '\n'
       << "noise_kind=" << to_string(d.config.noise_kind) << '\n'
       << "noise_scale=" << format_real(d.config.noise_scale) << '\n'
       << "seed=" << d.config.seed << '\n'
       << "normalization_shift=" << join_reals(d.norm.shift) << '\n'
       << "normalization_scale=" << join_reals(d.norm.scale) << '\n';
    return os.str();
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ParseError("cannot read '" + p.string() + "'", 0);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

inline std::map<std::string, std::string> parse_key_values(const std::vector<std::string>& lines,
                                                          const std::string& file) {
    std::map<std::string, std::string> kv;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const std::string l = trim(lines[i]);
        if (l.empty() || l[0] == '#') continue;
        const auto eq = l.find('=');
        if (eq == std::string::npos) throw ParseError(file + ":" + std::to_string(i + 1) + ": expected key=value", i + 1);
        kv[trim(l.substr(0, eq))] = trim(l.substr(eq + 1));
    }
    return kv;
}

inline const std::string& require_key(const std::map<std::string, std::string>& kv, const std::string& key,
                                      const std::string& file) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(file + ": missing key '" + key + "'", 0);
    return it->second;
}

} // namespace detail

inline void save_split(const std::vector<LabeledSeries>& series, const TimeGrid& grid, const std::filesystem::path& dir,
                       const std::string& name) {
    std::string obs = std::string(kObservationsHeader) + "\n";
    std::string inp = std::string(kInputsHeader) + "\n";
    for (const auto& s : series) {
        inp += std::to_string(s.series_id) + "," + format_real(s.u1) + "," + format_real(s.u2) + "," +
               std::to_string(s.label) + "\n";
        for (std::size_t j = 0; j < grid.size(); ++j) {
            obs += std::to_string(s.series_id) + "," + format_real(grid[j]);
            for (std::size_t c = 0; c < s.y.dim(0); ++c) obs += "," + format_real(s.y.at(c, j));
            obs += "\n";
        }
    }
    write_text_file((dir / (name + "_observations.csv")).string(), obs);
    write_text_file((dir / (name + "_inputs.csv")).string(), inp);
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
    const TimeGrid grid = d.grid();
    save_split(d.splits.train, grid, dir, "train");
    save_split(d.splits.val, grid, dir, "val");
    save_split(d.splits.test, grid, dir, "test");
    write_text_file((dir / "manifest.txt").string(), detail::manifest_text(d));
}

/// Reads one split's inputs and observations; every series must have a row at each grid time.
inline std::vector<LabeledSeries> load_split(const std::filesystem::path& dir, const std::string& name,
                                             const TimeGrid& grid) {
    const auto inp_path = dir / (name + "_inputs.csv");
    const auto obs_path = dir / (name + "_observations.csv");
    const std::string inp_file = inp_path.string(), obs_file = obs_path.string();
    if (!std::filesystem::exists(inp_path)) throw ParseError("missing inputs file '" + inp_file + "'", 0);
    if (!std::filesystem::exists(obs_path)) throw ParseError("missing observations file '" + obs_file + "'", 0);

    auto inp = detail::read_lines(inp_path);
    if (inp.empty() || inp[0] != kInputsHeader) {
        throw ParseError(inp_file + ":1: header mismatch, expected '" + std::string(kInputsHeader) + "'", 1);
    }
    std::vector<LabeledSeries> out;
    std::map<int, std::size_t> index;
    for (std::size_t i = 1; i < inp.size(); ++i) {
        if (inp[i].empty()) continue;
        const std::string where = inp_file + ":" + std::to_string(i + 1);
        auto f = split_fields(inp[i]);
        if (f.size() != 4) throw ParseError(where + ": expected 4 fields", i + 1);
        LabeledSeries s;
        s.series_id = static_cast<int>(parse_int(f[0], where, i + 1));
        s.u1 = parse_real(f[1], where, i + 1);
        s.u2 = parse_real(f[2], where, i + 1);
        s.label = static_cast<int>(parse_int(f[3], where, i + 1));
        if (s.label != label_from_signs(s.u1, s.u2)) {
            throw ParseError(where + ": label " + std::to_string(s.label) + " disagrees with the input signs", i + 1);
        }
        if (index.count(s.series_id)) throw ParseError(where + ": duplicate series_id", i + 1);
        s.y = Array(Shape{kSurrogateChannels, grid.size()}, std::nan(""));
        index[s.series_id] = out.size();
        out.push_back(std::move(s));
    }

    auto obs = detail::read_lines(obs_path);
    if (obs.empty() || obs[0] != kObservationsHeader) {
        throw ParseError(obs_file + ":1: header mismatch, expected '" + std::string(kObservationsHeader) + "'", 1);
    }
    std::vector<std::size_t> filled(out.size(), 0);
    for (std::size_t i = 1; i < obs.size(); ++i) {
        if (obs[i].empty()) continue;
        const std::string where = obs_file + ":" + std::to_string(i + 1);
        auto f = split_fields(obs[i]);
        if (f.size() != 2 + kSurrogateChannels) throw ParseError(where + ": expected 5 fields", i + 1);
        const int id = static_cast<int>(parse_int(f[0], where, i + 1));
        auto it = index.find(id);
        if (it == index.end()) throw ParseError(where + ": series " + std::to_string(id) + " has no inputs row", i + 1);
        auto& s = out[it->second];
        std::size_t& j = filled[it->second];
        const double t = parse_real(f[1], where, i + 1);
        if (j >= grid.size() || t != grid[j]) throw ParseError(where + ": time " + f[1] + " off the grid or out of order", i + 1);
        for (std::size_t c = 0; c < kSurrogateChannels; ++c) s.y.at(c, j) = parse_real(f[2 + c], where, i + 1);
        ++j;
    }
    for (std::size_t k = 0; k < out.size(); ++k) {
        if (filled[k] != grid.size()) {
            throw ParseError(obs_file + ": series " + std::to_string(out[k].series_id) + " has " +
                                 std::to_string(filled[k]) + " of " + std::to_string(grid.size()) + " time points",
                             0);
        }
    }
    return out;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto man_path = dir / "manifest.txt";
    const std::string man_file = man_path.string();
    if (!std::filesystem::exists(man_path)) throw ParseError("missing manifest '" + man_file + "'", 0);
    auto kv = detail::parse_key_values(detail::read_lines(man_path), man_file);
    auto key = [&](const std::string& k) { return detail::require_key(kv, k, man_file); };
    const long long version = parse_int(key("format_version"), man_file);
    if (version != kDataFormatVersion) {
        throw ParseError(man_file + ": unsupported format_version " + std::to_string(version), 0);
    }
    Dataset d;
    d.config.n_series = static_cast<std::size_t>(parse_int(key("n_series"), man_file));
    d.config.n_times = static_cast<std::size_t>(parse_int(key("n_times"), man_file));
    d.config.t_max = parse_real(key("t_max"), man_file);
    try {
        d.config.noise_kind = noise_kind_from_string(key("noise_kind"));
    } catch (const ArgumentError& e) {
        throw ParseError(man_file + ": " + e.what(), 0);
    }
    d.config.noise_scale = parse_real(key("noise_scale"), man_file);
    d.config.seed = static_cast<std::uint64_t>(parse_int(key("seed"), man_file));
    d.norm.shift = parse_real_list(key("normalization_shift"), man_file);
    d.norm.scale = parse_real_list(key("normalization_scale"), man_file);
    if (d.norm.shift.size() != kSurrogateChannels || d.norm.scale.size() != kSurrogateChannels) {
        throw ParseError(man_file + ": normalization needs " + std::to_string(kSurrogateChannels) + " values", 0);
    }
    try {
        d.config.validate();
    } catch (const ArgumentError& e) {
        throw ParseError(man_file + ": " + e.what(), 0);
    }
    const TimeGrid grid = d.grid();
    d.splits.train = load_split(dir, "train", grid);
    d.splits.val = load_split(dir, "val", grid);
    d.splits.test = load_split(dir, "test", grid);
    return d;
}

/// Series read from an observations file alone; inputs and labels unknown (label -1).
struct ObservationSet {
    std::vector<LabeledSeries> series;
    TimeGrid grid;
};

/// Reads an observations file. Every series must be observed at the same, ascending times.
inline ObservationSet load_observations(const std::filesystem::path& path) {
    const std::string file = path.string();
    if (!std::filesystem::exists(path)) throw ParseError("missing observations file '" + file + "'", 0);
    auto lines = detail::read_lines(path);
    if (lines.empty() || lines[0] != kObservationsHeader) {
        throw ParseError(file + ":1: header mismatch, expected '" + std::string(kObservationsHeader) + "'", 1);
    }
    std::vector<int> order;
    std::map<int, std::vector<double>> times;
    std::map<int, std::vector<std::array<double, kSurrogateChannels>>> values;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        const std::string where = file + ":" + std::to_string(i + 1);
        auto f = split_fields(lines[i]);
        if (f.size() != 2 + kSurrogateChannels) throw ParseError(where + ": expected 5 fields", i + 1);
        const int id = static_cast<int>(parse_int(f[0], where, i + 1));
        const double t = parse_real(f[1], where, i + 1);
        if (!times.count(id)) order.push_back(id);
        auto& ts = times[id];
        if (!ts.empty() && !(t > ts.back())) throw ParseError(where + ": times must ascend within a series", i + 1);
        ts.push_back(t);
        std::array<double, kSurrogateChannels> v{};
        for (std::size_t c = 0; c < kSurrogateChannels; ++c) v[c] = parse_real(f[2 + c], where, i + 1);
        values[id].push_back(v);
    }
    if (order.empty()) throw ParseError(file + ": no observations", 0);
    const auto& ref = times[order.front()];
    ObservationSet out;
    try {
        out.grid = TimeGrid(ref);
    } catch (const ArgumentError& e) {
        throw ParseError(file + ": " + e.what(), 0);
    }
    for (int id : order) {
        if (times[id] != ref) {
            throw ParseError(file + ": series " + std::to_string(id) + " is not on the same time grid as series " +
                                 std::to_string(order.front()),
                             0);
        }
        LabeledSeries s;
        s.series_id = id;
        s.label = -1;
        s.y = Array(Shape{kSurrogateChannels, ref.size()});
        for (std::size_t j = 0; j < ref.size(); ++j)
            for (std::size_t c = 0; c < kSurrogateChannels; ++c) s.y.at(c, j) = values[id][j][c];
        out.series.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Model-facing batches

/// Normalized observations [B x K x T] and system inputs for the given series.
struct SeriesBatch {
    Array y;
    SystemInput u;
    std::vector<int> series_ids;
};

inline SeriesBatch make_batch(const std::vector<const LabeledSeries*>& series, const Normalization& norm) {
    SeriesBatch b;
    const std::size_t n = series.size();
    const std::size_t k = series.front()->y.dim(0), t = series.front()->y.dim(1);
    b.y = Array(Shape{n, k, t});
    b.u.continuous = Array(Shape{n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        const auto& s = *series[i];
        Array yn = norm.apply(s.y);
        std::copy(yn.data().begin(), yn.data().end(), b.y.data().begin() + static_cast<std::ptrdiff_t>(i * k * t));
        b.u.continuous.at(i, 0) = s.u1;
        b.u.continuous.at(i, 1) = s.u2;
        b.u.labels.push_back(s.label);
        b.series_ids.push_back(s.series_id);
    }
    return b;
}

inline SeriesBatch make_batch(const std::vector<LabeledSeries>& series, const Normalization& norm) {
    std::vector<const LabeledSeries*> ptrs;
    for (const auto& s : series) ptrs.push_back(&s);
    return make_batch(ptrs, norm);
}

} // namespace slode
