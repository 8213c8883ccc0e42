#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "autodiff.hpp"

namespace slode {

/// Named trainable leaves plus their Adam moment estimates.
class ParameterSet {
public:
    struct Entry {
        Var param;
        Array first_moment;
        Array second_moment;
        std::int64_t step = 0;
    };

    Var add(const std::string& name, Array init) {
        if (entries_.count(name)) throw ArgumentError("ParameterSet: duplicate parameter '" + name + "'");
        Entry e{Var::leaf(init), Array(init.shape()), Array(init.shape()), 0};
        auto [it, ok] = entries_.emplace(name, std::move(e));
        return it->second.param;
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const Var& get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ArgumentError("ParameterSet: unknown parameter '" + name + "'");
        return it->second.param;
    }
    Var& get(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ArgumentError("ParameterSet: unknown parameter '" + name + "'");
        return it->second.param;
    }

    const Entry& entry(const std::string& name) const { return entries_.at(name); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [n, e] : entries_) out.push_back(n);
        return out;
    }

    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [name, e] : entries_) n += e.param.size();
        return n;
    }

    void zero_grad() {
        for (auto& [n, e] : entries_) e.param.zero_grad();
    }

    /// Replaces a parameter value, keeping the shape contract.
    void assign(const std::string& name, const Array& value) {
        Var& p = get(name);
        if (p.shape() != value.shape()) {
            throw DimensionError("ParameterSet::assign '" + name + "': " + shape_str(value.shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        p.mutable_value() = value;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::map<std::string, Entry> entries_;
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double epsilon = 1e-8;
};

struct AdamStepReport {
    std::vector<std::string> skipped; ///< parameters whose gradient held a non-finite entry
};

/// One bias-corrected Adam update of every parameter, then gradients are zeroed.
inline AdamStepReport adam_step(ParameterSet& params, double lr, const AdamConfig& cfg = {}) {
    if (!(lr > 0.0)) throw ArgumentError("adam_step: learning rate must be positive");
    AdamStepReport report;
    for (auto& [name, e] : params) {
        const Array& g = e.param.grad();
        if (!g.all_finite()) {
            report.skipped.push_back(name);
            std::clog << "warning: adam_step skipped '" << name << "' (non-finite gradient)\n";
            continue;
        }
        e.step += 1;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
        Array& w = e.param.mutable_value();
        for (std::size_t i = 0; i < w.size(); ++i) {
            e.first_moment[i] = cfg.beta1 * e.first_moment[i] + (1.0 - cfg.beta1) * g[i];
            e.second_moment[i] = cfg.beta2 * e.second_moment[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double m_hat = e.first_moment[i] / bc1;
            const double v_hat = e.second_moment[i] / bc2;
            w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
        }
    }
    params.zero_grad();
    return report;
}

/// Rescales all gradients so their joint L2 norm is at most max_norm. Returns the norm before clipping.
inline double clip_grad_norm(ParameterSet& params, double max_norm) {
    double sq = 0.0;
    for (auto& [name, e] : params) {
        for (double g : e.param.grad().data()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && std::isfinite(norm) && norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& [name, e] : params) {
            for (double& g : e.param.mutable_grad().data()) g *= f;
        }
    }
    return norm;
}

/// Uniform Glorot initialization in [-a, a], a = sqrt(6 / (fan_in + fan_out)).
inline Array glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    Array out(std::move(shape));
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    for (auto& v : out.data()) v = dist(rng);
    return out;
}

} // namespace slode
