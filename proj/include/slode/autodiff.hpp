#pragma once

// Define-by-run reverse-mode differentiation over dense double arrays.
//
// Every operation eagerly computes its value. When gradient recording is enabled and at
// least one operand requires a gradient, the result remembers its operands and a closure
// that pushes the upstream gradient back to them. backward() walks the recorded graph in
// reverse topological order.
//
// Gradient semantics: leaf variables (parameters) accumulate across backward() calls until
// the caller zeroes them. Intermediate gradients are transient and released as soon as they
// have been propagated.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "array.hpp"
#include "errors.hpp"

namespace slode {

namespace detail {

struct Node {
    Array value;
    Array grad;
    bool grad_ready = false;
    bool requires_grad = false;
    bool is_leaf = true;
    std::uint64_t visit_mark = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Node() = default;
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;

    // Long solver chains would otherwise overflow the stack through recursive shared_ptr release.
    ~Node() {
        if (parents.empty()) return;
        std::vector<std::shared_ptr<Node>> pending = std::move(parents);
        while (!pending.empty()) {
            std::shared_ptr<Node> p = std::move(pending.back());
            pending.pop_back();
            if (p.use_count() == 1) {
                for (auto& q : p->parents) pending.push_back(std::move(q));
                p->parents.clear();
            }
        }
    }

    Array& ensure_grad() {
        if (!grad_ready) {
            grad = Array(value.shape(), 0.0);
            grad_ready = true;
        }
        return grad;
    }

    void release_grad() {
        grad = Array();
        grad_ready = false;
    }
};

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline std::uint64_t next_visit_mark() {
    thread_local std::uint64_t mark = 0;
    return ++mark;
}

} // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Handle to a graph node. Copies share the node.
class Var {
public:
    Var() : node_(std::make_shared<detail::Node>()) {}

    explicit Var(Array value, bool requires_grad = false) : node_(std::make_shared<detail::Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    static Var constant(Array value) { return Var(std::move(value), false); }
    static Var leaf(Array value) { return Var(std::move(value), true); }

    const Array& value() const noexcept { return node_->value; }
    /// Direct write access; only meaningful for leaves (optimizer updates, perturbation checks).
    Array& mutable_value() noexcept { return node_->value; }

    const Array& grad() const { return node_->ensure_grad(); }
    Array& mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->release_grad(); }

    bool requires_grad() const noexcept { return node_->requires_grad; }
    const Shape& shape() const noexcept { return node_->value.shape(); }
    std::size_t size() const noexcept { return node_->value.size(); }
    std::size_t rank() const noexcept { return node_->value.rank(); }
    std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
    double item() const { return node_->value.item(); }
    double operator[](std::size_t i) const { return node_->value[i]; }

    const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

using BackwardFn = std::function<void(Node&)>;

inline Var make_op(Array value, std::initializer_list<Var> parents, BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool need = false;
    if (grad_enabled_flag()) {
        for (const auto& p : parents) need = need || p.requires_grad();
    }
    if (need) {
        node->requires_grad = true;
        node->is_leaf = false;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(fn);
    }
    return Var(std::move(node));
}

inline Var make_op(Array value, const std::vector<Var>& parents, BackwardFn fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool need = false;
    if (grad_enabled_flag()) {
        for (const auto& p : parents) need = need || p.requires_grad();
    }
    if (need) {
        node->requires_grad = true;
        node->is_leaf = false;
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(fn);
    }
    return Var(std::move(node));
}

// Returns the parent's gradient buffer, or nullptr if it does not take gradients.
inline Array* parent_grad(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    return p.requires_grad ? &p.ensure_grad() : nullptr;
}

inline const Array& parent_value(const Node& self, std::size_t i) { return self.parents[i]->value; }

/// Index mapping for trailing-dimension (numpy-style) broadcasting of two operands.
struct BroadcastPlan {
    enum class Mode { same, scalar_a, scalar_b, tile_a, tile_b, general };
    Mode mode = Mode::same;
    Shape out;
    std::size_t na = 0, nb = 0, n = 0;
    std::vector<std::size_t> stride_a, stride_b;

    BroadcastPlan(const Shape& a, const Shape& b) {
        na = shape_size(a);
        nb = shape_size(b);
        const std::size_t r = std::max(a.size(), b.size());
        out.assign(r, 1);
        Shape pa(r, 1), pb(r, 1);
        std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
        std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
        for (std::size_t d = 0; d < r; ++d) {
            if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
                throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
            }
            out[d] = std::max(pa[d], pb[d]);
        }
        n = shape_size(out);
        if (a == b) {
            mode = Mode::same;
        } else if (na == 1) {
            mode = Mode::scalar_a;
        } else if (nb == 1) {
            mode = Mode::scalar_b;
        } else if (pa == out && is_trailing_tile(pb, out)) {
            mode = Mode::tile_b;
        } else if (pb == out && is_trailing_tile(pa, out)) {
            mode = Mode::tile_a;
        } else {
            mode = Mode::general;
            stride_a = strides_for(pa);
            stride_b = strides_for(pb);
        }
    }

    // Operand (left-padded) is a run of 1s followed by the trailing dims of out.
    static bool is_trailing_tile(const Shape& p, const Shape& out) {
        std::size_t d = 0;
        while (d < p.size() && p[d] == 1) ++d;
        for (std::size_t k = d; k < p.size(); ++k) {
            if (p[k] != out[k]) return false;
        }
        return true;
    }

    std::vector<std::size_t> strides_for(const Shape& p) const {
        std::vector<std::size_t> s(p.size(), 0);
        std::size_t acc = 1;
        for (std::size_t d = p.size(); d-- > 0;) {
            s[d] = p[d] == 1 ? 0 : acc;
            acc *= p[d];
        }
        return s;
    }

    /// Calls f(i, ia, ib) for every output element.
    template <class F>
    void for_each(F&& f) const {
        switch (mode) {
        case Mode::same:
            for (std::size_t i = 0; i < n; ++i) f(i, i, i);
            break;
        case Mode::scalar_a:
            for (std::size_t i = 0; i < n; ++i) f(i, std::size_t{0}, nb == 1 ? 0 : i);
            break;
        case Mode::scalar_b:
            for (std::size_t i = 0; i < n; ++i) f(i, na == 1 ? 0 : i, std::size_t{0});
            break;
        case Mode::tile_a:
            for (std::size_t i = 0; i < n; ++i) f(i, i % na, i);
            break;
        case Mode::tile_b:
            for (std::size_t i = 0; i < n; ++i) f(i, i, i % nb);
            break;
        case Mode::general: {
            const std::size_t r = out.size();
            std::vector<std::size_t> idx(r, 0);
            std::size_t ia = 0, ib = 0;
            for (std::size_t i = 0; i < n; ++i) {
                f(i, ia, ib);
                for (std::size_t d = r; d-- > 0;) {
                    ++idx[d];
                    ia += stride_a[d];
                    ib += stride_b[d];
                    if (idx[d] < out[d]) break;
                    ia -= stride_a[d] * idx[d];
                    ib -= stride_b[d] * idx[d];
                    idx[d] = 0;
                }
            }
            break;
        }
        }
    }
};

template <class Fwd, class DA, class DB>
Var binary_op(const Var& a, const Var& b, Fwd fwd, DA da, DB db) {
    BroadcastPlan plan(a.shape(), b.shape());
    Array out(plan.out);
    const Array& av = a.value();
    const Array& bv = b.value();
    plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
    return make_op(std::move(out), {a, b}, [plan = std::move(plan), da, db](Node& self) {
        const Array& g = self.grad;
        const Array& av = parent_value(self, 0);
        const Array& bv = parent_value(self, 1);
        Array* ga = parent_grad(self, 0);
        Array* gb = parent_grad(self, 1);
        if (ga) {
            plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
                (*ga)[ia] += g[i] * da(av[ia], bv[ib]);
            });
        }
        if (gb) {
            plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) {
                (*gb)[ib] += g[i] * db(av[ia], bv[ib]);
            });
        }
    });
}

// Unary op whose derivative is expressed through the input x and output y.
template <class Fwd, class Deriv>
Var unary_op(const Var& a, Fwd fwd, Deriv deriv) {
    const Array& av = a.value();
    Array out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return make_op(std::move(out), {a}, [deriv](Node& self) {
        Array* ga = parent_grad(self, 0);
        if (!ga) return;
        const Array& x = parent_value(self, 0);
        const Array& y = self.value;
        const Array& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * deriv(x[i], y[i]);
    });
}

} // namespace detail

// ---------------------------------------------------------------------------------------------
// Elementwise arithmetic (broadcasting)

inline Var add(const Var& a, const Var& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary_op(
        a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
    for (double v : b.value().data()) {
        if (v == 0.0) throw DomainError("div: zero divisor");
    }
    return detail::binary_op(
        a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Var scale(const Var& a, double c) {
    return detail::unary_op(
        a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var shift(const Var& a, double c) {
    return detail::unary_op(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return shift(a, c); }
inline Var operator+(double c, const Var& a) { return shift(a, c); }
inline Var operator-(const Var& a, double c) { return shift(a, -c); }
inline Var operator-(double c, const Var& a) { return shift(neg(a), c); }

// ---------------------------------------------------------------------------------------------
// Elementwise nonlinearities

inline Var relu(const Var& a) {
    return detail::unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline Var sigmoid(const Var& a) {
    return detail::unary_op(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(const Var& a) {
    return detail::unary_op(a, softplus_value, [](double x, double) { return sigmoid_value(x); });
}

inline Var exp(const Var& a) {
    return detail::unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
    for (double v : a.value().data()) {
        if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
    }
    return detail::unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
    return detail::unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Quantile check function r*(tau - 1[r <= 0]); derivative at r = 0 takes the r > 0 branch.
inline Var pinball(const Var& r, double tau) {
    return detail::unary_op(
        r, [tau](double x) { return x * (tau - (x <= 0.0 ? 1.0 : 0.0)); },
        [tau](double x, double) { return x < 0.0 ? tau - 1.0 : tau; });
}

/// Value copy with no recorded history.
inline Var detach(const Var& a) { return Var::constant(a.value()); }

/// sum_k coeffs[k] * terms[k] for same-shaped terms, recorded as a single node.
inline Var lincomb(const std::vector<Var>& terms, const std::vector<double>& coeffs) {
    if (terms.empty() || terms.size() != coeffs.size()) throw ArgumentError("lincomb: terms/coeffs mismatch");
    Array out(terms[0].shape());
    for (std::size_t k = 0; k < terms.size(); ++k) {
        if (terms[k].shape() != out.shape()) {
            throw DimensionError("lincomb: " + shape_str(terms[k].shape()) + " vs " + shape_str(out.shape()));
        }
        const double c = coeffs[k];
        if (c == 0.0) continue;
        const Array& v = terms[k].value();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * v[i];
    }
    return detail::make_op(std::move(out), terms, [coeffs](detail::Node& self) {
        for (std::size_t k = 0; k < coeffs.size(); ++k) {
            if (coeffs[k] == 0.0) continue;
            if (Array* gk = detail::parent_grad(self, k)) {
                for (std::size_t i = 0; i < gk->size(); ++i) (*gk)[i] += coeffs[k] * self.grad[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return detail::make_op(Array::scalar(s), {a}, [](detail::Node& self) {
        Array* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        const double g = self.grad[0];
        for (auto& v : ga->data()) v += g;
    });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Sums over every axis except the first: [B x ...] -> [B].
inline Var sum_rows(const Var& a) {
    if (a.rank() == 0) throw DimensionError("sum_rows on a scalar");
    const std::size_t rows = a.dim(0);
    const std::size_t cols = a.size() / std::max<std::size_t>(rows, 1);
    Array out(Shape{rows});
    const Array& av = a.value();
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += av[i * cols + j];
        out[i] = s;
    }
    return detail::make_op(std::move(out), {a}, [rows, cols](detail::Node& self) {
        Array* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) (*ga)[i * cols + j] += self.grad[i];
    });
}

/// Sums out one axis.
inline Var sum_axis(const Var& a, std::size_t axis) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw DimensionError("sum_axis: axis out of range for " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t len = s[axis];
    Shape os = s;
    os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    Array out(os);
    const Array& av = a.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < len; ++k)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * len + k) * inner + i];
    return detail::make_op(std::move(out), {a}, [outer, inner, len](detail::Node& self) {
        Array* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < len; ++k)
                for (std::size_t i = 0; i < inner; ++i)
                    (*ga)[(o * len + k) * inner + i] += self.grad[o * inner + i];
    });
}

/// log(sum(exp(.))) along an axis of a matrix, max-shifted. axis 0: [R x C] -> [C]; axis 1 -> [R].
inline Var logsumexp(const Var& a, std::size_t axis) {
    if (a.rank() != 2 || axis > 1) throw DimensionError("logsumexp expects a matrix, got " + shape_str(a.shape()));
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    const std::size_t n_out = axis == 0 ? cols : rows;
    const std::size_t len = axis == 0 ? rows : cols;
    auto idx = [=](std::size_t o, std::size_t k) { return axis == 0 ? k * cols + o : o * cols + k; };
    const Array& av = a.value();
    Array out(Shape{n_out});
    for (std::size_t o = 0; o < n_out; ++o) {
        double mx = -INFINITY;
        for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, av[idx(o, k)]);
        if (!std::isfinite(mx)) {
            out[o] = mx;
            continue;
        }
        double s = 0.0;
        for (std::size_t k = 0; k < len; ++k) s += std::exp(av[idx(o, k)] - mx);
        out[o] = mx + std::log(s);
    }
    return detail::make_op(std::move(out), {a}, [idx, n_out, len](detail::Node& self) {
        Array* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        const Array& x = detail::parent_value(self, 0);
        for (std::size_t o = 0; o < n_out; ++o) {
            const double y = self.value[o];
            if (!std::isfinite(y)) continue;
            for (std::size_t k = 0; k < len; ++k) (*ga)[idx(o, k)] += self.grad[o] * std::exp(x[idx(o, k)] - y);
        }
    });
}

/// Row-wise log of the normalized exponential for a [B x C] matrix.
inline Var log_softmax(const Var& a) {
    if (a.rank() != 2) throw DimensionError("log_softmax expects a matrix, got " + shape_str(a.shape()));
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    const Array& av = a.value();
    Array out(a.shape());
    for (std::size_t i = 0; i < rows; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, av.at(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += std::exp(av.at(i, j) - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = av.at(i, j) - lse;
    }
    return detail::make_op(std::move(out), {a}, [rows, cols](detail::Node& self) {
        Array* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < rows; ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < cols; ++j) gs += self.grad.at(i, j);
            for (std::size_t j = 0; j < cols; ++j)
                ga->at(i, j) += self.grad.at(i, j) - std::exp(self.value.at(i, j)) * gs;
        }
    });
}

// ---------------------------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& a, Shape shape) {
    Array out = a.value().reshaped(std::move(shape));
    return detail::make_op(std::move(out), {a}, [](detail::Node& self) {
        Array* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += self.grad[i];
    });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
    if (a.rank() != 2 || begin > end || end > a.dim(1)) {
        throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                             shape_str(a.shape()));
    }
    const std::size_t rows = a.dim(0), cols = a.dim(1), w = end - begin;
    Array out(Shape{rows, w});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < w; ++j) out.at(i, j) = a.value().at(i, begin + j);
    return detail::make_op(std::move(out), {a}, [rows, cols, w, begin](detail::Node& self) {
        Array* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < w; ++j) (*ga)[i * cols + begin + j] += self.grad.at(i, j);
    });
}

/// Rows [begin, end) of a matrix.
inline Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
    if (a.rank() != 2 || begin > end || end > a.dim(0)) {
        throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                             shape_str(a.shape()));
    }
    const std::size_t cols = a.dim(1);
    std::vector<double> v(a.value().data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                          a.value().data().begin() + static_cast<std::ptrdiff_t>(end * cols));
    Array out(Shape{end - begin, cols}, std::move(v));
    return detail::make_op(std::move(out), {a}, [begin, cols](detail::Node& self) {
        Array* ga = detail::parent_grad(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[begin * cols + i] += self.grad[i];
    });
}

/// Horizontal concatenation of matrices with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
    const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 0;
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) {
            throw DimensionError("concat_cols: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        }
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    Array out(Shape{rows, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Array& pv = parts[k].value();
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) out.at(i, off + j) = pv.at(i, j);
        off += widths[k];
    }
    return detail::make_op(std::move(out), parts, [rows, total, widths](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (Array* gk = detail::parent_grad(self, k)) {
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) gk->at(i, j) += self.grad[i * total + off + j];
            }
            off += widths[k];
        }
    });
}

/// Vertical concatenation of matrices with equal column counts.
inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
    const std::size_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
    std::vector<std::size_t> sizes;
    std::vector<double> v;
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols) {
            throw DimensionError("concat_rows: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
        }
        sizes.push_back(p.size());
        rows += p.dim(0);
        v.insert(v.end(), p.value().data().begin(), p.value().data().end());
    }
    Array out(Shape{rows, cols}, std::move(v));
    return detail::make_op(std::move(out), parts, [sizes](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < sizes.size(); ++k) {
            if (Array* gk = detail::parent_grad(self, k)) {
                for (std::size_t i = 0; i < sizes[k]; ++i) (*gk)[i] += self.grad[off + i];
            }
            off += sizes[k];
        }
    });
}

// ---------------------------------------------------------------------------------------------
// Linear algebra and signal ops

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

} // namespace detail

inline Var matmul(const Var& a, const Var& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Array out(Shape{m, n});
    detail::gemm_acc(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
    return detail::make_op(std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        const double* g = self.grad.data().data();
        const double* av = detail::parent_value(self, 0).data().data();
        const double* bv = detail::parent_value(self, 1).data().data();
        if (Array* ga = detail::parent_grad(self, 0)) {
            // ga[m x k] += g[m x n] * b^T
            double* gp = ga->data().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    const double* gi = g + i * n;
                    const double* bp = bv + p * n;
                    for (std::size_t j = 0; j < n; ++j) s += gi[j] * bp[j];
                    gp[i * k + p] += s;
                }
        }
        if (Array* gb = detail::parent_grad(self, 1)) {
            // gb[k x n] += a^T * g
            double* gp = gb->data().data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double aip = av[i * k + p];
                    const double* gi = g + i * n;
                    double* gbp = gp + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbp[j] += aip * gi[j];
                }
        }
    });
}

/// Valid (unpadded) 1-D cross-correlation.
/// input [C_in x T] or [B x C_in x T]; kernels [C_out x C_in x W]; bias [C_out] (optional).
/// Output length floor((T - W) / stride) + 1.
inline Var conv1d(const Var& input, const Var& kernels, const Var* bias, std::size_t stride) {
    if (stride < 1) throw ArgumentError("conv1d: stride must be >= 1");
    if (input.rank() != 2 && input.rank() != 3) {
        throw DimensionError("conv1d: input must be [C x T] or [B x C x T], got " + shape_str(input.shape()));
    }
    if (kernels.rank() != 3) throw DimensionError("conv1d: kernels must be [C_out x C_in x W], got " + shape_str(kernels.shape()));
    const bool batched = input.rank() == 3;
    const std::size_t batch = batched ? input.dim(0) : 1;
    const std::size_t c_in = input.dim(batched ? 1 : 0);
    const std::size_t t_in = input.dim(batched ? 2 : 1);
    const std::size_t c_out = kernels.dim(0), width = kernels.dim(2);
    if (kernels.dim(1) != c_in) {
        throw DimensionError("conv1d: input " + shape_str(input.shape()) + " vs kernels " + shape_str(kernels.shape()));
    }
    if (width > t_in) {
        throw DimensionError("conv1d: kernel width " + std::to_string(width) + " exceeds input length " +
                             std::to_string(t_in) + " (input " + shape_str(input.shape()) + ", kernels " +
                             shape_str(kernels.shape()) + ")");
    }
    if (bias && (bias->rank() != 1 || bias->dim(0) != c_out)) {
        throw DimensionError("conv1d: bias " + shape_str(bias->shape()) + " for " + std::to_string(c_out) + " channels");
    }
    const std::size_t t_out = (t_in - width) / stride + 1;
    Shape os = batched ? Shape{batch, c_out, t_out} : Shape{c_out, t_out};
    Array out(os);
    const Array& x = input.value();
    const Array& w = kernels.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < c_out; ++o) {
            double* orow = out.data().data() + (b * c_out + o) * t_out;
            const double b0 = bias ? bias->value()[o] : 0.0;
            for (std::size_t t = 0; t < t_out; ++t) orow[t] = b0;
            for (std::size_t c = 0; c < c_in; ++c) {
                const double* xrow = x.data().data() + (b * c_in + c) * t_in;
                const double* wrow = w.data().data() + (o * c_in + c) * width;
                for (std::size_t t = 0; t < t_out; ++t) {
                    double s = 0.0;
                    for (std::size_t q = 0; q < width; ++q) s += wrow[q] * xrow[t * stride + q];
                    orow[t] += s;
                }
            }
        }
    auto fn = [=](detail::Node& self) {
        const Array& xv = detail::parent_value(self, 0);
        const Array& wv = detail::parent_value(self, 1);
        Array* gx = detail::parent_grad(self, 0);
        Array* gw = detail::parent_grad(self, 1);
        Array* gbias = self.parents.size() > 2 ? detail::parent_grad(self, 2) : nullptr;
        const double* g = self.grad.data().data();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < c_out; ++o) {
                const double* grow = g + (b * c_out + o) * t_out;
                if (gbias) {
                    for (std::size_t t = 0; t < t_out; ++t) (*gbias)[o] += grow[t];
                }
                for (std::size_t c = 0; c < c_in; ++c) {
                    const std::size_t xoff = (b * c_in + c) * t_in;
                    const std::size_t woff = (o * c_in + c) * width;
                    for (std::size_t t = 0; t < t_out; ++t) {
                        const double gt = grow[t];
                        for (std::size_t q = 0; q < width; ++q) {
                            if (gw) (*gw)[woff + q] += gt * xv[xoff + t * stride + q];
                            if (gx) (*gx)[xoff + t * stride + q] += gt * wv[woff + q];
                        }
                    }
                }
            }
    };
    if (bias) return detail::make_op(std::move(out), {input, kernels, *bias}, fn);
    return detail::make_op(std::move(out), {input, kernels}, fn);
}

inline Var conv1d(const Var& input, const Var& kernels, std::size_t stride) {
    return conv1d(input, kernels, nullptr, stride);
}

/// Non-overlapping window means along the last axis; a trailing remainder is dropped.
inline Var avg_pool(const Var& input, std::size_t window) {
    if (window < 1) throw ArgumentError("avg_pool: window must be >= 1");
    if (input.rank() == 0) throw DimensionError("avg_pool on a scalar");
    const std::size_t t_in = input.shape().back();
    if (window > t_in) {
        throw DimensionError("avg_pool: window " + std::to_string(window) + " exceeds length " + std::to_string(t_in));
    }
    const std::size_t lead = input.size() / t_in;
    const std::size_t t_out = t_in / window;
    Shape os = input.shape();
    os.back() = t_out;
    Array out(os);
    const double inv = 1.0 / static_cast<double>(window);
    const Array& x = input.value();
    for (std::size_t r = 0; r < lead; ++r)
        for (std::size_t t = 0; t < t_out; ++t) {
            double s = 0.0;
            for (std::size_t q = 0; q < window; ++q) s += x[r * t_in + t * window + q];
            out[r * t_out + t] = s * inv;
        }
    return detail::make_op(std::move(out), {input}, [=](detail::Node& self) {
        Array* gx = detail::parent_grad(self, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < lead; ++r)
            for (std::size_t t = 0; t < t_out; ++t) {
                const double g = self.grad[r * t_out + t] * inv;
                for (std::size_t q = 0; q < window; ++q) (*gx)[r * t_in + t * window + q] += g;
            }
    });
}

// ---------------------------------------------------------------------------------------------
// Reverse sweep

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a gradient.
/// Repeated calls without zeroing leaf gradients add up.
inline void backward(const Var& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    using detail::Node;
    std::vector<Node*> order;
    const std::uint64_t mark = detail::next_visit_mark();
    std::vector<std::pair<Node*, std::size_t>> stack;
    Node* root = loss.node().get();
    root->visit_mark = mark;
    stack.emplace_back(root, 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && p->visit_mark != mark) {
                p->visit_mark = mark;
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node* n : order) {
        if (!n->is_leaf) n->release_grad();
    }
    root->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->is_leaf || !n->grad_ready) continue;
        n->backward_fn(*n);
        n->release_grad();
    }
}

} // namespace slode
