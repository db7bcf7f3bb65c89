#pragma once

// Minimal tape-free reverse-mode autodiff over dense tensors. Every op
// returns a Var whose node keeps its parents and a backward closure; calling
// backward() on a scalar topologically sorts the reachable graph and runs
// the closures in reverse order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace lel::ad {

template <class T>
struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<T>& ensure_grad()
    {
        if (grad.size() != value.size()) grad.assign(value.size(), T{0});
        return grad;
    }
    Node& parent(std::size_t i) { return *parents[i]; }
};

namespace detail {
inline thread_local bool grad_enabled = true;
inline thread_local std::vector<std::uint8_t>* regimes = nullptr;
}

inline bool grad_enabled() { return detail::grad_enabled; }

/// While alive, piecewise ops (relu, clamp) append the piece each element
/// falls on. Two forwards that record different sequences straddle a kink.
class RegimeRecorder {
public:
    RegimeRecorder() : prev_(detail::regimes) { detail::regimes = &bits_; }
    ~RegimeRecorder() { detail::regimes = prev_; }
    RegimeRecorder(const RegimeRecorder&) = delete;
    RegimeRecorder& operator=(const RegimeRecorder&) = delete;
    const std::vector<std::uint8_t>& bits() const { return bits_; }

private:
    std::vector<std::uint8_t> bits_;
    std::vector<std::uint8_t>* prev_;
};

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
class Var {
public:
    Var() : node_(std::make_shared<Node<T>>()) {}
    explicit Var(Tensor<T> v, bool requires_grad = false) : node_(std::make_shared<Node<T>>())
    {
        node_->value = std::move(v);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t size() const { return node_->value.size(); }
    T item() const
    {
        if (size() != 1) throw ContractError("item() on non-scalar " + shape_str(shape()));
        return node_->value.data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }

    const std::vector<T>& grad() const { return node_->ensure_grad(); }
    std::vector<T>& grad() { return node_->ensure_grad(); }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{0}); }

    /// Same value, cut from the graph.
    Var detach() const { return Var(node_->value, false); }

    void backward() const
    {
        if (size() != 1) throw ContractError("backward() without seed needs a scalar root");
        backward(std::vector<T>{T{1}});
    }

    void backward(const std::vector<T>& seed) const
    {
        if (seed.size() != size()) throw ContractError("backward seed size mismatch");
        if (!node_->requires_grad) return;
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, i] = stack.back();
            if (i < n->parents.size()) {
                Node<T>* p = n->parents[i++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        auto& g = node_->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = *it;
            if (n->backward && !n->grad.empty()) n->backward(*n);
        }
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds a result node; records parents/backward only when some parent
/// needs a gradient and recording is enabled.
template <class T, class F>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> parents, F&& backward)
{
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const auto& p : parents) n->parents.push_back(p.node());
            n->backward = std::forward<F>(backward);
        }
    }
    return Var<T>(std::move(n));
}

template <class T, class F>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& parents, F&& backward)
{
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const auto& p : parents) n->parents.push_back(p.node());
            n->backward = std::forward<F>(backward);
        }
    }
    return Var<T>(std::move(n));
}

template <class T>
Var<T> constant(Tensor<T> v)
{
    return Var<T>(std::move(v), false);
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{
    require_shape(b.shape(), a.shape(), "add");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            auto& p = self.parent(k);
            if (!p.requires_grad) continue;
            auto& g = p.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b)
{
    require_shape(b.shape(), a.shape(), "sub");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b)
{
    require_shape(b.shape(), a.shape(), "mul");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s)
{
    Tensor<T> out = a.value();
    for (auto& v : out.data) v *= s;
    return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

template <class T>
Var<T> relu(const Var<T>& a)
{
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = v > T{0} ? v : T{0};
    if (detail::regimes)
        for (auto v : a.value().data) detail::regimes->push_back(v > T{0});
    return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.value[i] > T{0}) g[i] += self.grad[i];
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& a)
{
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = T{1} / (T{1} + std::exp(-v));
    return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = self.value[i];
            g[i] += self.grad[i] * s * (T{1} - s);
        }
    });
}

/// log(x + eps); caller guarantees x + eps > 0.
template <class T>
Var<T> log_offset(const Var<T>& a, T eps)
{
    Tensor<T> out = a.value();
    for (auto& v : out.data) {
        if (!(v + eps > T{0})) throw NumericError("log_offset: argument not positive");
        v = std::log(v + eps);
    }
    return make_result<T>(std::move(out), {a}, [eps](Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / (p.value[i] + eps);
    });
}

/// Clamp to [lo, hi]. The subgradient on the boundary is taken as 1.
template <class T>
Var<T> clamp(const Var<T>& a, T lo, T hi)
{
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = std::min(std::max(v, lo), hi);
    if (detail::regimes)
        for (auto v : a.value().data) detail::regimes->push_back(v < lo ? 0 : v > hi ? 2 : 1);
    return make_result<T>(std::move(out), {a}, [lo, hi](Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T x = p.value[i];
            if (x >= lo && x <= hi) g[i] += self.grad[i];
        }
    });
}

/// Inverted dropout: kept entries are scaled by 1/(1-p).
template <class T>
Var<T> dropout(const Var<T>& a, double p, Rng& rng)
{
    if (p <= 0.0) return a;
    if (p >= 1.0) throw ContractError("dropout rate must be < 1");
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(a.size());
    for (auto& m : mask) m = rng.uniform() < p ? T{0} : keep_scale;
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return make_result<T>(std::move(out), {a}, [mask = std::move(mask)](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
    });
}

// ---------------------------------------------------------------- shape ops

template <class T>
Var<T> reshape(const Var<T>& a, Shape s)
{
    if (shape_size(s) != a.size())
        throw ContractError("reshape " + shape_str(a.shape()) + " -> " + shape_str(s));
    Tensor<T> out(std::move(s), a.value().data);
    return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// [R, C] -> [C, R]
template <class T>
Var<T> transpose2d(const Var<T>& a)
{
    if (a.value().rank() != 2) throw ContractError("transpose2d expects rank 2");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    Tensor<T> out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.value()[i * c + j];
    return make_result<T>(std::move(out), {a}, [r, c](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

/// Contiguous slice [start, start+len) of the last axis.
template <class T>
Var<T> slice_last(const Var<T>& a, std::size_t start, std::size_t len)
{
    const std::size_t n = a.value().last();
    if (start + len > n) throw ContractError("slice_last out of range");
    const std::size_t rows = a.size() / n;
    Shape s = a.shape();
    s.back() = len;
    Tensor<T> out(s);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(a.value().data.begin() + r * n + start, len, out.data.begin() + r * len);
    return make_result<T>(std::move(out), {a}, [rows, n, start, len](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) g[r * n + start + j] += self.grad[r * len + j];
    });
}

template <class T>
Var<T> concat_last(const std::vector<Var<T>>& parts)
{
    if (parts.empty()) throw ContractError("concat_last of nothing");
    Shape s = parts[0].shape();
    const std::size_t rows = parts[0].size() / parts[0].value().last();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape ps = p.shape();
        const std::size_t w = p.value().last();
        ps.back() = s.back();
        if (ps != s) throw ContractError("concat_last: leading shapes differ");
        widths.push_back(w);
        total += w;
    }
    s.back() = total;
    Tensor<T> out(s);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& src = parts[k].value().data;
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(src.begin() + r * widths[k], widths[k], out.data.begin() + r * total + off);
        off += widths[k];
    }
    return make_result<T>(std::move(out), parts, [rows, widths, total](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            auto& p = self.parent(k);
            if (p.requires_grad) {
                auto& g = p.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[k]; ++j) g[r * widths[k] + j] += self.grad[r * total + off + j];
            }
            off += widths[k];
        }
    });
}

/// Gathers the given positions of the last axis.
template <class T>
Var<T> select_last(const Var<T>& a, std::vector<std::size_t> idx)
{
    const std::size_t n = a.value().last();
    const std::size_t rows = a.size() / n;
    for (auto i : idx)
        if (i >= n) throw ContractError("select_last index out of range");
    Shape s = a.shape();
    s.back() = idx.size();
    Tensor<T> out(s);
    const std::size_t m = idx.size();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) out[r * m + j] = a.value()[r * n + idx[j]];
    return make_result<T>(std::move(out), {a}, [rows, n, m, idx = std::move(idx)](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < m; ++j) g[r * n + idx[j]] += self.grad[r * m + j];
    });
}

namespace detail {
/// Views shape as (outer, axis, inner) around `axis`.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len, std::size_t& inner)
{
    if (axis >= s.size()) throw ContractError("axis out of range");
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
} // namespace detail

template <class T>
Var<T> sum_axis(const Var<T>& a, std::size_t axis, T factor = T{1})
{
    std::size_t outer, len, inner;
    detail::split_axis(a.shape(), axis, outer, len, inner);
    Shape s = a.shape();
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor<T> out(s);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += factor * a.value()[(o * len + l) * inner + i];
    return make_result<T>(std::move(out), {a}, [outer, len, inner, factor](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t l = 0; l < len; ++l)
                for (std::size_t i = 0; i < inner; ++i) g[(o * len + l) * inner + i] += factor * self.grad[o * inner + i];
    });
}

template <class T>
Var<T> mean_axis(const Var<T>& a, std::size_t axis)
{
    return sum_axis(a, axis, T{1} / static_cast<T>(a.shape().at(axis)));
}

template <class T>
Var<T> sum_all(const Var<T>& a)
{
    T acc{0};
    for (auto v : a.value().data) acc += v;
    return make_result<T>(Tensor<T>({1}, acc), {a}, [](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

/// sum(a * w) for a constant weight tensor; the scalar probe used in gradient checks.
template <class T>
Var<T> weighted_sum(const Var<T>& a, const Tensor<T>& w)
{
    require_shape(w.shape, a.shape(), "weighted_sum");
    T acc{0};
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.value()[i] * w[i];
    return make_result<T>(Tensor<T>({1}, acc), {a}, [w](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
    });
}

// ---------------------------------------------------------------- broadcasts

/// x[..., n] + b[n]
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b)
{
    const std::size_t n = x.value().last();
    require_shape(b.shape(), Shape{n}, "add_bias");
    Tensor<T> out = x.value();
    const std::size_t rows = out.size() / n;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b.value()[j];
    return make_result<T>(std::move(out), {x, b}, [rows, n](Node<T>& self) {
        auto& px = self.parent(0);
        auto& pb = self.parent(1);
        if (px.requires_grad) {
            auto& g = px.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
        }
    });
}

/// x[..., n] * g[n]
template <class T>
Var<T> mul_last(const Var<T>& x, const Var<T>& gvec)
{
    const std::size_t n = x.value().last();
    require_shape(gvec.shape(), Shape{n}, "mul_last");
    Tensor<T> out = x.value();
    const std::size_t rows = out.size() / n;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] *= gvec.value()[j];
    return make_result<T>(std::move(out), {x, gvec}, [rows, n](Node<T>& self) {
        auto& px = self.parent(0);
        auto& pg = self.parent(1);
        if (px.requires_grad) {
            auto& g = px.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r * n + j] * pg.value[j];
        }
        if (pg.requires_grad) {
            auto& g = pg.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j] * px.value[r * n + j];
        }
    });
}

// ---------------------------------------------------------------- matmul

/// x[..., in] @ w[in, out] + b[out]. Leading axes are flattened.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b)
{
    if (w.value().rank() != 2) throw ContractError("linear: weight must be rank 2");
    const std::size_t in = w.shape()[0], outd = w.shape()[1];
    if (x.value().last() != in)
        throw ContractError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    require_shape(b.shape(), Shape{outd}, "linear bias");
    const std::size_t rows = x.size() / in;
    Shape s = x.shape();
    s.back() = outd;
    Tensor<T> out(s);
    const T* X = x.value().data.data();
    const T* W = w.value().data.data();
    T* Y = out.data.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T* y = Y + r * outd;
        for (std::size_t j = 0; j < outd; ++j) y[j] = b.value()[j];
        const T* xr = X + r * in;
        for (std::size_t k = 0; k < in; ++k) {
            const T xv = xr[k];
            const T* wk = W + k * outd;
            for (std::size_t j = 0; j < outd; ++j) y[j] += xv * wk[j];
        }
    }
    return make_result<T>(std::move(out), {x, w, b}, [rows, in, outd](Node<T>& self) {
        auto& px = self.parent(0);
        auto& pw = self.parent(1);
        auto& pb = self.parent(2);
        const T* G = self.grad.data();
        if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            const T* W = pw.value.data.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = G + r * outd;
                T* dx = gx.data() + r * in;
                for (std::size_t k = 0; k < in; ++k) {
                    const T* wk = W + k * outd;
                    T acc{0};
                    for (std::size_t j = 0; j < outd; ++j) acc += gr[j] * wk[j];
                    dx[k] += acc;
                }
            }
        }
        if (pw.requires_grad) {
            auto& gw = pw.ensure_grad();
            const T* X = px.value.data.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = G + r * outd;
                const T* xr = X + r * in;
                for (std::size_t k = 0; k < in; ++k) {
                    const T xv = xr[k];
                    T* dw = gw.data() + k * outd;
                    for (std::size_t j = 0; j < outd; ++j) dw[j] += xv * gr[j];
                }
            }
        }
        if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < outd; ++j) gb[j] += G[r * outd + j];
        }
    });
}

/// a[G, m, k] @ b[G, n, k]^T -> [G, m, n]
template <class T>
Var<T> bmm_nt(const Var<T>& a, const Var<T>& b)
{
    if (a.value().rank() != 3 || b.value().rank() != 3) throw ContractError("bmm_nt expects rank 3");
    const std::size_t G = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[1];
    if (b.shape()[0] != G || b.shape()[2] != k) throw ContractError("bmm_nt shape mismatch");
    Tensor<T> out({G, m, n});
    for (std::size_t g = 0; g < G; ++g)
        for (std::size_t i = 0; i < m; ++i) {
            const T* ar = a.value().data.data() + (g * m + i) * k;
            for (std::size_t j = 0; j < n; ++j) {
                const T* br = b.value().data.data() + (g * n + j) * k;
                T acc{0};
                for (std::size_t t = 0; t < k; ++t) acc += ar[t] * br[t];
                out[(g * m + i) * n + j] = acc;
            }
        }
    return make_result<T>(std::move(out), {a, b}, [G, m, k, n](Node<T>& self) {
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        for (std::size_t g = 0; g < G; ++g)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const T gv = self.grad[(g * m + i) * n + j];
                    if (gv == T{0}) continue;
                    if (pa.requires_grad) {
                        T* da = pa.ensure_grad().data() + (g * m + i) * k;
                        const T* br = pb.value.data.data() + (g * n + j) * k;
                        for (std::size_t t = 0; t < k; ++t) da[t] += gv * br[t];
                    }
                    if (pb.requires_grad) {
                        T* db = pb.ensure_grad().data() + (g * n + j) * k;
                        const T* ar = pa.value.data.data() + (g * m + i) * k;
                        for (std::size_t t = 0; t < k; ++t) db[t] += gv * ar[t];
                    }
                }
    });
}

/// a[G, m, k] @ b[G, k, n] -> [G, m, n]
template <class T>
Var<T> bmm(const Var<T>& a, const Var<T>& b)
{
    if (a.value().rank() != 3 || b.value().rank() != 3) throw ContractError("bmm expects rank 3");
    const std::size_t G = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    if (b.shape()[0] != G || b.shape()[1] != k) throw ContractError("bmm shape mismatch");
    Tensor<T> out({G, m, n});
    for (std::size_t g = 0; g < G; ++g)
        for (std::size_t i = 0; i < m; ++i) {
            T* orow = out.data.data() + (g * m + i) * n;
            for (std::size_t t = 0; t < k; ++t) {
                const T av = a.value()[(g * m + i) * k + t];
                const T* brow = b.value().data.data() + (g * k + t) * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    return make_result<T>(std::move(out), {a, b}, [G, m, k, n](Node<T>& self) {
        auto& pa = self.parent(0);
        auto& pb = self.parent(1);
        for (std::size_t g = 0; g < G; ++g)
            for (std::size_t i = 0; i < m; ++i) {
                const T* grow = self.grad.data() + (g * m + i) * n;
                for (std::size_t t = 0; t < k; ++t) {
                    const T* brow = pb.value.data.data() + (g * k + t) * n;
                    if (pa.requires_grad) {
                        T acc{0};
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        pa.ensure_grad()[(g * m + i) * k + t] += acc;
                    }
                    if (pb.requires_grad) {
                        const T av = pa.value[(g * m + i) * k + t];
                        T* db = pb.ensure_grad().data() + (g * k + t) * n;
                        for (std::size_t j = 0; j < n; ++j) db[j] += av * grow[j];
                    }
                }
            }
    });
}

// ---------------------------------------------------------------- normalizers

/// Row-wise softmax over the last axis.
template <class T>
Var<T> softmax_last(const Var<T>& a)
{
    const std::size_t n = a.value().last();
    const std::size_t rows = a.size() / n;
    Tensor<T> out = a.value();
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = out.data.data() + r * n;
        const T mx = *std::max_element(row, row + n);
        T z{0};
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (std::size_t j = 0; j < n; ++j) row[j] /= z;
    }
    return make_result<T>(std::move(out), {a}, [rows, n](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.value.data.data() + r * n;
            const T* gy = self.grad.data() + r * n;
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += y[j] * gy[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (gy[j] - dot);
        }
    });
}

enum class NormDenominator {
    std_plus_eps,  ///< (x - mu) / (sigma + eps)
    sqrt_var_eps,  ///< (x - mu) / sqrt(var + eps), the usual LayerNorm form
};

/// Per-row standardization over the last axis with population variance.
template <class T>
Var<T> standardize_last(const Var<T>& a, T eps, NormDenominator kind)
{
    const std::size_t n = a.value().last();
    const std::size_t rows = a.size() / n;
    Tensor<T> out = a.value();
    std::vector<T> sigma(rows), denom(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = out.data.data() + r * n;
        T mu{0};
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<T>(n);
        T var{0};
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(n);
        sigma[r] = std::sqrt(var);
        denom[r] = kind == NormDenominator::std_plus_eps ? sigma[r] + eps : std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) row[j] = (row[j] - mu) / denom[r];
    }
    return make_result<T>(std::move(out), {a}, [rows, n, kind, sigma, denom](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        const T nn = static_cast<T>(n);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.value.data.data() + r * n;
            const T* gy = self.grad.data() + r * n;
            T gsum{0}, gy_dot{0};
            for (std::size_t j = 0; j < n; ++j) {
                gsum += gy[j];
                gy_dot += gy[j] * y[j];
            }
            // y = c / d, c = x - mu. dd/dx_j = (c_j / n) * k where
            // k = 1/sigma for std+eps and 1/d for sqrt(var+eps).
            // dL/dx_j = (g_j - mean g)/d - (sum_i g_i c_i) / d^2 * dd/dx_j
            T k;
            if (kind == NormDenominator::std_plus_eps)
                k = sigma[r] > T{0} ? T{1} / sigma[r] : T{0};
            else
                k = T{1} / denom[r];
            const T d = denom[r];
            // sum_i g_i c_i = d * gy_dot; c_j = d * y_j
            const T coeff = (d * gy_dot) / (d * d) * k / nn * d;
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += (gy[j] - gsum / nn) / d - coeff * y[j];
        }
    });
}

/// g / ||g||_2 over the whole tensor. Throws on a zero-norm input.
template <class T>
Var<T> unit_l2(const Var<T>& a)
{
    T nrm{0};
    for (auto v : a.value().data) nrm += v * v;
    nrm = std::sqrt(nrm);
    if (!(nrm > T{0})) throw ParameterError("unit_l2: zero-norm vector");
    Tensor<T> out = a.value();
    for (auto& v : out.data) v /= nrm;
    return make_result<T>(std::move(out), {a}, [nrm](Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        T dot{0};
        for (std::size_t i = 0; i < g.size(); ++i) dot += self.grad[i] * self.value[i];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (self.grad[i] - dot * self.value[i]) / nrm;
    });
}

/// Row-wise v * L / (||v||_2 + eps) over the last axis.
template <class T>
Var<T> lipschitz_rescale_rows(const Var<T>& a, T L, T eps)
{
    const std::size_t n = a.value().last();
    const std::size_t rows = a.size() / n;
    Tensor<T> out = a.value();
    std::vector<T> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T* row = out.data.data() + r * n;
        T s{0};
        for (std::size_t j = 0; j < n; ++j) s += row[j] * row[j];
        norms[r] = std::sqrt(s);
        const T f = L / (norms[r] + eps);
        for (std::size_t j = 0; j < n; ++j) row[j] *= f;
    }
    return make_result<T>(std::move(out), {a}, [rows, n, L, eps, norms](Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* v = p.value.data.data() + r * n;
            const T* gy = self.grad.data() + r * n;
            const T d = norms[r] + eps;
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += gy[j] * v[j];
            const T corr = norms[r] > T{0} ? L * dot / (d * d * norms[r]) : T{0};
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += L * gy[j] / d - corr * v[j];
        }
    });
}

// ---------------------------------------------------------------- losses

/// Mean negative log-likelihood of probability rows with a floor on p.
template <class T>
Var<T> nll_loss(const Var<T>& probs, const std::vector<int>& labels, T floor = T(1e-12))
{
    if (probs.value().rank() != 2) throw ContractError("nll_loss expects [B, K] probabilities");
    const std::size_t B = probs.shape()[0], K = probs.shape()[1];
    if (labels.size() != B) throw ContractError("nll_loss: label count mismatch");
    T acc{0};
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= K)
            throw ContractError("label " + std::to_string(labels[b]) + " outside [0, " + std::to_string(K) + ")");
        acc -= std::log(std::max(probs.value()[b * K + static_cast<std::size_t>(labels[b])], floor));
    }
    acc /= static_cast<T>(B);
    return make_result<T>(Tensor<T>({1}, acc), {probs}, [B, K, labels, floor](Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.ensure_grad();
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t i = b * K + static_cast<std::size_t>(labels[b]);
            const T pv = p.value[i];
            if (pv > floor) g[i] -= self.grad[0] / (pv * static_cast<T>(B));
        }
    });
}

} // namespace lel::ad
