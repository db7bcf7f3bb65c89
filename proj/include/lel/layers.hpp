#pragma once

#include <charconv>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"
#include "spectral.hpp"

namespace lel {

/// Constraint annotation carried by each trainable tensor.
struct Constraint {
    enum class Kind { none, spectral_norm };
    Kind kind = Kind::none;
    double bound = 0.0;  ///< sigma_max bound when kind == spectral_norm

    static Constraint spectral(double L) { return {Kind::spectral_norm, L}; }
    bool constrained() const { return kind == Kind::spectral_norm; }
    std::string str() const
    {
        if (!constrained()) return "none";
        char buf[32];
        const auto r = std::to_chars(buf, buf + sizeof buf, bound);
        return "spectral<=" + std::string(buf, r.ptr);
    }
};

template <class T>
struct Param {
    ad::Var<T> var;
    Constraint constraint;
    std::vector<double> singular_vector;  ///< warm start for power iteration

    Param() = default;
    Param(Tensor<T> init, Constraint c = {}) : var(std::move(init), true), constraint(c) {}

    Tensor<T>& value() { return var.mutable_value(); }
    const Tensor<T>& value() const { return var.value(); }

    /// Projects onto the spectral-norm ball if annotated; no-op otherwise.
    void project(int iters = 200, double tol = 1e-8)
    {
        if (!constraint.constrained()) return;
        auto r = spectral_norm_project(var.mutable_value(), constraint.bound, iters, tol, 0x5eed, singular_vector);
        singular_vector = std::move(r.right);
    }
};

template <class T>
using ParamRefs = std::vector<std::pair<std::string, Param<T>*>>;

template <class T>
Tensor<T> random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng)
{
    Tensor<T> w({rows, cols});
    for (auto& x : w.data) x = static_cast<T>(rng.normal() * stddev);
    return w;
}

/// y = x W + b with W stored [in x out].
template <class T>
struct Linear {
    Param<T> weight;
    Param<T> bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, Constraint c = {})
        : weight(random_matrix<T>(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng), c),
          bias(Tensor<T>({out}))
    {
        weight.project();
    }

    std::size_t in() const { return weight.value().dim(0); }
    std::size_t out() const { return weight.value().dim(1); }

    ad::Var<T> operator()(const ad::Var<T>& x) const { return ad::linear(x, weight.var, bias.var); }

    void collect(ParamRefs<T>& out, const std::string& prefix)
    {
        out.push_back({prefix + "/weight", &weight});
        out.push_back({prefix + "/bias", &bias});
    }
};

/// Two linear layers with a rectifier in between.
template <class T>
struct Mlp2 {
    Linear<T> fc1;
    Linear<T> fc2;

    Mlp2() = default;
    Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng, Constraint c)
        : fc1(in, hidden, rng, c), fc2(hidden, out, rng, c) {}

    ad::Var<T> operator()(const ad::Var<T>& x) const { return fc2(ad::relu(fc1(x))); }

    void collect(ParamRefs<T>& out, const std::string& prefix)
    {
        fc1.collect(out, prefix + "/fc1");
        fc2.collect(out, prefix + "/fc2");
    }
};

} // namespace lel
