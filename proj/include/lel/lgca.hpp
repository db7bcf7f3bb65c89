#pragma once

// Multi-head self-attention with scores clamped to [-c, c],
// c = L_att * sqrt(d_h), and a spectrally constrained output projection.

#include <cmath>
#include <string>
#include <vector>

#include "layers.hpp"

namespace lel {

template <class T>
struct ForwardContext {
    bool training = false;
    Rng* rng = nullptr;  ///< dropout source; required when training
    /// When set, receives every head's attention (before dropout) as [B, T, T].
    std::vector<Tensor<T>>* attention = nullptr;
};

template <class T>
struct LgcaParams {
    std::vector<Linear<T>> query, key, value;  ///< per head, D -> d_h
    Linear<T> output;                          ///< H*d_h -> D, sigma_max <= L_linear
    std::size_t heads = 1;
    double L_att = 1.0;
    double dropout = 0.3;

    LgcaParams() = default;
    LgcaParams(std::size_t dim, std::size_t num_heads, double L_att_, double L_linear, double dropout_, Rng& rng,
               bool constrain_qkv = false)
        : heads(num_heads), L_att(L_att_), dropout(dropout_)
    {
        if (num_heads == 0 || dim % num_heads != 0)
            throw ContractError("LGCA: embedding size " + std::to_string(dim) + " not divisible by " +
                                std::to_string(num_heads) + " heads");
        if (!(L_att > 0.0)) throw ParameterError("LGCA: L_att must be positive");
        const std::size_t dh = dim / num_heads;
        const Constraint qkv = constrain_qkv ? Constraint::spectral(L_linear) : Constraint{};
        for (std::size_t h = 0; h < num_heads; ++h) {
            query.emplace_back(dim, dh, rng, qkv);
            key.emplace_back(dim, dh, rng, qkv);
            value.emplace_back(dim, dh, rng, qkv);
        }
        output = Linear<T>(dh * num_heads, dim, rng, Constraint::spectral(L_linear));
    }

    std::size_t dim() const { return output.out(); }
    std::size_t head_dim() const { return dim() / heads; }
    double clamp_bound() const { return L_att * std::sqrt(static_cast<double>(head_dim())); }

    void collect(ParamRefs<T>& out, const std::string& prefix)
    {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::string hp = prefix + "/head" + std::to_string(h);
            query[h].collect(out, hp + "/query");
            key[h].collect(out, hp + "/key");
            value[h].collect(out, hp + "/value");
        }
        output.collect(out, prefix + "/output");
    }
};

/// S = Q K^T / sqrt(d_h) for Q, K [B, T, d_h].
template <class T>
ad::Var<T> attention_scores(const ad::Var<T>& q, const ad::Var<T>& k)
{
    const double dh = static_cast<double>(q.shape().at(2));
    return ad::scale(ad::bmm_nt(q, k), static_cast<T>(1.0 / std::sqrt(dh)));
}

/// Row-wise softmax of clamp(S, -c, c).
template <class T>
ad::Var<T> clamp_softmax(const ad::Var<T>& s, double c)
{
    if (!(c > 0.0)) throw ParameterError("clamp_softmax: bound must be positive");
    return ad::softmax_last(ad::clamp(s, static_cast<T>(-c), static_cast<T>(c)));
}

/// Concatenated head outputs [B, T, H*d_h] before the output projection.
template <class T>
ad::Var<T> lgca_heads(const ad::Var<T>& x, const LgcaParams<T>& p, ForwardContext<T>& ctx)
{
    if (x.value().rank() != 3 || x.shape()[2] != p.dim())
        throw ContractError("lgca expects X[B, T, " + std::to_string(p.dim()) + "], got " + shape_str(x.shape()));
    const double c = p.clamp_bound();
    std::vector<ad::Var<T>> outs;
    outs.reserve(p.heads);
    for (std::size_t h = 0; h < p.heads; ++h) {
        auto q = p.query[h](x);
        auto k = p.key[h](x);
        auto v = p.value[h](x);
        auto a = clamp_softmax(attention_scores(q, k), c);
        if (ctx.attention) ctx.attention->push_back(a.value());
        if (ctx.training) {
            if (!ctx.rng) throw ContractError("lgca: training mode needs a dropout generator");
            a = ad::dropout(a, p.dropout, *ctx.rng);
        }
        auto o = ad::bmm(a, v);
        for (auto val : o.value().data)
            if (!std::isfinite(static_cast<double>(val)))
                throw NumericError("lgca: non-finite activation in head " + std::to_string(h));
        outs.push_back(o);
    }
    return p.heads == 1 ? outs[0] : ad::concat_last(outs);
}

template <class T>
ad::Var<T> lgca_forward(const ad::Var<T>& x, const LgcaParams<T>& p, ForwardContext<T>& ctx)
{
    return p.output(lgca_heads(x, p, ctx));
}

template <class T>
ad::Var<T> lgca_forward(const ad::Var<T>& x, const LgcaParams<T>& p, bool training, Rng* rng = nullptr)
{
    ForwardContext<T> ctx{training, rng, nullptr};
    return lgca_forward(x, p, ctx);
}

} // namespace lel
