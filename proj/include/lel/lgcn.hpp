#pragma once

// Normalization with a unit-norm gain: the affine stage
//   z -> L_affine * (gamma / ||gamma||_2) * z + beta
// is L_affine-Lipschitz because every gain entry is at most 1 in magnitude.

#include <cmath>
#include <string>

#include "layers.hpp"

namespace lel {

enum class LgcnStats {
    per_sample,  ///< mean/std over the feature axis of each row (default)
    batch,       ///< mean/std over the batch axis of each feature
};

inline const char* lgcn_stats_name(LgcnStats s) { return s == LgcnStats::batch ? "batch" : "per_sample"; }

inline LgcnStats parse_lgcn_stats(const std::string& s)
{
    if (s == "per_sample") return LgcnStats::per_sample;
    if (s == "batch") return LgcnStats::batch;
    throw ContractError("unknown LGCN statistics mode '" + s + "' (per_sample | batch)");
}

template <class T>
struct LgcnParams {
    Param<T> gamma;
    Param<T> beta;
    double L_affine = 1.0;
    double eps = 1e-6;
    LgcnStats stats = LgcnStats::per_sample;

    LgcnParams() = default;
    LgcnParams(std::size_t dim, double L, LgcnStats s = LgcnStats::per_sample)
        : gamma(Tensor<T>({dim}, T{1})), beta(Tensor<T>({dim})), L_affine(L), stats(s)
    {
        if (!(L > 0.0)) throw ParameterError("LGCN: L_affine must be positive");
    }

    std::size_t dim() const { return gamma.value().size(); }

    /// Loading a zero-norm gain is repaired by resetting it to ones.
    bool repair_gain()
    {
        double n = 0.0;
        for (auto v : gamma.value().data) n += static_cast<double>(v) * static_cast<double>(v);
        if (n > 0.0) return false;
        for (auto& v : gamma.value().data) v = T{1};
        return true;
    }

    void collect(ParamRefs<T>& out, const std::string& prefix)
    {
        out.push_back({prefix + "/gamma", &gamma});
        out.push_back({prefix + "/beta", &beta});
    }
};

/// Z~ = (Z - mu) / (sigma + eps), population sigma.
template <class T>
ad::Var<T> lgcn_normalize(const ad::Var<T>& z, const LgcnParams<T>& p)
{
    if (z.value().rank() != 2) throw ContractError("lgcn expects Z[B, D], got " + shape_str(z.shape()));
    if (z.shape()[1] != p.dim()) throw ContractError("lgcn: feature size does not match gain");
    const T eps = static_cast<T>(p.eps);
    if (p.stats == LgcnStats::per_sample) return ad::standardize_last(z, eps, ad::NormDenominator::std_plus_eps);
    return ad::transpose2d(ad::standardize_last(ad::transpose2d(z), eps, ad::NormDenominator::std_plus_eps));
}

/// L_affine * (gamma / ||gamma||) * Z~ + beta
template <class T>
ad::Var<T> lgcn_affine(const ad::Var<T>& zt, const LgcnParams<T>& p)
{
    auto g = ad::unit_l2(p.gamma.var);
    return ad::add_bias(ad::scale(ad::mul_last(zt, g), static_cast<T>(p.L_affine)), p.beta.var);
}

template <class T>
ad::Var<T> lgcn_forward(const ad::Var<T>& z, const LgcnParams<T>& p)
{
    return lgcn_affine(lgcn_normalize(z, p), p);
}

} // namespace lel
