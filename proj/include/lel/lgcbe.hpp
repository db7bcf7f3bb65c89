#pragma once

// Band extraction block: FFT, per-band energies, adaptive channel/spectral
// weights under an l2 Lipschitz rescale, band-limited reconstruction and a
// residual LayerNorm.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "data_model.hpp"
#include "fft.hpp"
#include "layers.hpp"

namespace lel {

template <class T>
struct LgcbeParams {
    Mlp2<T> mlp_c;  ///< channel importance, C -> hidden -> C
    Mlp2<T> mlp_s;  ///< spectral importance, |B| -> hidden -> |B|
    Param<T> ln_gain;
    Param<T> ln_bias;
    std::vector<BinRange> bins;
    double L_lip = 1.0;
    double eps = 1e-8;
    double ln_eps = 1e-5;

    LgcbeParams() = default;
    LgcbeParams(std::size_t channels, std::size_t samples, std::vector<BinRange> band_bins, double L_lip_,
                double L_linear, Rng& rng)
        : bins(std::move(band_bins)), L_lip(L_lip_)
    {
        if (!(L_lip > 0.0)) throw ParameterError("LGCBE: L_Lip must be positive");
        require_disjoint(bins);
        const std::size_t nb = bins.size();
        const std::size_t hidden = std::max<std::size_t>(channels, 16);
        mlp_c = Mlp2<T>(channels, hidden, channels, rng, Constraint::spectral(L_linear));
        mlp_s = Mlp2<T>(nb, hidden, nb, rng, Constraint::spectral(L_linear));
        ln_gain = Param<T>(Tensor<T>({samples}, T{1}));
        ln_bias = Param<T>(Tensor<T>({samples}));
    }

    void collect(ParamRefs<T>& out, const std::string& prefix)
    {
        mlp_c.collect(out, prefix + "/mlp_c");
        mlp_s.collect(out, prefix + "/mlp_s");
        out.push_back({prefix + "/ln_gain", &ln_gain});
        out.push_back({prefix + "/ln_bias", &ln_bias});
    }
};

/// Real half-spectrum of X[B, C, T] -> [B, C, T/2+1, 2].
template <class T>
ad::Var<T> rfft_forward(const ad::Var<T>& x)
{
    return fft::rfft(x);
}

/// E[..., b] = sum over the bins of band b of |X_k|^2.
template <class T>
ad::Var<T> band_energy(const ad::Var<T>& spec, const std::vector<BinRange>& bins)
{
    const auto& s0 = spec.shape();
    if (s0.size() < 2 || s0.back() != 2) throw ContractError("band_energy expects [..., F, 2]");
    const std::size_t F = s0[s0.size() - 2];
    for (const auto& b : bins)
        if (b.hi > F) throw ContractError("band_energy: bin range beyond spectrum");
    const std::size_t rows = spec.size() / (2 * F), nb = bins.size();
    Shape s(s0.begin(), s0.end() - 2);
    s.push_back(nb);
    Tensor<T> out(s);
    const T* X = spec.value().data.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t b = 0; b < nb; ++b) {
            T acc{0};
            for (std::size_t k = bins[b].lo; k < bins[b].hi; ++k) {
                const T re = X[(r * F + k) * 2], im = X[(r * F + k) * 2 + 1];
                acc += re * re + im * im;
            }
            out[r * nb + b] = acc;
        }
    return ad::make_result<T>(std::move(out), {spec}, [rows, nb, F, bins](ad::Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t b = 0; b < nb; ++b) {
                const T gv = self.grad[r * nb + b];
                for (std::size_t k = bins[b].lo; k < bins[b].hi; ++k) {
                    const std::size_t i = (r * F + k) * 2;
                    g[i] += T{2} * gv * p.value[i];
                    g[i + 1] += T{2} * gv * p.value[i + 1];
                }
            }
    });
}

/// Band slice [..., lo:hi, 2] of a spectrum.
template <class T>
ad::Var<T> band_slice(const ad::Var<T>& spec, const BinRange& r)
{
    const auto& s0 = spec.shape();
    const std::size_t F = s0[s0.size() - 2];
    Shape flat(s0.begin(), s0.end() - 2);
    Shape flat2 = flat;
    flat.push_back(2 * F);
    auto sl = ad::slice_last(ad::reshape(spec, flat), 2 * r.lo, 2 * r.width());
    flat2.push_back(r.width());
    flat2.push_back(2);
    return ad::reshape(sl, flat2);
}

template <class T>
struct BandDecomposition {
    std::vector<ad::Var<T>> slices;  ///< per band [B, C, F_b, 2]
    ad::Var<T> energy;               ///< [B, C, |B|]
};

template <class T>
BandDecomposition<T> band_slice_energy(const ad::Var<T>& spec, const std::vector<BinRange>& bins)
{
    BandDecomposition<T> d;
    for (const auto& r : bins) d.slices.push_back(band_slice(spec, r));
    d.energy = band_energy(spec, bins);
    return d;
}

/// v * L / (||v||_2 + eps), per row of the last axis.
template <class T>
ad::Var<T> lipschitz_rescale(const ad::Var<T>& v, double L, double eps)
{
    return ad::lipschitz_rescale_rows(v, static_cast<T>(L), static_cast<T>(eps));
}

template <class T>
struct AdaptiveWeights {
    ad::Var<T> channel;   ///< W_c [B, C], in (0, 1)
    ad::Var<T> spectral;  ///< S_s [B, |B|], rows on the simplex
};

template <class T>
AdaptiveWeights<T> adaptive_weights(const ad::Var<T>& energy, const LgcbeParams<T>& p)
{
    if (energy.value().rank() != 3) throw ContractError("adaptive_weights expects E[B, C, |B|]");
    for (auto v : energy.value().data)
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("adaptive_weights: non-finite band energy");
    auto per_channel = ad::mean_axis(energy, 2);  // [B, C]
    auto per_band = ad::mean_axis(energy, 1);     // [B, |B|]
    return {ad::sigmoid(p.mlp_c(per_channel)), ad::softmax_last(p.mlp_s(per_band))};
}

/// slice[b, c, k, :] * Wc[b, c] * Ss[b, band]
template <class T>
ad::Var<T> weight_band_slice(const ad::Var<T>& slice, const ad::Var<T>& wc, const ad::Var<T>& ss, std::size_t band)
{
    const auto& s = slice.shape();
    if (s.size() != 4 || s[3] != 2) throw ContractError("weight_band_slice expects [B, C, F_b, 2]");
    const std::size_t B = s[0], C = s[1], W = s[2], nb = ss.shape().at(1);
    require_shape(wc.shape(), Shape{B, C}, "weight_band_slice channel weights");
    if (ss.shape()[0] != B || band >= nb) throw ContractError("weight_band_slice spectral weights");
    Tensor<T> out = slice.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const T f = wc.value()[b * C + c] * ss.value()[b * nb + band];
            T* row = out.data.data() + (b * C + c) * W * 2;
            for (std::size_t k = 0; k < 2 * W; ++k) row[k] *= f;
        }
    return ad::make_result<T>(std::move(out), {slice, wc, ss}, [B, C, W, nb, band](ad::Node<T>& self) {
        auto& ps = self.parent(0);
        auto& pw = self.parent(1);
        auto& pss = self.parent(2);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                const T w = pw.value[b * C + c], sv = pss.value[b * nb + band];
                const T* g = self.grad.data() + (b * C + c) * W * 2;
                const T* x = ps.value.data.data() + (b * C + c) * W * 2;
                T dot{0};
                for (std::size_t k = 0; k < 2 * W; ++k) dot += g[k] * x[k];
                if (ps.requires_grad) {
                    T* gx = ps.ensure_grad().data() + (b * C + c) * W * 2;
                    for (std::size_t k = 0; k < 2 * W; ++k) gx[k] += g[k] * w * sv;
                }
                if (pw.requires_grad) pw.ensure_grad()[b * C + c] += dot * sv;
                if (pss.requires_grad) pss.ensure_grad()[b * nb + band] += dot * w;
            }
    });
}

/// Scatters band slices into a zero spectrum [..., F, 2]; bins outside
/// every band stay zero.
template <class T>
ad::Var<T> scatter_bands(const std::vector<ad::Var<T>>& slices, const std::vector<BinRange>& bins, std::size_t F)
{
    if (slices.size() != bins.size() || slices.empty()) throw ContractError("scatter_bands: slice/bin count mismatch");
    require_disjoint(bins);
    const auto& s0 = slices[0].shape();
    Shape s(s0.begin(), s0.end() - 2);
    const std::size_t rows = shape_size(s);
    s.push_back(F);
    s.push_back(2);
    Tensor<T> out(s);
    for (std::size_t b = 0; b < bins.size(); ++b) {
        if (bins[b].hi > F) throw ContractError("scatter_bands: bin range beyond spectrum");
        const std::size_t w = bins[b].width();
        if (slices[b].size() != rows * w * 2) throw ContractError("scatter_bands: slice shape mismatch");
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(slices[b].value().data.begin() + static_cast<std::ptrdiff_t>(r * w * 2), 2 * w,
                        out.data.begin() + static_cast<std::ptrdiff_t>((r * F + bins[b].lo) * 2));
    }
    return ad::make_result<T>(std::move(out), slices, [rows, F, bins](ad::Node<T>& self) {
        for (std::size_t b = 0; b < bins.size(); ++b) {
            auto& p = self.parent(b);
            if (!p.requires_grad) continue;
            auto& g = p.ensure_grad();
            const std::size_t w = bins[b].width();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t k = 0; k < 2 * w; ++k) g[r * w * 2 + k] += self.grad[(r * F + bins[b].lo) * 2 + k];
        }
    });
}

/// Weighted band slices back to the time domain: IFFT(sum_b F_b * W~_c * S~_s[b]).
template <class T>
ad::Var<T> reconstruct(const std::vector<ad::Var<T>>& slices, const ad::Var<T>& wc, const ad::Var<T>& ss,
                       const std::vector<BinRange>& bins, std::size_t samples)
{
    std::vector<ad::Var<T>> weighted;
    for (std::size_t b = 0; b < slices.size(); ++b) weighted.push_back(weight_band_slice(slices[b], wc, ss, b));
    return fft::irfft(scatter_bands(weighted, bins, fft::half_size(samples)), samples);
}

template <class T>
struct LgcbeOutput {
    ad::Var<T> out;                   ///< [B, C, T]
    ad::Var<T> energy;                ///< [B, C, |B|]
    std::vector<ad::Var<T>> bands;    ///< per band [B, C, F_b, 2]
    ad::Var<T> channel_weights;       ///< W~_c
    ad::Var<T> spectral_weights;      ///< S~_s
};

/// X_out = LayerNorm(X + IFFT(weighted bands)).
template <class T>
LgcbeOutput<T> lgcbe_forward(const ad::Var<T>& x, const LgcbeParams<T>& p)
{
    if (x.value().rank() != 3) throw ContractError("lgcbe_forward expects X[B, C, T]");
    const std::size_t S = x.shape()[2];
    if (p.ln_gain.value().size() != S) throw ContractError("lgcbe_forward: parameters built for a different T");
    auto spec = rfft_forward(x);
    auto dec = band_slice_energy(spec, p.bins);
    auto w = adaptive_weights(dec.energy, p);
    auto wc = lipschitz_rescale(w.channel, p.L_lip, p.eps);
    auto ss = lipschitz_rescale(w.spectral, p.L_lip, p.eps);
    auto x_time = reconstruct(dec.slices, wc, ss, p.bins, S);
    auto res = ad::add(x, x_time);
    auto normed = ad::standardize_last(res, static_cast<T>(p.ln_eps), ad::NormDenominator::sqrt_var_eps);
    auto out = ad::add_bias(ad::mul_last(normed, p.ln_gain.var), p.ln_bias.var);
    return {out, dec.energy, dec.slices, wc, ss};
}

} // namespace lel
