#pragma once

// Per-class channel connectivity from channel-mixer attention and signal
// correlation.

#include <cmath>
#include <vector>

#include "training.hpp"

namespace lel {

using Matrix = std::vector<std::vector<double>>;

/// |Pearson correlation| between channels of one [C x T] window. A
/// constant channel correlates 0 with the others and 1 with itself.
inline Matrix abs_correlation(const double* x, std::size_t C, std::size_t T)
{
    std::vector<double> mean(C, 0.0), sd(C, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t t = 0; t < T; ++t) mean[c] += x[c * T + t];
        mean[c] /= static_cast<double>(T);
        for (std::size_t t = 0; t < T; ++t) sd[c] += (x[c * T + t] - mean[c]) * (x[c * T + t] - mean[c]);
        sd[c] = std::sqrt(sd[c]);
    }
    Matrix m(C, std::vector<double>(C, 0.0));
    for (std::size_t a = 0; a < C; ++a) {
        m[a][a] = 1.0;
        for (std::size_t b = a + 1; b < C; ++b) {
            if (sd[a] == 0.0 || sd[b] == 0.0) continue;
            double s = 0.0;
            for (std::size_t t = 0; t < T; ++t) s += (x[a * T + t] - mean[a]) * (x[b * T + t] - mean[b]);
            m[a][b] = m[b][a] = std::min(1.0, std::abs(s) / (sd[a] * sd[b]));
        }
    }
    return m;
}

/// M_ij / sqrt(M_ii M_jj)
inline void unit_diagonal(Matrix& m)
{
    const std::size_t n = m.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = m[i][i] > 0.0 ? std::sqrt(m[i][i]) : 1.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) m[i][j] /= d[i] * d[j];
}

/// For each class: mean over its windows in `idx` of
///   blend * sym(head-averaged channel attention) + (1 - blend) * |corr|,
/// then scaled to a unit diagonal. Classes without windows get identity.
template <class T>
std::vector<Matrix> connectivity(const LelModel<T>& model, const TrialSet& set, const std::vector<std::size_t>& idx,
                                 double blend = 0.5)
{
    if (!(blend >= 0.0 && blend <= 1.0)) throw ParameterError("connectivity blend must be in [0, 1]");
    const auto& cfg = model.config();
    if (set.channels() != cfg.channels || set.samples() != cfg.samples)
        throw ContractError("connectivity: dataset shape does not match checkpoint");
    const std::size_t C = cfg.channels, S = cfg.samples, K = static_cast<std::size_t>(cfg.classes);
    std::vector<Matrix> acc(K, Matrix(C, std::vector<double>(C, 0.0)));
    std::vector<std::size_t> count(K, 0);
    ad::NoGradGuard ng;
    for (auto i : idx) {
        const int label = set.records[i].label;
        auto b = gather<T>(set, {i});
        std::vector<Tensor<T>> att;
        (void)model.forward(ad::Var<T>(std::move(b.data)), false, 0, &att);
        const auto corr = abs_correlation(set.data.data.data() + i * C * S, C, S);
        auto& m = acc[static_cast<std::size_t>(label)];
        for (std::size_t a = 0; a < C; ++a)
            for (std::size_t c = 0; c < C; ++c) {
                double s = 0.0;
                for (const auto& h : att) s += 0.5 * static_cast<double>(h[a * C + c] + h[c * C + a]);
                s /= static_cast<double>(att.size());
                m[a][c] += blend * s + (1.0 - blend) * corr[a][c];
            }
        ++count[static_cast<std::size_t>(label)];
    }
    for (std::size_t k = 0; k < K; ++k) {
        if (count[k] == 0) {
            for (std::size_t a = 0; a < C; ++a) acc[k][a][a] = 1.0;
            continue;
        }
        for (auto& row : acc[k])
            for (auto& v : row) v /= static_cast<double>(count[k]);
        unit_diagonal(acc[k]);
    }
    return acc;
}

} // namespace lel
