#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace lel {

struct PowerIterationResult {
    double sigma = 0.0;
    bool converged = false;
    int iterations = 0;
    double residual = 0.0;      ///< relative change of the last update
    std::vector<double> right;  ///< dominant right singular vector estimate
};

/// Largest singular value of a [rows x cols] matrix by power iteration on
/// W^T W. The Rayleigh quotient ||W v||^2 is tracked until its square root
/// changes by less than `tol` (relative). A non-empty `warm` start vector
/// replaces the seeded random start.
template <class T>
PowerIterationResult power_iteration(const Tensor<T>& W, int max_iters = 200, double tol = 1e-8,
                                     std::uint64_t seed = 0x5eed, const std::vector<double>& warm = {})
{
    if (W.rank() != 2) throw ContractError("power_iteration: expected a matrix, got " + shape_str(W.shape));
    const std::size_t R = W.dim(0), C = W.dim(1);
    for (auto v : W.data)
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("power_iteration: non-finite weight");

    std::vector<double> v(C), u(R), w(C);
    if (warm.size() == C) {
        v = warm;
    } else {
        Rng rng(seed);
        for (auto& x : v) x = rng.normal();
    }
    auto normalize = [](std::vector<double>& x) {
        double s = 0.0;
        for (auto a : x) s += a * a;
        s = std::sqrt(s);
        if (s > 0.0)
            for (auto& a : x) a /= s;
        return s;
    };
    if (normalize(v) == 0.0) {
        v.assign(C, 0.0);
        v[0] = 1.0;
    }

    PowerIterationResult res;
    double prev = -1.0;
    for (int it = 1; it <= max_iters; ++it) {
        for (std::size_t r = 0; r < R; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) acc += static_cast<double>(W[r * C + c]) * v[c];
            u[r] = acc;
        }
        double uu = 0.0;
        for (auto a : u) uu += a * a;
        const double sigma = std::sqrt(uu);
        std::fill(w.begin(), w.end(), 0.0);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) w[c] += static_cast<double>(W[r * C + c]) * u[r];
        res.iterations = it;
        res.sigma = sigma;
        if (sigma == 0.0 || normalize(w) == 0.0) {
            // v lies in the null space: either W == 0 or a restart is needed.
            bool zero = true;
            for (auto x : W.data) zero = zero && x == T{0};
            if (zero) {
                res.converged = true;
                res.residual = 0.0;
                res.right = v;
                return res;
            }
            Rng rng(seed + static_cast<std::uint64_t>(it));
            for (auto& x : v) x = rng.normal();
            normalize(v);
            prev = -1.0;
            continue;
        }
        v = w;
        if (prev > 0.0) {
            res.residual = std::abs(sigma - prev) / sigma;
            if (res.residual < tol) {
                res.converged = true;
                break;
            }
        }
        prev = sigma;
    }
    // Final Rayleigh value with the updated vector.
    double uu = 0.0;
    for (std::size_t r = 0; r < R; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += static_cast<double>(W[r * C + c]) * v[c];
        uu += acc * acc;
    }
    res.sigma = std::max(res.sigma, std::sqrt(uu));
    res.right = std::move(v);
    return res;
}

struct ProjectionResult {
    double sigma_before = 0.0;
    bool scaled = false;
    int iterations = 0;
    std::vector<double> right;
};

/// Projects W onto {sigma_max <= L} by uniform rescaling:
/// W <- W * L / sigma_max(W) when sigma_max(W) > L, untouched otherwise.
/// Power iteration restarts from its last vector up to `rounds` times
/// (clustered top singular values converge slowly); NumericError if it
/// still has not converged.
template <class T>
ProjectionResult spectral_norm_project(Tensor<T>& W, double L, int iters = 200, double tol = 1e-8,
                                       std::uint64_t seed = 0x5eed, const std::vector<double>& warm = {},
                                       int rounds = 10)
{
    if (!(L > 0.0)) throw ParameterError("spectral_norm_project: bound must be positive");
    auto pi = power_iteration(W, iters, tol, seed, warm);
    int total = pi.iterations;
    for (int r = 1; r < rounds && !pi.converged; ++r) {
        pi = power_iteration(W, iters, tol, seed, pi.right);
        total += pi.iterations;
    }
    if (!pi.converged) {
        std::ostringstream os;
        os << "spectral_norm_project: power iteration did not converge in " << total
           << " iterations (last relative change " << pi.residual << ", estimate " << pi.sigma << ")";
        throw NumericError(os.str());
    }
    ProjectionResult out{pi.sigma, false, total, std::move(pi.right)};
    if (pi.sigma > L) {
        const double f = L / pi.sigma;
        for (auto& x : W.data) x = static_cast<T>(static_cast<double>(x) * f);
        out.scaled = true;
    }
    return out;
}

} // namespace lel
