#pragma once

// Real FFT on the last axis, backed by FFTW. Spectra are stored as real
// tensors with a trailing (re, im) axis: [..., n/2 + 1, 2].

#include <fftw3.h>

#include <cstring>
#include <map>
#include <memory>
#include <mutex>

#include "autodiff.hpp"

namespace lel::fft {

inline std::size_t half_size(std::size_t n) { return n / 2 + 1; }

namespace detail {

template <class T>
struct Fftw;

template <>
struct Fftw<double> {
    using plan = fftw_plan;
    using complex = fftw_complex;
    static void* alloc(std::size_t bytes) { return fftw_malloc(bytes); }
    static void free(void* p) { fftw_free(p); }
    static plan r2c(int n, double* in, complex* out) { return fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE); }
    static plan c2r(int n, complex* in, double* out) { return fftw_plan_dft_c2r_1d(n, in, out, FFTW_ESTIMATE); }
    static void exec_r2c(plan p, double* in, complex* out) { fftw_execute_dft_r2c(p, in, out); }
    static void exec_c2r(plan p, complex* in, double* out) { fftw_execute_dft_c2r(p, in, out); }
    static void destroy(plan p) { fftw_destroy_plan(p); }
};

template <>
struct Fftw<float> {
    using plan = fftwf_plan;
    using complex = fftwf_complex;
    static void* alloc(std::size_t bytes) { return fftwf_malloc(bytes); }
    static void free(void* p) { fftwf_free(p); }
    static plan r2c(int n, float* in, complex* out) { return fftwf_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE); }
    static plan c2r(int n, complex* in, float* out) { return fftwf_plan_dft_c2r_1d(n, in, out, FFTW_ESTIMATE); }
    static void exec_r2c(plan p, float* in, complex* out) { fftwf_execute_dft_r2c(p, in, out); }
    static void exec_c2r(plan p, complex* in, float* out) { fftwf_execute_dft_c2r(p, in, out); }
    static void destroy(plan p) { fftwf_destroy_plan(p); }
};

// FFTW planning is not thread safe; execution with new-array calls is.
inline std::mutex& planner_mutex()
{
    static std::mutex m;
    return m;
}

/// Plan pair plus aligned scratch for one transform length.
template <class T>
class Engine {
public:
    explicit Engine(std::size_t n) : n_(n)
    {
        using F = Fftw<T>;
        real_ = static_cast<T*>(F::alloc(sizeof(T) * n));
        cplx_ = static_cast<typename F::complex*>(F::alloc(sizeof(typename F::complex) * half_size(n)));
        std::lock_guard lock(planner_mutex());
        fwd_ = F::r2c(static_cast<int>(n), real_, cplx_);
        inv_ = F::c2r(static_cast<int>(n), cplx_, real_);
    }
    ~Engine()
    {
        using F = Fftw<T>;
        {
            std::lock_guard lock(planner_mutex());
            F::destroy(fwd_);
            F::destroy(inv_);
        }
        F::free(real_);
        F::free(cplx_);
    }
    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    /// out[2*(n/2+1)] = unnormalized DFT of x[n].
    void r2c(const T* x, T* out)
    {
        std::memcpy(real_, x, sizeof(T) * n_);
        Fftw<T>::exec_r2c(fwd_, real_, cplx_);
        std::memcpy(out, cplx_, sizeof(T) * 2 * half_size(n_));
    }

    /// Unnormalized Hermitian inverse; imaginary parts of DC/Nyquist ignored.
    void c2r(const T* spec, T* x)
    {
        std::memcpy(cplx_, spec, sizeof(T) * 2 * half_size(n_));
        Fftw<T>::exec_c2r(inv_, cplx_, real_);  // destroys cplx_
        std::memcpy(x, real_, sizeof(T) * n_);
    }

private:
    std::size_t n_;
    T* real_ = nullptr;
    typename Fftw<T>::complex* cplx_ = nullptr;
    typename Fftw<T>::plan fwd_{};
    typename Fftw<T>::plan inv_{};
};

template <class T>
Engine<T>& engine(std::size_t n)
{
    thread_local std::map<std::size_t, std::unique_ptr<Engine<T>>> cache;
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, std::make_unique<Engine<T>>(n)).first;
    return *it->second;
}

} // namespace detail

/// Raw transform of one real row.
template <class T>
void rfft_row(const T* x, std::size_t n, T* out)
{
    detail::engine<T>(n).r2c(x, out);
}

/// Normalized inverse of rfft_row: irfft(rfft(x)) == x.
template <class T>
void irfft_row(const T* spec, std::size_t n, T* x)
{
    detail::engine<T>(n).c2r(spec, x);
    const T inv = T{1} / static_cast<T>(n);
    for (std::size_t t = 0; t < n; ++t) x[t] *= inv;
}

/// x[..., T] -> X[..., T/2+1, 2]
template <class T>
ad::Var<T> rfft(const ad::Var<T>& x)
{
    const std::size_t n = x.value().last();
    if (n < 2) throw ContractError("rfft needs at least 2 samples");
    const std::size_t F = half_size(n);
    const std::size_t rows = x.size() / n;
    Shape s = x.shape();
    s.back() = F;
    s.push_back(2);
    Tensor<T> out(s);
    for (std::size_t r = 0; r < rows; ++r) rfft_row(x.value().data.data() + r * n, n, out.data.data() + r * 2 * F);
    return ad::make_result<T>(std::move(out), {x}, [rows, n, F](ad::Node<T>& self) {
        // Adjoint: dL/dx_t = Re(sum_k G_k e^{+i 2pi k t / n}); evaluated with an
        // unnormalized c2r after halving interior bins (c2r doubles them).
        auto& g = self.parent(0).ensure_grad();
        std::vector<T> spec(2 * F), tmp(n);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* G = self.grad.data() + r * 2 * F;
            for (std::size_t k = 0; k < F; ++k) {
                const bool edge = k == 0 || (n % 2 == 0 && k == F - 1);
                const T f = edge ? T{1} : T{0.5};
                spec[2 * k] = f * G[2 * k];
                spec[2 * k + 1] = edge ? T{0} : f * G[2 * k + 1];
            }
            detail::engine<T>(n).c2r(spec.data(), tmp.data());
            for (std::size_t t = 0; t < n; ++t) g[r * n + t] += tmp[t];
        }
    });
}

/// X[..., F, 2] -> x[..., n], n given explicitly (F must equal n/2+1).
template <class T>
ad::Var<T> irfft(const ad::Var<T>& X, std::size_t n)
{
    const auto& s0 = X.shape();
    if (s0.size() < 2 || s0.back() != 2) throw ContractError("irfft expects a trailing (re, im) axis");
    const std::size_t F = s0[s0.size() - 2];
    if (F != half_size(n)) throw ContractError("irfft: spectrum length does not match output length");
    const std::size_t rows = X.size() / (2 * F);
    Shape s(s0.begin(), s0.end() - 1);
    s.back() = n;
    Tensor<T> out(s);
    for (std::size_t r = 0; r < rows; ++r) irfft_row(X.value().data.data() + r * 2 * F, n, out.data.data() + r * n);
    return ad::make_result<T>(std::move(out), {X}, [rows, n, F](ad::Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        std::vector<T> spec(2 * F);
        const T inv = T{1} / static_cast<T>(n);
        for (std::size_t r = 0; r < rows; ++r) {
            rfft_row(self.grad.data() + r * n, n, spec.data());
            T* dst = g.data() + r * 2 * F;
            for (std::size_t k = 0; k < F; ++k) {
                const bool edge = k == 0 || (n % 2 == 0 && k == F - 1);
                const T f = edge ? inv : T{2} * inv;
                dst[2 * k] += f * spec[2 * k];
                if (!edge) dst[2 * k + 1] += f * spec[2 * k + 1];
            }
        }
    });
}

/// |X| over the trailing (re, im) axis: [..., F, 2] -> [..., F].
/// The gradient at an exact zero is taken as 0.
template <class T>
ad::Var<T> magnitude(const ad::Var<T>& X)
{
    const auto& s0 = X.shape();
    if (s0.empty() || s0.back() != 2) throw ContractError("magnitude expects a trailing (re, im) axis");
    Shape s(s0.begin(), s0.end() - 1);
    Tensor<T> out(s);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::hypot(X.value()[2 * i], X.value()[2 * i + 1]);
    return ad::make_result<T>(std::move(out), {X}, [](ad::Node<T>& self) {
        auto& p = self.parent(0);
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
            const T m = self.value[i];
            if (m > T{0}) {
                g[2 * i] += self.grad[i] * p.value[2 * i] / m;
                g[2 * i + 1] += self.grad[i] * p.value[2 * i + 1] / m;
            }
        }
    });
}

} // namespace lel::fft
