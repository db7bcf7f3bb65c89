#include <gtest/gtest.h>

#include <complex>
#include <numbers>

#include <lel/verification.hpp>

using namespace lel;
using V = ad::Var<double>;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed)
{
    Rng rng(seed);
    Tensor<double> t(std::move(s));
    for (auto& x : t.data) x = rng.normal();
    return t;
}

// O(n^2) reference DFT of one real row.
std::vector<std::complex<double>> naive_dft(const std::vector<double>& x)
{
    const std::size_t n = x.size();
    std::vector<std::complex<double>> out(n / 2 + 1);
    for (std::size_t k = 0; k < out.size(); ++k)
        for (std::size_t t = 0; t < n; ++t)
            out[k] += x[t] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * t) / static_cast<double>(n));
    return out;
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b)
{
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / den);
}

} // namespace

TEST(Fft, RoundTripFloat64)
{
    for (std::size_t n : {2u, 7u, 64u, 500u, 512u, 1000u}) {
        V x(randn({3, 2, n}, n));
        auto back = fft::irfft(fft::rfft(x), n);
        EXPECT_LT(rel_err(back.value().data, x.value().data), 1e-10) << "n=" << n;
    }
}

TEST(Fft, MatchesNaiveDft)
{
    for (std::size_t n : {9u, 16u, 33u}) {
        auto x = randn({n}, 100 + n);
        auto X = fft::rfft(V(x)).value();
        ASSERT_EQ(X.shape, (Shape{n / 2 + 1, 2}));
        const auto ref = naive_dft(x.data);
        for (std::size_t k = 0; k < ref.size(); ++k) {
            EXPECT_NEAR(X[2 * k], ref[k].real(), 1e-10);
            EXPECT_NEAR(X[2 * k + 1], ref[k].imag(), 1e-10);
        }
    }
}

TEST(Fft, ConstantSignalIsDcOnly)
{
    const std::size_t n = 64;
    V x(Tensor<double>({n}, 1.5));
    auto X = fft::rfft(x).value();
    EXPECT_NEAR(X[0], 1.5 * n, 1e-12);
    for (std::size_t i = 1; i < X.size(); ++i) EXPECT_NEAR(X[i], 0.0, 1e-12);
}

TEST(Fft, BinAlignedCosineConcentrates)
{
    const std::size_t n = 200, k0 = 13;
    Tensor<double> x({n});
    for (std::size_t t = 0; t < n; ++t) x[t] = std::cos(2.0 * std::numbers::pi * static_cast<double>(k0 * t) / n);
    auto mag = fft::magnitude(fft::rfft(V(x))).value();
    for (std::size_t k = 0; k < mag.size(); ++k) EXPECT_NEAR(mag[k], k == k0 ? n / 2.0 : 0.0, 1e-9);
}

TEST(Fft, RejectsShortAndMismatchedInputs)
{
    EXPECT_THROW(fft::rfft(V(Tensor<double>({1}))), ContractError);
    EXPECT_THROW(fft::irfft(V(Tensor<double>({5, 2})), 12), ContractError);
}

TEST(Fft, GradientsMatchFiniteDifferences)
{
    V x(randn({2, 3, 16}, 5), true);
    auto r = grad_check("rfft", [&] { return fft::rfft(x); }, {{"x", x}});
    EXPECT_TRUE(r.pass) << r.max_residual;
    V X(randn({2, 9, 2}, 6), true);
    auto r2 = grad_check("irfft", [&] { return fft::irfft(X, 16); }, {{"X", X}});
    EXPECT_TRUE(r2.pass) << r2.max_residual;
    V Y(randn({2, 9, 2}, 7), true);
    auto r3 = grad_check("magnitude", [&] { return fft::magnitude(Y); }, {{"Y", Y}});
    EXPECT_TRUE(r3.pass) << r3.max_residual;
}
