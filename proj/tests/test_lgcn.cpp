#include <gtest/gtest.h>

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

void randomize(LgcnParams<double>& p, std::uint64_t seed)
{
    Rng rng(seed);
    for (auto& v : p.gamma.value().data) v = rng.normal();
    for (auto& v : p.beta.value().data) v = rng.normal();
}

} // namespace

TEST(Lgcn, PositiveGainScaleInvariance)
{
    LgcnParams<double> p(6, 1.3);
    randomize(p, 1);
    auto z = randn({4, 6}, 2);
    const auto a = lgcn_forward(V(z), p).value();
    for (double s : {2.0, 0.125, 1024.0}) {
        for (auto& v : p.gamma.value().data) v *= s;
        const auto b = lgcn_forward(V(z), p).value();
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 4 * std::numeric_limits<double>::epsilon() * (1 + std::abs(a[i])));
        for (auto& v : p.gamma.value().data) v /= s;
    }
}

TEST(Lgcn, ConstantRowMapsToBeta)
{
    LgcnParams<double> p(3, 1.0);
    randomize(p, 3);
    const auto out = lgcn_forward(V(Tensor<double>({1, 3}, 4.2)), p).value();
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(out[j], p.beta.value()[j]);
}

TEST(Lgcn, HandEvaluatedTwoFeatures)
{
    LgcnParams<double> p(2, 1.0);
    p.gamma.value().data = {1.0, 0.0};
    p.beta.value().data = {0.25, -0.5};
    // Z = (3, 1): mu 2, sigma 1 -> Z~ = (1, -1) / (1 + 1e-6).
    const auto out = lgcn_forward(V(Tensor<double>({1, 2}, std::vector<double>{3.0, 1.0})), p).value();
    EXPECT_NEAR(out[0], 1.0 / (1.0 + 1e-6) + 0.25, 1e-15);
    EXPECT_DOUBLE_EQ(out[1], -0.5);
}

TEST(Lgcn, ZeroGainRejectedAndRepaired)
{
    LgcnParams<double> p(3, 1.0);
    std::fill(p.gamma.value().data.begin(), p.gamma.value().data.end(), 0.0);
    EXPECT_THROW(lgcn_forward(V(randn({2, 3}, 4)), p), ParameterError);
    EXPECT_TRUE(p.repair_gain());
    EXPECT_NO_THROW(lgcn_forward(V(randn({2, 3}, 4)), p));
    EXPECT_THROW((LgcnParams<double>(3, 0.0)), ParameterError);
}

TEST(Lgcn, AffineBoundHoldsWithEqualityAlongGamma)
{
    const double L = 1.7;
    LgcnParams<double> p(5, L);
    randomize(p, 5);
    Rng rng(6);
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        auto a = randn({1, 5}, 100 + i), b = randn({1, 5}, 400 + i);
        auto ya = lgcn_affine(V(a), p).value(), yb = lgcn_affine(V(b), p).value();
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            num += (ya[j] - yb[j]) * (ya[j] - yb[j]);
            den += (a[j] - b[j]) * (a[j] - b[j]);
        }
        worst = std::max(worst, std::sqrt(num / den));
    }
    EXPECT_LE(worst, L * (1 + 1e-12));
    // Witness: difference on the coordinate with the largest |gamma|.
    std::size_t jmax = 0;
    double gn = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
        gn += p.gamma.value()[j] * p.gamma.value()[j];
        if (std::abs(p.gamma.value()[j]) > std::abs(p.gamma.value()[jmax])) jmax = j;
    }
    Tensor<double> e({1, 5});
    e[jmax] = 1.0;
    const auto y1 = lgcn_affine(V(e), p).value(), y0 = lgcn_affine(V(Tensor<double>({1, 5})), p).value();
    EXPECT_NEAR(std::abs(y1[jmax] - y0[jmax]), L * std::abs(p.gamma.value()[jmax]) / std::sqrt(gn), 1e-14);

    // A one-hot gain attains L exactly on its coordinate.
    p.gamma.value().data = {0.0, 0.0, 0.0, 0.0, 3.0};
    Tensor<double> e4({1, 5});
    e4[4] = 1.0;
    const auto y4 = lgcn_affine(V(e4), p).value(), yz = lgcn_affine(V(Tensor<double>({1, 5})), p).value();
    EXPECT_NEAR(std::abs(y4[4] - yz[4]), L, 1e-14);
}

TEST(Lgcn, BatchStatisticsMode)
{
    LgcnParams<double> p(3, 1.0, LgcnStats::batch);
    auto z = randn({8, 3}, 7);
    const auto out = lgcn_normalize(V(z), p).value();
    for (std::size_t j = 0; j < 3; ++j) {
        double m = 0.0;
        for (std::size_t b = 0; b < 8; ++b) m += out[b * 3 + j];
        EXPECT_NEAR(m, 0.0, 1e-12);
    }
    EXPECT_EQ(parse_lgcn_stats("batch"), LgcnStats::batch);
    EXPECT_THROW(parse_lgcn_stats("group"), ContractError);
}

TEST(Lgcn, ShapeErrors)
{
    LgcnParams<double> p(3, 1.0);
    EXPECT_THROW(lgcn_forward(V(randn({2, 4}, 8)), p), ContractError);
    EXPECT_THROW(lgcn_forward(V(randn({2, 3, 1}, 8)), p), ContractError);
}

TEST(Lgcn, GradientCheck)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        for (auto stats : {LgcnStats::per_sample, LgcnStats::batch}) {
            LgcnParams<double> p(6, 1.0 + 0.2 * static_cast<double>(seed), stats);
            randomize(p, 20 + seed);
            V z(randn({4, 6}, 30 + seed), true);
            auto r = grad_check("lgcn", [&] { return lgcn_forward(z, p); },
                                {{"z", z}, {"gamma", p.gamma.var}, {"beta", p.beta.var}});
            EXPECT_TRUE(r.pass) << r.max_residual << " at " << r.worst;
        }
    }
}
