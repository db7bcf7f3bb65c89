#include <gtest/gtest.h>

#include <lel/verification.hpp>

using namespace lel;
using V = ad::Var<double>;

namespace {

Tensor<double> randn(Shape s, std::uint64_t seed, double scale = 1.0)
{
    Rng rng(seed);
    Tensor<double> t(std::move(s));
    for (auto& x : t.data) x = scale * rng.normal();
    return t;
}

} // namespace

TEST(Lgca, ClampSoftmaxRowsSumToOne)
{
    for (double scale : {0.1, 10.0, 1e6}) {
        auto s = clamp_softmax(V(randn({3, 7, 7}, 1, scale)), 2.0).value();
        for (std::size_t r = 0; r < 21; ++r) {
            double sum = 0.0;
            for (std::size_t j = 0; j < 7; ++j) {
                EXPECT_GT(s[r * 7 + j], 0.0);
                sum += s[r * 7 + j];
            }
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Lgca, ClampBoundsTheSpread)
{
    // With scores in [-c, c] no weight can exceed e^{2c} times another.
    const double c = 1.5;
    auto s = clamp_softmax(V(randn({1, 5, 5}, 2, 100.0)), c).value();
    for (std::size_t r = 0; r < 5; ++r) {
        const auto* row = s.data.data() + r * 5;
        const double mx = *std::max_element(row, row + 5), mn = *std::min_element(row, row + 5);
        EXPECT_LE(mx / mn, std::exp(2 * c) * (1 + 1e-12));
    }
    EXPECT_THROW(clamp_softmax(V(randn({1, 2, 2}, 3)), 0.0), ParameterError);
}

TEST(Lgca, ScoresAreScaledDotProducts)
{
    auto q = randn({1, 2, 4}, 4), k = randn({1, 3, 4}, 5);
    auto s = attention_scores(V(q), V(k)).value();
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double d = 0.0;
            for (std::size_t h = 0; h < 4; ++h) d += q[i * 4 + h] * k[j * 4 + h];
            EXPECT_NEAR(s[i * 3 + j], d / 2.0, 1e-14);
        }
}

TEST(Lgca, ShapeAndHeadErrors)
{
    Rng rng(1);
    EXPECT_THROW((LgcaParams<double>(10, 3, 1.0, 1.0, 0.3, rng)), ContractError);
    EXPECT_THROW((LgcaParams<double>(8, 2, 0.0, 1.0, 0.3, rng)), ParameterError);
    LgcaParams<double> p(8, 2, 1.0, 1.0, 0.3, rng);
    EXPECT_THROW(lgca_forward(V(randn({2, 3, 6}, 6)), p, false), ContractError);
    EXPECT_THROW(lgca_forward(V(randn({2, 3, 8}, 6)), p, true, nullptr), ContractError);
}

TEST(Lgca, OutputProjectionIsConstrained)
{
    Rng rng(2);
    LgcaParams<double> p(16, 4, 1.0, 0.8, 0.3, rng);
    EXPECT_LE(power_iteration(p.output.weight.value(), 2000, 1e-12).sigma, 0.8 * (1 + 1e-6));
    EXPECT_EQ(p.output.weight.constraint.str(), "spectral<=0.8");
    EXPECT_FALSE(p.query[0].weight.constraint.constrained());
}

TEST(Lgca, EvalIsDeterministicAndDropoutIsSeeded)
{
    Rng rng(3);
    LgcaParams<double> p(8, 2, 1.0, 1.0, 0.5, rng);
    auto x = randn({2, 5, 8}, 7);
    EXPECT_EQ(lgca_forward(V(x), p, false).value().data, lgca_forward(V(x), p, false).value().data);
    Rng a(9), b(9), c(10);
    const auto ya = lgca_forward(V(x), p, true, &a).value().data;
    EXPECT_EQ(ya, lgca_forward(V(x), p, true, &b).value().data);
    EXPECT_NE(ya, lgca_forward(V(x), p, true, &c).value().data);
}

TEST(Lgca, AttentionCaptureHasOneMatrixPerHead)
{
    Rng rng(4);
    LgcaParams<double> p(8, 4, 1.0, 1.0, 0.3, rng);
    std::vector<Tensor<double>> att;
    ForwardContext<double> ctx{false, nullptr, &att};
    (void)lgca_forward(V(randn({2, 6, 8}, 8)), p, ctx);
    ASSERT_EQ(att.size(), 4u);
    for (const auto& a : att) EXPECT_EQ(a.shape, (Shape{2, 6, 6}));
}

TEST(Lgca, GradientCheck)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        LgcaParams<double> p(8, 2, 0.5 + 0.25 * static_cast<double>(seed), 1.0, 0.3, rng);
        V x(randn({2, 4, 8}, 40 + seed, 2.0), true);
        ParamRefs<double> refs;
        p.collect(refs, "lgca");
        std::vector<std::pair<std::string, V>> leaves{{"x", x}};
        for (auto& [n, q] : refs) leaves.push_back({n, q->var});
        auto r = grad_check("lgca", [&] { return lgca_forward(x, p, false); }, leaves);
        EXPECT_TRUE(r.pass) << r.max_residual << " at " << r.worst;
        EXPECT_GT(r.checked, 0u);
    }
}
