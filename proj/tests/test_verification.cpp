#include <gtest/gtest.h>

#include <Eigen/Dense>

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

double svd_sigma(const Tensor<double>& W)
{
    Eigen::MatrixXd M(W.dim(0), W.dim(1));
    for (std::size_t r = 0; r < W.dim(0); ++r)
        for (std::size_t c = 0; c < W.dim(1); ++c) M(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = W[r * W.dim(1) + c];
    return Eigen::JacobiSVD<Eigen::MatrixXd>(M).singularValues()(0);
}

// Row-wise x W for x [B, n].
BatchMap matmul(const Tensor<double>& W)
{
    return [W](const Tensor<double>& x) {
        const std::size_t B = x.dim(0), n = W.dim(0), m = W.dim(1);
        Tensor<double> y({B, m});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) y[b * m + j] += x[b * n + i] * W[i * m + j];
        return y;
    };
}

ModelConfig small_config()
{
    ModelConfig c;
    c.channels = 4;
    c.samples = 128;
    c.classes = 3;
    c.embed_dim = 8;
    c.heads = 2;
    c.mlp_hidden = 8;
    c.tokens = 4;
    return c;
}

} // namespace

TEST(PowerIteration, DiagonalAndIdentity)
{
    EXPECT_NEAR(power_iteration(Tensor<double>({2, 2}, std::vector<double>{3, 0, 0, 1})).sigma, 3.0, 1e-8);
    Tensor<double> I({4, 4});
    for (std::size_t i = 0; i < 4; ++i) I[i * 5] = 1.0;
    EXPECT_NEAR(power_iteration(I).sigma, 1.0, 1e-12);
    auto z = power_iteration(Tensor<double>({3, 2}));
    EXPECT_EQ(z.sigma, 0.0);
    EXPECT_TRUE(z.converged);
}

TEST(PowerIteration, MatchesSvdOnRandomMatrices)
{
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto W = randn({5, 5}, 100 + s);
        const auto pi = power_iteration(W, 5000, 1e-14);
        EXPECT_NEAR(pi.sigma, svd_sigma(W), 1e-6 * svd_sigma(W)) << "seed " << s;
    }
    for (auto shape : {Shape{3, 8}, Shape{8, 2}, Shape{1, 6}}) {
        const auto W = randn(shape, 7);
        EXPECT_NEAR(power_iteration(W, 5000, 1e-14).sigma, svd_sigma(W), 1e-6 * svd_sigma(W));
    }
    EXPECT_THROW(power_iteration(Tensor<double>({2, 2, 2})), ContractError);
}

TEST(Projection, ScalesDownAndIsIdempotent)
{
    auto W = randn({6, 4}, 3);
    const double before = svd_sigma(W);
    ASSERT_GT(before, 1.0);
    auto r = spectral_norm_project(W, 1.0);
    EXPECT_TRUE(r.scaled);
    EXPECT_NEAR(svd_sigma(W), 1.0, 1e-6);
    const auto once = W;
    auto r2 = spectral_norm_project(W, 1.0);
    EXPECT_FALSE(r2.scaled);
    EXPECT_EQ(W.data, once.data);
    EXPECT_THROW(spectral_norm_project(W, 0.0), ParameterError);
}

TEST(EmpiricalLipschitz, ConstantMapIsZero)
{
    auto est = empirical_lipschitz([](const Tensor<double>& x) { return Tensor<double>({x.dim(0), 2}, 3.0); },
                                   normal_sampler({5}), 300);
    EXPECT_EQ(est.L_hat, 0.0);
    EXPECT_EQ(est.pairs, 300u);
}

TEST(EmpiricalLipschitz, LinearMapApproachesSigmaFromBelow)
{
    const auto W = randn({6, 6}, 9);
    const double sigma = svd_sigma(W);
    auto est = empirical_lipschitz(matmul(W), normal_sampler({6}), 10000);
    EXPECT_LE(est.L_hat, sigma * (1 + 1e-9));
    EXPECT_GE(est.L_hat, 0.95 * sigma);
}

TEST(EmpiricalLipschitz, NonFiniteOutputIsNumericError)
{
    EXPECT_THROW(empirical_lipschitz(
                     [](const Tensor<double>& x) { return Tensor<double>(x.shape, std::numeric_limits<double>::quiet_NaN()); },
                     normal_sampler({2}), 10),
                 NumericError);
}

TEST(ComposeBound, ProductAndUndeclared)
{
    EXPECT_DOUBLE_EQ(compose_bound({2.0, 3.0}), 6.0);
    EXPECT_DOUBLE_EQ(compose_bound({}), 1.0);
    EXPECT_THROW(compose_bound({2.0, std::nullopt}), ContractError);
}

TEST(ProbeBranch, DeclaredStagesHoldAndCompositionIsBound)
{
    LelModel<double> m(small_config());
    for (auto id : kBranches) {
        auto rep = probe_branch(m.branch(id), normal_sampler({4, 128}), 200);
        EXPECT_TRUE(rep.pass) << branch_name(id);
        EXPECT_EQ(rep.pairs, 200u);
        for (const auto& s : rep.stages) {
            EXPECT_EQ(s.pairs, 200u);
            if (s.kind == BoundKind::declared) {
                EXPECT_LE(s.measured, s.declared * (1 + kBoundTol)) << branch_name(id) << "/" << s.name;
            }
        }
        EXPECT_LE(rep.end_to_end, rep.composed * (1 + kBoundTol));
    }
}

TEST(GradCheck, DetectsAWrongGradient)
{
    V a(randn({4}, 11), true);
    auto wrong = [&] {
        Tensor<double> y = a.value();
        for (auto& v : y.data) v = v * v;
        return ad::make_result<double>(std::move(y), {a}, [](ad::Node<double>& self) {
            auto& g = self.parent(0).ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.parent(0).value[i];  // missing 2x
        });
    };
    auto r = grad_check("wrong", wrong, {{"a", a}});
    EXPECT_FALSE(r.pass);
    EXPECT_NEAR(r.max_residual, 0.5, 1e-6);
}

TEST(VerifyModel, FreshModelPassesWithoutGradChecks)
{
    LelModel<double> m(small_config());
    VerifyOptions opt;
    opt.pairs = 100;
    opt.grad_checks = false;
    const auto rep = verify_model(m, normal_sampler({4, 128}), opt);
    EXPECT_TRUE(rep.pass()) << rep.table();
    EXPECT_EQ(rep.branches.size(), 4u);
    EXPECT_FALSE(rep.weights.empty());
    double mx = 0.0;
    for (const auto& b : rep.branches) mx = std::max(mx, b.composed);
    EXPECT_EQ(rep.fused_bound, mx);
}

TEST(VerifyModel, InflatedWeightFails)
{
    LelModel<double> m(small_config());
    auto params = m.parameters();
    for (auto& [n, p] : params)
        if (p->constraint.constrained()) {
            for (auto& v : p->value().data) v *= 5.0;
            break;
        }
    bool any_fail = false;
    for (const auto& w : weight_norms(m)) any_fail = any_fail || !w.pass;
    EXPECT_TRUE(any_fail);
}

TEST(CompositeLoss, GradientCheckAgainstStopGradientReference)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto cfg = small_config();
        cfg.seed = 200 + seed;
        LelModel<double> m(cfg);
        Rng rng(seed);
        for (auto& v : m.alpha.value().data) v = rng.normal();
        V x(randn({2, 4, 128}, 300 + seed), true);
        std::vector<std::pair<std::string, V>> leaves{{"x", x}};
        for (auto& [n, p] : m.parameters()) leaves.push_back({n, p->var});
        GradCheckOptions opt;
        opt.max_coords = 8;
        auto r = grad_check_composite_loss(m, x, {0, 2}, leaves, opt);
        EXPECT_TRUE(r.pass) << r.max_residual << " at " << r.worst;
    }
}
