#include <gtest/gtest.h>

#include <lel/verification.hpp>

using namespace lel;
using V = ad::Var<double>;

namespace {

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
    c.seed = 5;
    return c;
}

Tensor<double> randn(Shape s, std::uint64_t seed)
{
    Rng rng(seed);
    Tensor<double> t(std::move(s));
    for (auto& x : t.data) x = rng.normal();
    return t;
}

V simplex_rows(std::size_t B, std::size_t K, std::uint64_t seed)
{
    return ad::softmax_last(V(randn({B, K}, seed)));
}

} // namespace

TEST(Ensemble, BranchPosteriorsAreSimplexRows)
{
    LelModel<double> m(small_config());
    auto out = m.forward(V(randn({5, 4, 128}, 1)));
    ASSERT_EQ(out.branch_probs.size(), 4u);
    for (const auto& p : out.branch_probs) {
        EXPECT_EQ(p.shape(), (Shape{5, 3}));
        EXPECT_NO_THROW(require_simplex(p.value(), "branch", 1e-12));
    }
    EXPECT_NO_THROW(require_simplex(out.fused.value(), "fused", 1e-12));
}

TEST(Ensemble, ZeroHeadsGiveUniformPosteriors)
{
    LelModel<double> m(small_config());
    for (auto id : kBranches) m.branch(id).zero_head();
    auto out = m.forward(V(randn({2, 4, 128}, 2)));
    for (const auto& p : out.branch_probs)
        for (auto v : p.value().data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Ensemble, FusionWeights)
{
    auto w0 = fusion_weights(Tensor<double>({4}));
    for (auto w : w0) EXPECT_DOUBLE_EQ(w, 0.25);
    auto w1 = fusion_weights(Tensor<double>({4}, std::vector<double>{std::log(2.0), 0.0, 0.0, 0.0}));
    EXPECT_NEAR(w1[0], 0.4, 1e-15);
    for (int i = 1; i < 4; ++i) EXPECT_NEAR(w1[static_cast<std::size_t>(i)], 0.2, 1e-15);
    auto big = fusion_weights(Tensor<double>({4}, std::vector<double>{1000.0, 0.0, 0.0, 0.0}));
    EXPECT_NEAR(big[0], 1.0, 1e-15);
}

TEST(Ensemble, FuseIsConvexCombination)
{
    std::vector<V> probs;
    for (std::uint64_t i = 0; i < 4; ++i) probs.push_back(simplex_rows(6, 3, 10 + i));
    V alpha(randn({4}, 3), true);
    const auto f = fuse(alpha, probs).value();
    const auto w = fusion_weights(alpha.value());
    for (std::size_t j = 0; j < f.size(); ++j) {
        double expect = 0.0, lo = 1.0, hi = 0.0;
        for (std::size_t i = 0; i < 4; ++i) {
            expect += w[i] * probs[i].value()[j];
            lo = std::min(lo, probs[i].value()[j]);
            hi = std::max(hi, probs[i].value()[j]);
        }
        EXPECT_NEAR(f[j], expect, 1e-15);
        EXPECT_GE(f[j], lo - 1e-15);
        EXPECT_LE(f[j], hi + 1e-15);
    }
}

TEST(Ensemble, FusePermutationEquivariance)
{
    std::vector<V> probs;
    for (std::uint64_t i = 0; i < 4; ++i) probs.push_back(simplex_rows(3, 4, 20 + i));
    auto a = randn({4}, 4);
    const std::vector<std::size_t> perm{3, 1, 0, 2};
    std::vector<V> pp;
    Tensor<double> ap({4});
    for (std::size_t i = 0; i < 4; ++i) {
        pp.push_back(probs[perm[i]]);
        ap[i] = a[perm[i]];
    }
    const auto f = fuse(V(a), probs).value(), fp = fuse(V(ap), pp).value();
    for (std::size_t j = 0; j < f.size(); ++j) EXPECT_NEAR(f[j], fp[j], 1e-15);
}

TEST(Ensemble, FuseGradientReachesAlphaOnly)
{
    std::vector<V> probs;
    for (std::uint64_t i = 0; i < 4; ++i) {
        V logits(randn({2, 3}, 30 + i), true);
        probs.push_back(ad::softmax_last(logits));
    }
    V alpha(randn({4}, 5), true);
    auto loss = ad::nll_loss(fuse(alpha, probs), {0, 2});
    loss.backward();
    for (auto& p : probs)
        for (auto g : p.grad()) EXPECT_EQ(g, 0.0);
    double gs = 0.0;
    for (auto g : alpha.grad()) gs += std::abs(g);
    EXPECT_GT(gs, 0.0);

    auto r = grad_check("fuse", [&] { return fuse(alpha, probs); }, {{"alpha", alpha}});
    EXPECT_TRUE(r.pass) << r.max_residual;
}

TEST(Ensemble, NonSimplexErrorNamesBranch)
{
    std::vector<V> probs;
    for (std::uint64_t i = 0; i < 4; ++i) probs.push_back(simplex_rows(2, 3, 40 + i));
    probs[2] = V(Tensor<double>({2, 3}, 0.5));
    try {
        fuse(V(Tensor<double>({4})), probs);
        FAIL() << "expected ContractError";
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("channel_mixer"), std::string::npos) << e.what();
    }
    EXPECT_THROW(fuse(V(Tensor<double>({3})), probs), ContractError);
}

TEST(Ensemble, InputShapeChecked)
{
    LelModel<double> m(small_config());
    EXPECT_THROW(m.forward(V(randn({2, 3, 128}, 6))), ContractError);
    EXPECT_THROW(m.forward(V(randn({2, 4, 100}, 6))), ContractError);
    EXPECT_THROW(parse_branch("nope"), ContractError);
    EXPECT_EQ(parse_branch("band_magnitude"), BranchId::band_magnitude);
}

TEST(Ensemble, ConstructionIsSeeded)
{
    LelModel<double> a(small_config()), b(small_config());
    auto pa = a.parameters(), pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i].first, pb[i].first);
        EXPECT_EQ(pa[i].second->value().data, pb[i].second->value().data);
    }
    EXPECT_EQ(pa.back().first, "fusion/alpha");
}

TEST(Ensemble, ConstrainedWeightsStartInsideTheirBall)
{
    auto cfg = small_config();
    cfg.budget = LipschitzBudget::uniform(0.5);
    LelModel<double> m(cfg);
    for (const auto& w : weight_norms(m)) EXPECT_TRUE(w.pass) << w.name << " sigma " << w.sigma;
}

TEST(Ensemble, StagesComposeToForward)
{
    LelModel<double> m(small_config());
    auto x = randn({2, 4, 128}, 7);
    for (auto id : kBranches) {
        ForwardContext<double> ctx;
        const auto direct = m.branch_forward(id, V(x), ctx).value();
        const auto staged = run_stages(m.branch(id).stages(), V(x), ctx).value();
        EXPECT_EQ(direct.data, staged.data) << branch_name(id);
    }
}

TEST(Ensemble, CompositeLossOfUniformPredictions)
{
    std::vector<V> probs(4, V(Tensor<double>({3, 5}, 0.2)));
    ModelOutput<double> out{probs, fuse(V(Tensor<double>({4})), probs)};
    // CE(uniform) = ln 5 for the fused term and each of four branch terms.
    EXPECT_NEAR(composite_loss(out, {0, 1, 4}, 0.25).item(), 2.0 * std::log(5.0), 1e-12);
}

TEST(Ensemble, BranchGradientChecks)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto cfg = small_config();
        cfg.seed = 100 + seed;
        LelModel<double> m(cfg);
        V x(randn({2, 4, 128}, 50 + seed), true);
        for (auto id : kBranches) {
            std::vector<std::pair<std::string, V>> leaves{{"x", x}};
            ParamRefs<double> refs;
            m.branch(id).collect(refs);
            for (auto& [n, p] : refs) leaves.push_back({n, p->var});
            GradCheckOptions opt;
            opt.max_coords = 16;
            auto r = grad_check(
                branch_name(id),
                [&] {
                    ForwardContext<double> ctx;
                    return m.branch_forward(id, x, ctx);
                },
                leaves, opt);
            EXPECT_TRUE(r.pass) << branch_name(id) << " " << r.max_residual << " at " << r.worst;
        }
    }
}
