#pragma once

// Four heterogeneous branches, each a chain of labeled stages, fused by a
// softmax over learnable logits alpha. Stages carry their Lipschitz label:
// a declared constant (projected weights, fixed maps) or "measured"
// (data-dependent nonlinear maps whose constant is estimated empirically).

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "budget.hpp"
#include "data_model.hpp"
#include "lgca.hpp"
#include "lgcbe.hpp"
#include "lgcn.hpp"

namespace lel {

enum class BranchId { global_feature = 0, channel_energy = 1, channel_mixer = 2, band_magnitude = 3 };

inline constexpr std::array<BranchId, 4> kBranches = {BranchId::global_feature, BranchId::channel_energy,
                                                      BranchId::channel_mixer, BranchId::band_magnitude};

inline const char* branch_name(BranchId id)
{
    switch (id) {
    case BranchId::global_feature: return "global_feature";
    case BranchId::channel_energy: return "channel_energy";
    case BranchId::channel_mixer: return "channel_mixer";
    case BranchId::band_magnitude: return "band_magnitude";
    }
    return "?";
}

inline BranchId parse_branch(const std::string& s)
{
    for (auto id : kBranches)
        if (s == branch_name(id)) return id;
    throw ContractError("unknown branch '" + s + "'");
}

struct ModelConfig {
    std::size_t channels = 8;
    std::size_t samples = 512;
    int classes = 5;
    double sampling_rate = 200.0;
    LipschitzBudget budget;
    std::size_t embed_dim = 32;
    std::size_t heads = 4;
    std::size_t mlp_hidden = 64;
    std::size_t tokens = 16;  ///< time patches of the global feature branch
    double dropout = 0.3;
    double log_floor = 1e-6;
    LgcnStats lgcn_stats = LgcnStats::per_sample;
    bool constrain_qkv = false;
    std::uint64_t seed = 1;

    std::vector<BinRange> bins() const { return make_all_band_bins(default_bands(), samples, sampling_rate); }
    std::size_t token_count() const { return std::min(tokens, samples); }
    std::size_t patch_length() const { return samples / token_count(); }

    void validate() const
    {
        budget.validate();
        if (channels < 1 || samples < 2 || classes < 2) throw ContractError("model: need C >= 1, T >= 2, K >= 2");
        if (tokens < 1) throw ContractError("model: tokens must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw ContractError("model: dropout must be in [0, 1)");
        if (!(log_floor > 0.0)) throw ContractError("model: log_floor must be positive");
        (void)bins();
    }
};

enum class BoundKind { declared, measured };

template <class T>
struct Stage {
    std::string name;
    BoundKind kind = BoundKind::declared;
    double declared = 1.0;
    std::function<ad::Var<T>(const ad::Var<T>&, ForwardContext<T>&)> apply;
};

template <class T>
using StageList = std::vector<Stage<T>>;

template <class T>
ad::Var<T> run_stages(const StageList<T>& stages, const ad::Var<T>& x, ForwardContext<T>& ctx)
{
    ad::Var<T> h = x;
    for (const auto& s : stages) h = s.apply(h, ctx);
    return h;
}

/// [B, C, S] -> [B, P, C*len]; token p holds samples [p*len, (p+1)*len) of
/// every channel. Trailing samples beyond P*len are dropped.
template <class T>
ad::Var<T> patchify(const ad::Var<T>& x, std::size_t P, std::size_t len)
{
    if (x.value().rank() != 3) throw ContractError("patchify expects [B, C, S]");
    const std::size_t B = x.shape()[0], C = x.shape()[1], S = x.shape()[2];
    if (P * len > S) throw ContractError("patchify: patches exceed the window");
    Tensor<T> out({B, P, C * len});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t j = 0; j < len; ++j)
                    out[((b * P + p) * C + c) * len + j] = x.value()[(b * C + c) * S + p * len + j];
    return ad::make_result<T>(std::move(out), {x}, [B, C, S, P, len](ad::Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < P; ++p)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t j = 0; j < len; ++j)
                        g[(b * C + c) * S + p * len + j] += self.grad[((b * P + p) * C + c) * len + j];
    });
}

template <class T>
class Branch {
public:
    virtual ~Branch() = default;
    virtual BranchId id() const = 0;
    virtual StageList<T> stages() const = 0;
    virtual void collect(ParamRefs<T>& out) = 0;
    /// Zeroes the classification head (weights and bias).
    virtual void zero_head() = 0;

    ad::Var<T> forward(const ad::Var<T>& x, ForwardContext<T>& ctx) const { return run_stages(stages(), x, ctx); }

protected:
    static Stage<T> declared(std::string name, double L, std::function<ad::Var<T>(const ad::Var<T>&, ForwardContext<T>&)> f)
    {
        return {std::move(name), BoundKind::declared, L, std::move(f)};
    }
    static Stage<T> measured(std::string name, std::function<ad::Var<T>(const ad::Var<T>&, ForwardContext<T>&)> f)
    {
        return {std::move(name), BoundKind::measured, 0.0, std::move(f)};
    }
    static Stage<T> relu_stage(std::string name)
    {
        return declared(std::move(name), 1.0, [](const ad::Var<T>& h, ForwardContext<T>&) { return ad::relu(h); });
    }
    static Stage<T> softmax_stage()
    {
        return declared("softmax", 1.0, [](const ad::Var<T>& h, ForwardContext<T>&) { return ad::softmax_last(h); });
    }
    static Stage<T> linear_stage(std::string name, const Linear<T>& l)
    {
        return declared(std::move(name), l.weight.constraint.bound,
                        [&l](const ad::Var<T>& h, ForwardContext<T>&) { return l(h); });
    }
    static void lgcn_stages(StageList<T>& s, const LgcnParams<T>& n)
    {
        s.push_back(measured("lgcn_normalize", [&n](const ad::Var<T>& h, ForwardContext<T>&) {
            return lgcn_normalize(h, n);
        }));
        s.push_back(declared("lgcn_affine", n.L_affine, [&n](const ad::Var<T>& h, ForwardContext<T>&) {
            return lgcn_affine(h, n);
        }));
    }
    static void zero(Linear<T>& l)
    {
        std::fill(l.weight.value().data.begin(), l.weight.value().data.end(), T{0});
        std::fill(l.bias.value().data.begin(), l.bias.value().data.end(), T{0});
    }
};

/// LGCBE -> time-patch tokens -> LGCA -> mean pool -> LGCN -> head.
template <class T>
class GlobalFeatureBranch final : public Branch<T> {
public:
    LgcbeParams<T> lgcbe;
    Linear<T> embed;
    LgcaParams<T> attention;
    LgcnParams<T> norm;
    Linear<T> head;
    std::size_t tokens = 1;
    std::size_t patch = 1;

    GlobalFeatureBranch(const ModelConfig& cfg, Rng& rng)
        : lgcbe(cfg.channels, cfg.samples, cfg.bins(), cfg.budget.L_s, cfg.budget.L_linear, rng),
          embed(cfg.channels * cfg.patch_length(), cfg.embed_dim, rng, Constraint::spectral(cfg.budget.L_linear)),
          attention(cfg.embed_dim, cfg.heads, cfg.budget.L_att, cfg.budget.L_linear, cfg.dropout, rng, cfg.constrain_qkv),
          norm(cfg.embed_dim, cfg.budget.L_affine, cfg.lgcn_stats),
          head(cfg.embed_dim, static_cast<std::size_t>(cfg.classes), rng, Constraint::spectral(cfg.budget.L_linear)),
          tokens(cfg.token_count()), patch(cfg.patch_length())
    {
    }

    BranchId id() const override { return BranchId::global_feature; }

    StageList<T> stages() const override
    {
        using V = ad::Var<T>;
        using Ctx = ForwardContext<T>;
        StageList<T> s;
        s.push_back(this->measured("lgcbe", [this](const V& x, Ctx&) { return lgcbe_forward(x, lgcbe).out; }));
        s.push_back(this->declared("patch_embed", embed.weight.constraint.bound,
                                   [this](const V& x, Ctx&) { return embed(patchify(x, tokens, patch)); }));
        s.push_back(this->relu_stage("relu"));
        s.push_back(this->measured("lgca_attention", [this](const V& x, Ctx& c) { return lgca_heads(x, attention, c); }));
        s.push_back(this->linear_stage("lgca_output", attention.output));
        s.push_back(this->declared("mean_pool", 1.0 / std::sqrt(static_cast<double>(tokens)),
                                   [](const V& x, Ctx&) { return ad::mean_axis(x, 1); }));
        this->lgcn_stages(s, norm);
        s.push_back(this->linear_stage("head", head));
        s.push_back(this->softmax_stage());
        return s;
    }

    void collect(ParamRefs<T>& out) override
    {
        const std::string p = branch_name(id());
        lgcbe.collect(out, p + "/lgcbe");
        embed.collect(out, p + "/embed");
        attention.collect(out, p + "/lgca");
        norm.collect(out, p + "/lgcn");
        head.collect(out, p + "/head");
    }

    void zero_head() override { this->zero(head); }
};

/// log band energies [B, C*|B|] -> LGCN -> MLP -> head.
template <class T>
class ChannelEnergyBranch final : public Branch<T> {
public:
    std::vector<BinRange> bins;
    LgcnParams<T> norm;
    Mlp2<T> mlp;
    Linear<T> head;
    double log_floor = 1e-6;

    ChannelEnergyBranch(const ModelConfig& cfg, Rng& rng)
        : bins(cfg.bins()), norm(cfg.channels * bins.size(), cfg.budget.L_affine, cfg.lgcn_stats),
          mlp(cfg.channels * bins.size(), cfg.mlp_hidden, cfg.mlp_hidden, rng, Constraint::spectral(cfg.budget.L_linear)),
          head(cfg.mlp_hidden, static_cast<std::size_t>(cfg.classes), rng, Constraint::spectral(cfg.budget.L_linear)),
          log_floor(cfg.log_floor)
    {
    }

    BranchId id() const override { return BranchId::channel_energy; }

    StageList<T> stages() const override
    {
        using V = ad::Var<T>;
        using Ctx = ForwardContext<T>;
        StageList<T> s;
        s.push_back(this->measured("band_log_energy", [this](const V& x, Ctx&) {
            auto e = band_energy(rfft_forward(x), bins);
            auto l = ad::log_offset(e, static_cast<T>(log_floor));
            return ad::reshape(l, Shape{x.shape()[0], x.shape()[1] * bins.size()});
        }));
        this->lgcn_stages(s, norm);
        s.push_back(this->linear_stage("fc1", mlp.fc1));
        s.push_back(this->relu_stage("relu1"));
        s.push_back(this->linear_stage("fc2", mlp.fc2));
        s.push_back(this->relu_stage("relu2"));
        s.push_back(this->linear_stage("head", head));
        s.push_back(this->softmax_stage());
        return s;
    }

    void collect(ParamRefs<T>& out) override
    {
        const std::string p = branch_name(id());
        norm.collect(out, p + "/lgcn");
        mlp.collect(out, p + "/mlp");
        head.collect(out, p + "/head");
    }

    void zero_head() override { this->zero(head); }
};

/// Channels as tokens: embed each channel's series -> LGCA -> LGCN -> head.
template <class T>
class ChannelMixerBranch final : public Branch<T> {
public:
    Linear<T> embed;
    LgcaParams<T> attention;
    LgcnParams<T> norm;
    Linear<T> head;

    ChannelMixerBranch(const ModelConfig& cfg, Rng& rng)
        : embed(cfg.samples, cfg.embed_dim, rng, Constraint::spectral(cfg.budget.L_linear)),
          attention(cfg.embed_dim, cfg.heads, cfg.budget.L_att, cfg.budget.L_linear, cfg.dropout, rng, cfg.constrain_qkv),
          norm(cfg.channels * cfg.embed_dim, cfg.budget.L_affine, cfg.lgcn_stats),
          head(cfg.channels * cfg.embed_dim, static_cast<std::size_t>(cfg.classes), rng,
               Constraint::spectral(cfg.budget.L_linear))
    {
    }

    BranchId id() const override { return BranchId::channel_mixer; }

    StageList<T> stages() const override
    {
        using V = ad::Var<T>;
        using Ctx = ForwardContext<T>;
        StageList<T> s;
        s.push_back(this->linear_stage("token_embed", embed));
        s.push_back(this->relu_stage("relu"));
        s.push_back(this->measured("lgca_attention", [this](const V& x, Ctx& c) { return lgca_heads(x, attention, c); }));
        s.push_back(this->linear_stage("lgca_output", attention.output));
        s.push_back(this->measured("lgcn_normalize", [this](const V& x, Ctx&) {
            return lgcn_normalize(ad::reshape(x, Shape{x.shape()[0], x.shape()[1] * x.shape()[2]}), norm);
        }));
        s.push_back(this->declared("lgcn_affine", norm.L_affine, [this](const V& x, Ctx&) { return lgcn_affine(x, norm); }));
        s.push_back(this->linear_stage("head", head));
        s.push_back(this->softmax_stage());
        return s;
    }

    void collect(ParamRefs<T>& out) override
    {
        const std::string p = branch_name(id());
        embed.collect(out, p + "/embed");
        attention.collect(out, p + "/lgca");
        norm.collect(out, p + "/lgcn");
        head.collect(out, p + "/head");
    }

    void zero_head() override { this->zero(head); }
};

/// Channel-averaged log magnitude spectrum over the band bins -> band
/// mixing MLP -> head.
template <class T>
class BandMagnitudeBranch final : public Branch<T> {
public:
    std::vector<std::size_t> band_bins;
    LgcnParams<T> norm;
    Mlp2<T> mixer;
    Linear<T> head;
    double log_floor = 1e-6;

    static std::vector<std::size_t> in_band_bins(const ModelConfig& cfg)
    {
        std::vector<std::size_t> idx;
        for (const auto& r : cfg.bins())
            for (std::size_t k = r.lo; k < r.hi; ++k) idx.push_back(k);
        return idx;
    }

    BandMagnitudeBranch(const ModelConfig& cfg, Rng& rng)
        : band_bins(in_band_bins(cfg)), norm(band_bins.size(), cfg.budget.L_affine, cfg.lgcn_stats),
          mixer(band_bins.size(), cfg.mlp_hidden, cfg.mlp_hidden, rng, Constraint::spectral(cfg.budget.L_linear)),
          head(cfg.mlp_hidden, static_cast<std::size_t>(cfg.classes), rng, Constraint::spectral(cfg.budget.L_linear)),
          log_floor(cfg.log_floor)
    {
    }

    BranchId id() const override { return BranchId::band_magnitude; }

    StageList<T> stages() const override
    {
        using V = ad::Var<T>;
        using Ctx = ForwardContext<T>;
        StageList<T> s;
        s.push_back(this->measured("band_log_magnitude", [this](const V& x, Ctx&) {
            auto mag = ad::mean_axis(fft::magnitude(rfft_forward(x)), 1);  // [B, F]
            return ad::log_offset(ad::select_last(mag, band_bins), static_cast<T>(log_floor));
        }));
        this->lgcn_stages(s, norm);
        s.push_back(this->linear_stage("mixer_fc1", mixer.fc1));
        s.push_back(this->relu_stage("relu1"));
        s.push_back(this->linear_stage("mixer_fc2", mixer.fc2));
        s.push_back(this->relu_stage("relu2"));
        s.push_back(this->linear_stage("head", head));
        s.push_back(this->softmax_stage());
        return s;
    }

    void collect(ParamRefs<T>& out) override
    {
        const std::string p = branch_name(id());
        norm.collect(out, p + "/lgcn");
        mixer.collect(out, p + "/mixer");
        head.collect(out, p + "/head");
    }

    void zero_head() override { this->zero(head); }
};

// ------------------------------------------------------------------ fusion

/// Throws unless every row of probs is a probability vector.
template <class T>
void require_simplex(const Tensor<T>& probs, const std::string& who, double tol = 1e-6)
{
    if (probs.rank() != 2) throw ContractError(who + ": posteriors must be [B, K]");
    const std::size_t B = probs.dim(0), K = probs.dim(1);
    for (std::size_t b = 0; b < B; ++b) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double v = static_cast<double>(probs[b * K + k]);
            if (!(v >= -tol) || !std::isfinite(v))
                throw ContractError(who + ": posterior row " + std::to_string(b) + " has an invalid entry");
            s += v;
        }
        if (std::abs(s - 1.0) > tol)
            throw ContractError(who + ": posterior row " + std::to_string(b) + " sums to " + std::to_string(s));
    }
}

/// w = softmax(alpha)
template <class T>
std::vector<T> fusion_weights(const Tensor<T>& alpha)
{
    std::vector<T> w(alpha.data);
    const T mx = *std::max_element(w.begin(), w.end());
    T z{0};
    for (auto& v : w) {
        v = std::exp(v - mx);
        z += v;
    }
    for (auto& v : w) v /= z;
    return w;
}

/// p_final = sum_i softmax(alpha)_i p_i. Branch posteriors enter as
/// constants: the only gradient produced flows to alpha.
template <class T>
ad::Var<T> fuse(const ad::Var<T>& alpha, const std::vector<ad::Var<T>>& probs)
{
    if (alpha.size() != probs.size() || probs.empty())
        throw ContractError("fuse: need one logit per branch (" + std::to_string(alpha.size()) + " logits, " +
                            std::to_string(probs.size()) + " branches)");
    const Shape s = probs[0].shape();
    for (std::size_t i = 0; i < probs.size(); ++i) {
        require_shape(probs[i].shape(), s, "fuse");
        require_simplex(probs[i].value(), i < 4 ? branch_name(kBranches[i]) : "branch");
    }
    const auto w = fusion_weights(alpha.value());
    Tensor<T> out(s);
    std::vector<Tensor<T>> held;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        held.push_back(probs[i].value());
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += w[i] * probs[i].value()[j];
    }
    return ad::make_result<T>(std::move(out), {alpha}, [w, held = std::move(held)](ad::Node<T>& self) {
        auto& g = self.parent(0).ensure_grad();
        // d out / d alpha_i = w_i (p_i - out)
        for (std::size_t i = 0; i < w.size(); ++i) {
            T acc{0};
            for (std::size_t j = 0; j < self.value.size(); ++j) acc += self.grad[j] * (held[i][j] - self.value[j]);
            g[i] += w[i] * acc;
        }
    });
}

// ------------------------------------------------------------------ model

template <class T>
struct ModelOutput {
    std::vector<ad::Var<T>> branch_probs;  ///< in kBranches order
    ad::Var<T> fused;
};

template <class T>
class LelModel {
public:
    explicit LelModel(ModelConfig cfg) : cfg_(std::move(cfg))
    {
        cfg_.validate();
        Rng rng(cfg_.seed);
        branches_[0] = std::make_unique<GlobalFeatureBranch<T>>(cfg_, rng);
        branches_[1] = std::make_unique<ChannelEnergyBranch<T>>(cfg_, rng);
        branches_[2] = std::make_unique<ChannelMixerBranch<T>>(cfg_, rng);
        branches_[3] = std::make_unique<BandMagnitudeBranch<T>>(cfg_, rng);
        alpha = Param<T>(Tensor<T>({4}));
    }

    LelModel(const LelModel&) = delete;
    LelModel& operator=(const LelModel&) = delete;

    const ModelConfig& config() const { return cfg_; }

    Branch<T>& branch(BranchId id) { return *branches_[static_cast<std::size_t>(id)]; }
    const Branch<T>& branch(BranchId id) const { return *branches_[static_cast<std::size_t>(id)]; }

    template <class B>
    B& as()
    {
        for (auto& b : branches_)
            if (auto* p = dynamic_cast<B*>(b.get())) return *p;
        throw ContractError("model has no branch of the requested type");
    }

    void check_input(const ad::Var<T>& x) const
    {
        if (x.value().rank() != 3 || x.shape()[1] != cfg_.channels || x.shape()[2] != cfg_.samples)
            throw ContractError("model expects X[B, " + std::to_string(cfg_.channels) + ", " +
                                std::to_string(cfg_.samples) + "], got " + shape_str(x.shape()));
    }

    ad::Var<T> branch_forward(BranchId id, const ad::Var<T>& x, ForwardContext<T>& ctx) const
    {
        const auto i = static_cast<std::size_t>(id);
        if (i >= branches_.size()) throw ContractError("unknown branch id " + std::to_string(i));
        check_input(x);
        return branches_[i]->forward(x, ctx);
    }

    /// Runs every branch and the fusion. Dropout masks (training only) come
    /// from a stream derived from (dropout_seed, branch).
    ModelOutput<T> forward(const ad::Var<T>& x, bool training = false, std::uint64_t dropout_seed = 0,
                           std::vector<Tensor<T>>* mixer_attention = nullptr) const
    {
        check_input(x);
        ModelOutput<T> out;
        for (auto id : kBranches) {
            Rng rng = Rng::derive(cfg_.seed, dropout_seed, static_cast<std::uint64_t>(id) + 1);
            ForwardContext<T> ctx{training, &rng, id == BranchId::channel_mixer ? mixer_attention : nullptr};
            out.branch_probs.push_back(branches_[static_cast<std::size_t>(id)]->forward(x, ctx));
        }
        out.fused = fuse(alpha.var, out.branch_probs);
        return out;
    }

    ParamRefs<T> parameters()
    {
        ParamRefs<T> out;
        for (auto& b : branches_) b->collect(out);
        out.push_back({"fusion/alpha", &alpha});
        return out;
    }

    std::vector<T> weights() const { return fusion_weights(alpha.value()); }

    Param<T> alpha;

private:
    ModelConfig cfg_;
    std::array<std::unique_ptr<Branch<T>>, 4> branches_;
};

/// CE(p_final) + aux * sum_i CE(p_i)
template <class T>
ad::Var<T> composite_loss(const ModelOutput<T>& out, const std::vector<int>& labels, double aux = 0.25)
{
    auto loss = ad::nll_loss(out.fused, labels);
    ad::Var<T> branch_sum;
    for (std::size_t i = 0; i < out.branch_probs.size(); ++i) {
        auto l = ad::nll_loss(out.branch_probs[i], labels);
        branch_sum = i == 0 ? l : ad::add(branch_sum, l);
    }
    if (out.branch_probs.empty()) return loss;
    return ad::add(loss, ad::scale(branch_sum, static_cast<T>(aux)));
}

} // namespace lel
