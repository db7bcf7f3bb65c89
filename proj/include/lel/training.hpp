#pragma once

// Adam training with post-step spectral projection, best-validation
// selection, evaluation and causal stream inference.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <vector>

#include "ensemble.hpp"
#include "metrics.hpp"

namespace lel {

struct TrainConfig {
    double learning_rate = 3e-4;
    double dropout = 0.3;
    int epochs = 100;
    std::size_t batch_size = 128;
    LipschitzBudget budget;
    std::uint64_t seed = 1;
    double aux_weight = 0.25;  ///< weight of the summed per-branch CE terms
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    /// Epochs at which the best-so-far checkpoint is also kept.
    std::vector<int> milestones;
    /// Architecture knobs; sizes, budget, dropout and seed are filled in from
    /// the data and the fields above.
    ModelConfig model;

    static const std::vector<double>& learning_rate_grid()
    {
        static const std::vector<double> g{1e-4, 3e-4, 1e-3};
        return g;
    }
    static const std::vector<int>& epoch_grid()
    {
        static const std::vector<int> g{50, 100, 150};
        return g;
    }
    static const std::vector<std::size_t>& batch_size_grid()
    {
        static const std::vector<std::size_t> g{32, 64, 128};
        return g;
    }
    static const std::vector<double>& budget_grid()
    {
        static const std::vector<double> g{0.5, 1.0, 1.5};
        return g;
    }
    static const std::vector<double>& sensitivity_grid()
    {
        static const std::vector<double> g{0.1, 1.0, 10.0};
        return g;
    }
    static const std::vector<int>& sensitivity_epochs()
    {
        static const std::vector<int> g{30, 50, 100};
        return g;
    }

    void validate() const
    {
        if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ParameterError("dropout must be in [0, 1)");
        if (epochs < 1) throw ParameterError("epochs must be >= 1");
        if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
        if (!(aux_weight >= 0.0)) throw ParameterError("aux_weight must be >= 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0))
            throw ParameterError("invalid Adam moments");
        budget.validate();
    }
};

inline ModelConfig make_model_config(const TrainConfig& tc, const TrialSet& set)
{
    ModelConfig m = tc.model;
    m.channels = set.channels();
    m.samples = set.samples();
    m.classes = set.classes;
    m.sampling_rate = set.sampling_rate;
    m.budget = tc.budget;
    m.dropout = tc.dropout;
    m.seed = tc.seed;
    return m;
}

template <class T>
class Adam {
public:
    Adam(const ParamRefs<T>& params, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
        : params_(params), lr_(lr), b1_(b1), b2_(b2), eps_(eps)
    {
        for (const auto& [name, p] : params_) {
            m_.emplace_back(p->value().size(), 0.0);
            v_.emplace_back(p->value().size(), 0.0);
        }
    }

    void step()
    {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i].second;
            const auto& g = p.var.grad();
            auto& w = p.value().data;
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * gj;
                v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * gj * gj;
                const double mh = m_[i][j] / c1, vh = v_[i][j] / c2;
                w[j] = static_cast<T>(static_cast<double>(w[j]) - lr_ * mh / (std::sqrt(vh) + eps_));
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    ParamRefs<T> params_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

template <class T>
using ParamState = std::vector<Tensor<T>>;

template <class T>
ParamState<T> capture(LelModel<T>& model)
{
    ParamState<T> s;
    for (const auto& [name, p] : model.parameters()) s.push_back(p->value());
    return s;
}

template <class T>
void restore(LelModel<T>& model, const ParamState<T>& s)
{
    auto params = model.parameters();
    if (params.size() != s.size()) throw ContractError("parameter state does not match the model");
    for (std::size_t i = 0; i < s.size(); ++i) {
        require_shape(s[i].shape, params[i].second->value().shape, params[i].first);
        params[i].second->value() = s[i];
    }
}

template <class T>
void project_all(LelModel<T>& model)
{
    for (auto& [name, p] : model.parameters()) p->project();
}

struct Evaluation {
    Metrics fused;
    std::array<Metrics, 4> branch;
    std::vector<double> fused_probs;  ///< [N*K]
    std::vector<int> labels;
};

/// Dropout off, no graph. Loss is the composite loss averaged over windows.
template <class T>
Evaluation evaluate(const LelModel<T>& model, const TrialSet& set, const std::vector<std::size_t>& idx,
                    std::size_t batch_size = 128, double aux_weight = 0.25)
{
    const auto& cfg = model.config();
    if (set.channels() != cfg.channels || set.samples() != cfg.samples || set.classes != cfg.classes)
        throw ContractError("evaluate: dataset [C=" + std::to_string(set.channels()) + ", T=" +
                            std::to_string(set.samples()) + ", K=" + std::to_string(set.classes) +
                            "] does not match checkpoint [C=" + std::to_string(cfg.channels) + ", T=" +
                            std::to_string(cfg.samples) + ", K=" + std::to_string(cfg.classes) + "]");
    ad::NoGradGuard ng;
    Evaluation ev;
    std::array<std::vector<double>, 4> bp;
    double loss = 0.0;
    for (std::size_t s = 0; s < idx.size(); s += batch_size) {
        std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(s),
                                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + batch_size)));
        auto b = gather<T>(set, chunk);
        auto out = model.forward(ad::Var<T>(std::move(b.data)), false);
        loss += static_cast<double>(composite_loss(out, b.labels, aux_weight).item()) * static_cast<double>(chunk.size());
        for (auto v : out.fused.value().data) ev.fused_probs.push_back(static_cast<double>(v));
        for (std::size_t i = 0; i < 4; ++i)
            for (auto v : out.branch_probs[i].value().data) bp[i].push_back(static_cast<double>(v));
        ev.labels.insert(ev.labels.end(), b.labels.begin(), b.labels.end());
    }
    ev.fused = compute_metrics(ev.labels, ev.fused_probs, cfg.classes);
    ev.fused.loss = idx.empty() ? 0.0 : loss / static_cast<double>(idx.size());
    for (std::size_t i = 0; i < 4; ++i) ev.branch[i] = compute_metrics(ev.labels, bp[i], cfg.classes);
    return ev;
}

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    double val_f1 = 0.0;
    std::array<double, 4> weights{};
    double seconds = 0.0;
};

template <class T>
struct Snapshot {
    int epoch = 0;  ///< epoch the parameters come from
    double val_acc = -1.0;
    double val_loss = 0.0;
    ParamState<T> params;
};

template <class T>
struct TrainResult {
    std::vector<EpochRecord> history;
    Snapshot<T> best;
    std::vector<std::pair<int, Snapshot<T>>> milestones;  ///< (milestone epoch, best-so-far)
};

/// Trains in place and leaves the model at the best-validation parameters.
/// Batch order comes from Rng::derive(seed, epoch); dropout masks from
/// (seed, epoch, step, branch). A non-finite loss throws DivergenceError.
template <class T>
TrainResult<T> train(LelModel<T>& model, const TrialSet& set, const SplitIndices& split, const TrainConfig& cfg,
                     const std::function<void(const EpochRecord&)>& on_epoch = {})
{
    cfg.validate();
    if (split.train.empty()) throw ContractError("train: empty training split");
    if (split.val.empty()) throw ContractError("train: empty validation split");
    auto params = model.parameters();
    Adam<T> adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    TrainResult<T> res;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto order = split.train;
        Rng shuffle = Rng::derive(cfg.seed, static_cast<std::uint64_t>(epoch));
        shuffle.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        int step = 0;
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size, ++step) {
            std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(s),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), s + cfg.batch_size)));
            auto b = gather<T>(set, chunk);
            const std::uint64_t key = (static_cast<std::uint64_t>(epoch) << 32) | static_cast<std::uint64_t>(step);
            auto out = model.forward(ad::Var<T>(std::move(b.data)), true, key);
            auto loss = composite_loss(out, b.labels, cfg.aux_weight);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step),
                                      epoch, step);
            for (auto& [name, p] : params) p->var.zero_grad();
            loss.backward();
            adam.step();
            project_all(model);
            loss_sum += lv * static_cast<double>(chunk.size());
        }
        auto ev = evaluate(model, set, split.val, cfg.batch_size, cfg.aux_weight);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.val_loss = ev.fused.loss;
        rec.val_acc = ev.fused.accuracy;
        rec.val_f1 = ev.fused.macro_f1;
        const auto w = model.weights();
        for (std::size_t i = 0; i < 4; ++i) rec.weights[i] = static_cast<double>(w[i]);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.history.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (rec.val_acc > res.best.val_acc || (rec.val_acc == res.best.val_acc && rec.val_loss < res.best.val_loss)) {
            res.best.epoch = epoch;
            res.best.val_acc = rec.val_acc;
            res.best.val_loss = rec.val_loss;
            res.best.params = capture(model);
        }
        if (std::find(cfg.milestones.begin(), cfg.milestones.end(), epoch) != cfg.milestones.end())
            res.milestones.emplace_back(epoch, res.best);
    }
    restore(model, res.best.params);
    return res;
}

// ------------------------------------------------------------------ stream

struct StreamResult {
    std::size_t window = 0;
    std::size_t stride = 0;
    std::vector<std::vector<double>> posteriors;  ///< one fused row per window
    std::vector<int> predicted;
    std::vector<double> latency_ms;

    double mean_latency_ms() const
    {
        if (latency_ms.empty()) return 0.0;
        double s = 0.0;
        for (double v : latency_ms) s += v;
        return s / static_cast<double>(latency_ms.size());
    }
    double max_latency_ms() const
    {
        return latency_ms.empty() ? 0.0 : *std::max_element(latency_ms.begin(), latency_ms.end());
    }
    /// Most frequent prediction; lowest class wins ties.
    int majority(int classes) const
    {
        std::vector<int> votes(static_cast<std::size_t>(classes), 0);
        for (int p : predicted) ++votes[static_cast<std::size_t>(p)];
        return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    }
};

inline std::size_t window_count(std::size_t length, std::size_t window, std::size_t stride)
{
    if (window == 0 || stride == 0) throw ContractError("window and stride must be positive");
    if (window > length)
        throw ContractError("window " + std::to_string(window) + " exceeds recording length " + std::to_string(length));
    return (length - window) / stride + 1;
}

/// Window t sees samples [t*stride, t*stride + window) only and is
/// classified on its own, so nothing after its last sample can affect it.
template <class T>
StreamResult stream_evaluate(const LelModel<T>& model, const Recording& rec, std::size_t window, std::size_t stride)
{
    const auto& cfg = model.config();
    if (rec.samples.rank() != 2) throw ContractError("recording samples must be [C x T]");
    if (rec.channels() != cfg.channels)
        throw ContractError("recording has " + std::to_string(rec.channels()) + " channels, checkpoint expects " +
                            std::to_string(cfg.channels));
    const std::size_t n = window_count(rec.length(), window, stride);
    if (window != cfg.samples)
        throw ContractError("window " + std::to_string(window) + " differs from the checkpoint window " +
                            std::to_string(cfg.samples));
    ad::NoGradGuard ng;
    StreamResult r;
    r.window = window;
    r.stride = stride;
    const std::size_t C = rec.channels(), L = rec.length(), K = static_cast<std::size_t>(cfg.classes);
    for (std::size_t t = 0; t < n; ++t) {
        const auto t0 = std::chrono::steady_clock::now();
        Tensor<T> x({1, C, window});
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t j = 0; j < window; ++j) x[c * window + j] = static_cast<T>(rec.samples[c * L + t * stride + j]);
        auto out = model.forward(ad::Var<T>(std::move(x)), false);
        std::vector<double> row(K);
        for (std::size_t k = 0; k < K; ++k) row[k] = static_cast<double>(out.fused.value()[k]);
        r.latency_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        r.predicted.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
        r.posteriors.push_back(std::move(row));
    }
    return r;
}

} // namespace lel
