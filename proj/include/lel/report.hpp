#pragma once

// Line-delimited JSON records for training, evaluation, verification,
// streaming and exports.

#include <ostream>

#include <json.hpp>

#include "export.hpp"
#include "verification.hpp"

namespace lel::report {

using json = nlohmann::json;

inline void emit(std::ostream& os, const json& j) { os << j.dump() << '\n'; }

inline json epoch(const EpochRecord& r)
{
    return {{"type", "epoch"},        {"epoch", r.epoch},   {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
            {"val_acc", r.val_acc},   {"val_f1", r.val_f1}, {"w1", r.weights[0]},         {"w2", r.weights[1]},
            {"w3", r.weights[2]},     {"w4", r.weights[3]}, {"seconds", r.seconds}};
}

inline json metrics(const Metrics& m, const std::string& scope)
{
    return {{"type", "metrics"},          {"scope", scope},         {"count", m.count},
            {"accuracy", m.accuracy},     {"macro_f1", m.macro_f1}, {"precision", m.precision},
            {"recall", m.recall},         {"f1", m.f1},             {"support", m.support},
            {"excluded_classes", m.excluded}, {"confusion", m.confusion}};
}

inline json roc(const Metrics& m, const std::string& scope)
{
    json curves = json::array();
    for (std::size_t k = 0; k < m.roc.size(); ++k) {
        const auto& r = m.roc[k];
        curves.push_back({{"class", k}, {"fpr", r.fpr}, {"tpr", r.tpr}, {"defined", r.defined},
                          {"auc", r.defined ? json(r.auc) : json(nullptr)}});
    }
    return {{"type", "roc"}, {"scope", scope}, {"curves", curves}};
}

inline void verification(std::ostream& os, const VerificationReport& rep)
{
    for (const auto& w : rep.weights)
        emit(os, {{"type", "weight"}, {"name", w.name}, {"shape", w.shape}, {"sigma_max", w.sigma}, {"bound", w.bound},
                  {"iterations", w.iterations}, {"converged", w.converged}, {"pass", w.pass}});
    for (const auto& b : rep.branches) {
        for (const auto& s : b.stages) {
            json j{{"type", "module"}, {"branch", branch_name(b.id)}, {"module", s.name}, {"measured", s.measured},
                   {"probes", s.pairs}, {"pass", s.pass}};
            if (s.kind == BoundKind::declared) {
                j["label"] = "declared";
                j["declared"] = s.declared;
                j["margin"] = s.margin();
            } else {
                j["label"] = "measured";
            }
            emit(os, j);
        }
        emit(os, {{"type", "branch"}, {"branch", branch_name(b.id)}, {"composed_bound", b.composed},
                  {"end_to_end", b.end_to_end}, {"probes", b.pairs}, {"pass", b.pass}});
    }
    emit(os, {{"type", "fused"}, {"bound", rep.fused_bound}});
    for (const auto& g : rep.grad_checks)
        emit(os, {{"type", "grad_check"}, {"op", g.name}, {"max_residual", g.max_residual}, {"checked", g.checked},
                  {"excluded", g.excluded}, {"worst", g.worst}, {"pass", g.pass}});
    emit(os, {{"type", "summary"}, {"pass", rep.pass()}});
}

inline void stream(std::ostream& os, const StreamResult& r)
{
    for (std::size_t t = 0; t < r.posteriors.size(); ++t)
        emit(os, {{"type", "window"}, {"index", t}, {"start", t * r.stride}, {"end", t * r.stride + r.window},
                  {"posterior", r.posteriors[t]}, {"predicted", r.predicted[t]}, {"latency_ms", r.latency_ms[t]}});
    emit(os, {{"type", "latency"}, {"windows", r.posteriors.size()}, {"mean_ms", r.mean_latency_ms()},
              {"max_ms", r.max_latency_ms()}});
}

inline json connectivity(const std::vector<Matrix>& m, double blend)
{
    json j{{"type", "connectivity"}, {"blend", blend}, {"classes", json::array()}};
    for (std::size_t k = 0; k < m.size(); ++k) j["classes"].push_back({{"class", k}, {"matrix", m[k]}});
    return j;
}

} // namespace lel::report
