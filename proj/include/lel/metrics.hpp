#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "error.hpp"

namespace lel {

/// One-vs-rest ROC of a single class. Points run from (0,0) to (1,1).
struct RocCurve {
    std::vector<double> fpr;
    std::vector<double> tpr;
    double auc = std::numeric_limits<double>::quiet_NaN();
    bool defined = false;  ///< false when the class has no positives or no negatives
};

struct Metrics {
    int classes = 0;
    std::size_t count = 0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double loss = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> precision;
    std::vector<double> recall;
    std::vector<double> f1;
    std::vector<std::size_t> support;
    std::vector<int> excluded;  ///< zero-support classes left out of macro F1
    std::vector<std::vector<std::size_t>> confusion;  ///< [true][predicted]
    std::vector<RocCurve> roc;
};

/// Scores of one class against the rest. Tied scores form a single step.
inline RocCurve roc_curve(const std::vector<double>& scores, const std::vector<bool>& positive)
{
    if (scores.size() != positive.size()) throw ContractError("roc_curve: score/label length mismatch");
    RocCurve r;
    const std::size_t P = static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
    const std::size_t N = positive.size() - P;
    r.fpr.push_back(0.0);
    r.tpr.push_back(0.0);
    if (P == 0 || N == 0) {
        r.fpr.push_back(1.0);
        r.tpr.push_back(1.0);
        return r;
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t tp = 0, fp = 0;
    double auc = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (positive[order[j]] ? tp : fp)++;
            ++j;
        }
        const double x = static_cast<double>(fp) / static_cast<double>(N);
        const double y = static_cast<double>(tp) / static_cast<double>(P);
        auc += (x - r.fpr.back()) * (y + r.tpr.back()) / 2.0;
        r.fpr.push_back(x);
        r.tpr.push_back(y);
        i = j;
    }
    r.auc = auc;
    r.defined = true;
    return r;
}

/// Accuracy, per-class precision/recall/F1 and macro F1 from a confusion
/// matrix. Classes without support are excluded from the macro average.
inline Metrics metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion)
{
    Metrics m;
    const std::size_t K = confusion.size();
    for (const auto& row : confusion)
        if (row.size() != K) throw ContractError("confusion matrix must be square");
    m.classes = static_cast<int>(K);
    m.confusion = confusion;
    m.precision.assign(K, 0.0);
    m.recall.assign(K, 0.0);
    m.f1.assign(K, 0.0);
    m.support.assign(K, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < K; ++i) {
        for (std::size_t j = 0; j < K; ++j) {
            m.count += confusion[i][j];
            m.support[i] += confusion[i][j];
        }
        correct += confusion[i][i];
    }
    m.accuracy = m.count ? static_cast<double>(correct) / static_cast<double>(m.count) : 0.0;
    double f1_sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t k = 0; k < K; ++k) {
        std::size_t predicted = 0;
        for (std::size_t i = 0; i < K; ++i) predicted += confusion[i][k];
        const double tp = static_cast<double>(confusion[k][k]);
        m.precision[k] = predicted ? tp / static_cast<double>(predicted) : 0.0;
        m.recall[k] = m.support[k] ? tp / static_cast<double>(m.support[k]) : 0.0;
        const double pr = m.precision[k] + m.recall[k];
        m.f1[k] = pr > 0.0 ? 2.0 * m.precision[k] * m.recall[k] / pr : 0.0;
        if (m.support[k] == 0) {
            m.excluded.push_back(static_cast<int>(k));
            continue;
        }
        f1_sum += m.f1[k];
        ++counted;
    }
    m.macro_f1 = counted ? f1_sum / static_cast<double>(counted) : 0.0;
    return m;
}

inline std::vector<std::vector<std::size_t>> confusion_matrix(const std::vector<int>& labels,
                                                              const std::vector<int>& predicted, int classes)
{
    if (labels.size() != predicted.size()) throw ContractError("confusion: label/prediction length mismatch");
    std::vector<std::vector<std::size_t>> c(static_cast<std::size_t>(classes),
                                            std::vector<std::size_t>(static_cast<std::size_t>(classes), 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes || predicted[i] < 0 || predicted[i] >= classes)
            throw ContractError("confusion: class index outside [0, " + std::to_string(classes) + ")");
        ++c[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(predicted[i])];
    }
    return c;
}

/// Full metrics from posterior rows probs [N*K] (argmax prediction, first
/// index wins ties) and labels.
inline Metrics compute_metrics(const std::vector<int>& labels, const std::vector<double>& probs, int classes)
{
    const std::size_t K = static_cast<std::size_t>(classes);
    if (probs.size() != labels.size() * K) throw ContractError("metrics: posterior size does not match labels");
    std::vector<int> pred(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto* row = probs.data() + i * K;
        pred[i] = static_cast<int>(std::max_element(row, row + K) - row);
    }
    Metrics m = metrics_from_confusion(confusion_matrix(labels, pred, classes));
    for (std::size_t k = 0; k < K; ++k) {
        std::vector<double> s(labels.size());
        std::vector<bool> pos(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            s[i] = probs[i * K + k];
            pos[i] = labels[i] == static_cast<int>(k);
        }
        m.roc.push_back(roc_curve(s, pos));
    }
    return m;
}

} // namespace lel
