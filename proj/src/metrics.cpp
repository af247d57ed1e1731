#include "krt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "krt/errors.hpp"

namespace krt {

std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> truths) {
    if (scores.size() != truths.size())
        throw DimensionError("average_precision: " + std::to_string(scores.size()) + " scores vs " +
                             std::to_string(truths.size()) + " truths");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t hits = 0;
    double total = 0.0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (!truths[order[rank]]) continue;
        ++hits;
        total += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
    if (hits == 0) return std::nullopt;
    return total / static_cast<double>(hits);
}

namespace {

double f1(std::size_t tp, std::size_t fp, std::size_t fn) {
    const double precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

MetricsRecord evaluate(const EvalBatch& batch, double threshold) {
    if (batch.n == 0) throw ValueError("evaluate: empty batch");
    if (batch.classes == 0) throw ValueError("evaluate: no classes");
    if (batch.scores.size() != batch.n * batch.classes || batch.truths.size() != batch.n * batch.classes)
        throw DimensionError("evaluate: score/truth arrays do not match n x classes");
    for (double s : batch.scores)
        if (!std::isfinite(s)) throw NumericError("evaluate: non-finite score");

    MetricsRecord rec;
    rec.per_class_ap.resize(batch.classes);
    std::vector<double> column(batch.n);
    std::vector<std::uint8_t> truth(batch.n);
    double ap_sum = 0.0, f1_sum = 0.0;
    std::size_t counted = 0;
    std::size_t tp_all = 0, fp_all = 0, fn_all = 0;
    for (std::size_t k = 0; k < batch.classes; ++k) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < batch.n; ++i) {
            column[i] = batch.scores[i * batch.classes + k];
            truth[i] = batch.truths[i * batch.classes + k] ? 1 : 0;
            const bool predicted = column[i] >= threshold;
            if (predicted && truth[i]) ++tp;
            else if (predicted) ++fp;
            else if (truth[i]) ++fn;
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn;
        const auto ap = average_precision(column, truth);
        if (!ap) continue;
        rec.per_class_ap[k] = 100.0 * *ap;
        ap_sum += *ap;
        f1_sum += f1(tp, fp, fn);
        ++counted;
    }
    if (counted > 0) {
        rec.map = 100.0 * ap_sum / static_cast<double>(counted);
        rec.cf1 = 100.0 * f1_sum / static_cast<double>(counted);
    }
    rec.of1 = 100.0 * f1(tp_all, fp_all, fn_all);
    return rec;
}

Aggregates aggregate(std::span<const MetricsRecord> per_session) {
    if (per_session.empty()) throw ValueError("aggregate: no sessions");
    Aggregates agg;
    double total = 0.0;
    for (const auto& r : per_session) total += r.map;
    agg.avg_map = total / static_cast<double>(per_session.size());
    agg.last_map = per_session.back().map;
    agg.last_cf1 = per_session.back().cf1;
    agg.last_of1 = per_session.back().of1;
    return agg;
}

}  // namespace krt
