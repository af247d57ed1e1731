#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace krt {

// Row-major [n x classes] scores in [0, 1] with matching 0/1 truths.
struct EvalBatch {
    std::size_t n = 0;
    std::size_t classes = 0;
    std::vector<double> scores;
    std::vector<std::uint8_t> truths;
};

struct MetricsRecord {
    std::size_t session = 0;
    double map = 0.0;  // percent
    double cf1 = 0.0;  // percent
    double of1 = 0.0;  // percent
    std::vector<std::optional<double>> per_class_ap;  // percent; empty when a class has no positives

    bool operator==(const MetricsRecord&) const = default;
};

struct Aggregates {
    double avg_map = 0.0;
    double last_map = 0.0;
    double last_cf1 = 0.0;
    double last_of1 = 0.0;

    bool operator==(const Aggregates&) const = default;
};

// Non-interpolated AP: rank by score descending (stable, ties keep index
// order) and average precision@rank over the positives. nullopt when there
// are no positives.
std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> truths);

// mAP and CF1 average over classes with at least one positive; OF1 pools
// TP/FP/FN over every class. A score >= threshold is a positive prediction.
MetricsRecord evaluate(const EvalBatch& batch, double threshold = 0.5);

Aggregates aggregate(std::span<const MetricsRecord> per_session);

}  // namespace krt
