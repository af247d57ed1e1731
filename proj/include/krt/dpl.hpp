#pragma once

// Dynamic pseudo-labeling: threshold the previous model's old-class
// probabilities and walk the threshold in fixed steps until the average
// number of pseudo labels per image is close to a session target.

#include <cstddef>
#include <span>
#include <vector>

#include "krt/labels.hpp"

namespace krt {

struct DplConfig {
    double eta_init = 0.8;
    double mu = 2.9;
    double eta_step = 1e-2;
    double tolerance = 1e-1;
    double eta_min = 0.01;
    double eta_max = 0.99;
    std::size_t max_iters = 500;

    void validate() const;

    bool operator==(const DplConfig&) const = default;
};

// [rows x cols] old-class probabilities; column k scores class class_ids[k].
struct ScoreMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;
    std::vector<ClassId> class_ids;

    double at(std::size_t i, std::size_t k) const { return values[i * cols + k]; }
    // Throws DimensionError / ValueError on inconsistent extents or scores
    // outside [0, 1].
    void validate() const;
};

struct PseudoLabelReport {
    double final_eta = 0.0;
    double beta = 0.0;   // pseudo labels per image at final_eta
    double mu_t = 0.0;
    std::size_t iterations = 0;  // threshold adjustments performed
    bool converged = false;
    std::size_t total_pseudo = 0;
    std::vector<LabelSet> pseudo;  // per image
};

struct MergedLabels {
    LabelSet labels;  // true union pseudo
    LabelSet pseudo;  // the subset that came from pseudo labeling
};

// mu * old / total.
double session_target(std::size_t old_class_count, std::size_t total_class_count, double mu);

// Class k is pseudo-labeled on image i iff score >= eta and k is not already
// among the image's true labels. true_labels may be empty (no exclusions) or
// hold one set per row.
std::vector<LabelSet> generate_pseudo_labels(const ScoreMatrix& scores, double eta,
                                             std::span<const LabelSet> true_labels = {});

// Threshold walk starting from eta_init: raise eta while beta > mu_t, lower
// it otherwise, stop once |beta - mu_t| <= tolerance. The walk also stops
// when eta leaves [eta_min, eta_max], when it revisits a threshold (the walk
// is deterministic, so that is a cycle) or after max_iters adjustments; the
// threshold with the smallest gap seen is then returned (latest on ties).
PseudoLabelReport dynamic_threshold_search(const ScoreMatrix& scores, const DplConfig& config, double mu_t,
                                           std::span<const LabelSet> true_labels = {});

// Per-image union of true and pseudo labels. Throws ValueError when a pseudo
// label names a current-session class.
std::vector<MergedLabels> merge_labels(std::span<const LabelSet> true_labels, std::span<const LabelSet> pseudo,
                                       const LabelSet& current_classes);

}  // namespace krt
