#include "krt/dpl.hpp"

#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "krt/errors.hpp"

namespace krt {

void DplConfig::validate() const {
    if (!(eta_init > 0 && eta_init < 1)) throw ConfigError("dpl: eta_init must lie in (0, 1)");
    if (!(eta_step > 0)) throw ConfigError("dpl: eta_step must be positive");
    if (!(tolerance > 0)) throw ConfigError("dpl: tolerance must be positive");
    if (!(mu >= 0)) throw ConfigError("dpl: mu must be non-negative");
    if (!(eta_min > 0 && eta_min <= eta_init && eta_init <= eta_max && eta_max < 1))
        throw ConfigError("dpl: need 0 < eta_min <= eta_init <= eta_max < 1");
    if (max_iters == 0) throw ConfigError("dpl: max_iters must be positive");
}

void ScoreMatrix::validate() const {
    if (values.size() != rows * cols)
        throw DimensionError("score matrix holds " + std::to_string(values.size()) + " values, expected " +
                             std::to_string(rows) + "x" + std::to_string(cols));
    if (class_ids.size() != cols)
        throw DimensionError("score matrix has " + std::to_string(cols) + " columns but " +
                             std::to_string(class_ids.size()) + " class ids");
    for (double v : values)
        if (!(v >= 0.0 && v <= 1.0)) throw ValueError("score " + std::to_string(v) + " outside [0, 1]");
}

double session_target(std::size_t old_class_count, std::size_t total_class_count, double mu) {
    if (total_class_count == 0) throw ValueError("session_target: total class count is zero");
    if (old_class_count > total_class_count) throw ValueError("session_target: more old classes than classes");
    return static_cast<double>(old_class_count) / static_cast<double>(total_class_count) * mu;
}

namespace {

void check_true_labels(const ScoreMatrix& scores, std::span<const LabelSet> true_labels) {
    if (!true_labels.empty() && true_labels.size() != scores.rows)
        throw DimensionError("pseudo labeling: " + std::to_string(true_labels.size()) + " label sets for " +
                             std::to_string(scores.rows) + " images");
}

std::size_t count_pseudo(const ScoreMatrix& scores, double eta, std::span<const LabelSet> true_labels) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < scores.rows; ++i)
        for (std::size_t k = 0; k < scores.cols; ++k)
            if (scores.at(i, k) >= eta && (true_labels.empty() || !contains(true_labels[i], scores.class_ids[k])))
                ++count;
    return count;
}

}  // namespace

std::vector<LabelSet> generate_pseudo_labels(const ScoreMatrix& scores, double eta,
                                             std::span<const LabelSet> true_labels) {
    scores.validate();
    check_true_labels(scores, true_labels);
    std::vector<LabelSet> out(scores.rows);
    for (std::size_t i = 0; i < scores.rows; ++i) {
        for (std::size_t k = 0; k < scores.cols; ++k) {
            const ClassId id = scores.class_ids[k];
            if (scores.at(i, k) >= eta && (true_labels.empty() || !contains(true_labels[i], id)))
                out[i].push_back(id);
        }
        normalize(out[i]);
    }
    return out;
}

PseudoLabelReport dynamic_threshold_search(const ScoreMatrix& scores, const DplConfig& config, double mu_t,
                                           std::span<const LabelSet> true_labels) {
    config.validate();
    scores.validate();
    check_true_labels(scores, true_labels);
    if (scores.rows == 0) throw ValueError("dynamic_threshold_search: no images");

    const double images = static_cast<double>(scores.rows);
    // Thresholds live on the lattice eta_init + n * eta_step.
    auto eta_at = [&](long n) { return config.eta_init + static_cast<double>(n) * config.eta_step; };
    constexpr double slack = 1e-9;
    auto in_bounds = [&](long n) {
        const double eta = eta_at(n);
        return eta >= config.eta_min - slack && eta <= config.eta_max + slack;
    };

    PseudoLabelReport report;
    report.mu_t = mu_t;
    long n = 0;
    long best_n = 0;
    double best_gap = std::numeric_limits<double>::infinity();
    std::set<long> visited;
    for (;;) {
        const double beta = static_cast<double>(count_pseudo(scores, eta_at(n), true_labels)) / images;
        const double gap = std::abs(beta - mu_t);
        if (gap <= best_gap) {
            best_gap = gap;
            best_n = n;
        }
        if (gap <= config.tolerance) {
            report.converged = true;
            break;
        }
        visited.insert(n);
        if (report.iterations >= config.max_iters) break;
        const long next = beta > mu_t ? n + 1 : n - 1;
        ++report.iterations;
        if (!in_bounds(next) || visited.count(next)) break;
        n = next;
    }
    const long chosen = report.converged ? n : best_n;
    report.final_eta = eta_at(chosen);
    report.pseudo = generate_pseudo_labels(scores, report.final_eta, true_labels);
    for (const auto& set : report.pseudo) report.total_pseudo += set.size();
    report.beta = static_cast<double>(report.total_pseudo) / images;
    return report;
}

std::vector<MergedLabels> merge_labels(std::span<const LabelSet> true_labels, std::span<const LabelSet> pseudo,
                                       const LabelSet& current_classes) {
    if (!pseudo.empty() && pseudo.size() != true_labels.size())
        throw DimensionError("merge_labels: " + std::to_string(pseudo.size()) + " pseudo sets for " +
                             std::to_string(true_labels.size()) + " images");
    std::vector<MergedLabels> out(true_labels.size());
    for (std::size_t i = 0; i < true_labels.size(); ++i) {
        LabelSet truth = true_labels[i];
        normalize(truth);
        LabelSet extra = pseudo.empty() ? LabelSet{} : pseudo[i];
        normalize(extra);
        const auto clash = set_intersection(extra, current_classes);
        if (!clash.empty())
            throw ValueError("merge_labels: pseudo label " + std::to_string(clash.front()) +
                             " belongs to the current session on image " + std::to_string(i));
        out[i].pseudo = set_difference(extra, truth);
        out[i].labels = set_union(truth, out[i].pseudo);
    }
    return out;
}

}  // namespace krt
