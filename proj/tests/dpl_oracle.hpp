#pragma once

// Grid oracle for the threshold search: beta is counted directly on the
// integer grid eta = k / 100, and the walk is replayed on grid indices.

#include <cmath>
#include <limits>
#include <set>

#include "krt/dpl.hpp"
#include "krt/rng.hpp"

namespace krt::testing {

inline double grid_beta(const ScoreMatrix& s, int k) {
    const double eta = k / 100.0;
    std::size_t count = 0;
    for (double v : s.values) count += v >= eta;
    return static_cast<double>(count) / static_cast<double>(s.rows);
}

struct GridOracle {
    bool feasible = false;  // some grid eta lands within tolerance
    int walk_k = 0;         // grid index the walk returns
};

// Default config only: start 80, step 1, bounds [1, 99], tolerance 0.1.
inline GridOracle grid_oracle(const ScoreMatrix& s, double mu_t) {
    GridOracle out;
    for (int k = 1; k <= 99; ++k)
        if (std::abs(grid_beta(s, k) - mu_t) <= 0.1) out.feasible = true;
    int k = 80, best_k = 80;
    double best = std::numeric_limits<double>::infinity();
    std::set<int> seen;
    for (int steps = 0; steps <= 500; ++steps) {
        const double beta = grid_beta(s, k);
        const double gap = std::abs(beta - mu_t);
        if (gap <= best) {
            best = gap;
            best_k = k;
        }
        if (gap <= 0.1) {
            best_k = k;
            break;
        }
        seen.insert(k);
        const int next = beta > mu_t ? k + 1 : k - 1;
        if (next < 1 || next > 99 || seen.count(next)) break;
        k = next;
    }
    out.walk_k = best_k;
    return out;
}

inline ScoreMatrix random_scores(Rng& rng, std::size_t rows, std::size_t cols) {
    ScoreMatrix s;
    s.rows = rows;
    s.cols = cols;
    for (std::size_t k = 0; k < cols; ++k) s.class_ids.push_back(static_cast<ClassId>(k));
    // Mixture of confident and diffuse columns so targets land on both sides of 0.8.
    for (std::size_t i = 0; i < rows * cols; ++i) {
        const double u = rng.uniform();
        s.values.push_back(rng.uniform() < 0.3 ? std::pow(u, 0.2) : u * u);
    }
    return s;
}

}  // namespace krt::testing
