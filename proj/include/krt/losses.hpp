#pragma once

#include <optional>
#include <vector>

#include "krt/ops.hpp"

namespace krt {

struct LossConfig {
    double gamma_pos = 0.0;
    double gamma_neg = 4.0;
    double lambda = 100.0;     // weight of the token loss
    double clamp_eps = 1e-7;
    double neg_margin = 0.0;   // probability shift on negatives; 0 disables it
    bool token_per_session = false;  // average per-session cosines instead of one flattened cosine

    void validate() const;

    bool operator==(const LossConfig&) const = default;
};

struct LossBreakdown {
    double asl = 0.0;
    double token = 0.0;
    std::optional<double> kd;
    double total = 0.0;
};

// Mean over all (sample, class) cells of
//   -(1 - p)^gamma_pos * log(p)        for y = 1
//   -p_m^gamma_neg * log(1 - p_m)      for y = 0, p_m = max(p - margin, eps)
// probs: [B x N] in [eps, 1 - eps]; targets: same shape, entries 0 or 1.
template <class T>
Var<T> asl_loss(const Var<T>& probs, const Tensor<T>& targets, const LossConfig& config);

// 1 - cos(flatten(previous), flatten(current[0..t-2])), averaged over the batch.
// previous: t-1 snapshot embeddings [B x d] (constants);
// current: t embeddings [B x d] from the model being trained.
template <class T>
Var<T> token_loss(const std::vector<Tensor<T>>& previous, const std::vector<Var<T>>& current,
                  bool per_session = false);

// 1 - mean cosine between pooled features; previous is a constant snapshot.
template <class T>
Var<T> kd_pooled_loss(const Tensor<T>& previous, const Var<T>& current);

// session 1: asl. Later sessions: asl + lambda * token.
template <class T>
Var<T> total_loss(const Var<T>& asl, const std::optional<Var<T>>& token, const LossConfig& config,
                  std::size_t session);

}  // namespace krt
