#include "krt/losses.hpp"

#include <string>

namespace krt {

void LossConfig::validate() const {
    if (gamma_pos < 0 || gamma_neg < 0) throw ConfigError("loss: focusing parameters must be non-negative");
    if (lambda < 0) throw ConfigError("loss: lambda must be non-negative");
    if (!(clamp_eps > 0 && clamp_eps < 0.5)) throw ConfigError("loss: clamp_eps must lie in (0, 0.5)");
    if (neg_margin < 0 || neg_margin >= 1) throw ConfigError("loss: neg_margin must lie in [0, 1)");
}

namespace {

template <class T>
Var<T> one_minus(const Var<T>& x) {
    return add_scalar(scale(x, T(-1)), T(1));
}

// max(x, floor) elementwise; the floor passes no gradient.
template <class T>
Var<T> floor_at(const Var<T>& x, T floor) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v = v < floor ? floor : v;
    return x.tape()->record(
        std::move(out), {x},
        [x, floor](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
            auto& gx = t.grad_of(x);
            const auto& xv = x.value();
            for (std::size_t i = 0; i < xv.size(); ++i)
                if (xv[i] > floor) gx[i] += g[i];
        },
        "floor_at");
}

}  // namespace

template <class T>
Var<T> asl_loss(const Var<T>& probs, const Tensor<T>& targets, const LossConfig& config) {
    if (probs.shape() != targets.shape())
        throw DimensionError("asl_loss: probs " + shape_str(probs.shape()) + " vs targets " +
                             shape_str(targets.shape()));
    for (auto y : targets.data())
        if (y != T(0) && y != T(1)) throw ValueError("asl_loss: target outside {0,1}");
    Tape<T>& tape = *probs.tape();
    const auto pos_mask = tape.constant(targets);
    Tensor<T> neg(targets.shape());
    for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = T(1) - targets[i];
    const auto neg_mask = tape.constant(std::move(neg));

    const auto eps = static_cast<T>(config.clamp_eps);
    const auto p = floor_at(probs, eps);
    const auto pos_term = mul(pow(floor_at(one_minus(p), eps), static_cast<T>(config.gamma_pos)), log(p));

    auto p_neg = p;
    if (config.neg_margin > 0) p_neg = floor_at(add_scalar(p, static_cast<T>(-config.neg_margin)), eps);
    const auto neg_term = mul(pow(p_neg, static_cast<T>(config.gamma_neg)), log(floor_at(one_minus(p_neg), eps)));

    const auto cells = add(mul(pos_mask, pos_term), mul(neg_mask, neg_term));
    return scale(mean(cells), T(-1));
}

template <class T>
Var<T> token_loss(const std::vector<Tensor<T>>& previous, const std::vector<Var<T>>& current, bool per_session) {
    if (previous.empty()) throw ValueError("token_loss: needs at least one previous embedding (session >= 2)");
    if (current.size() != previous.size() + 1)
        throw DimensionError("token_loss: expected " + std::to_string(previous.size() + 1) +
                             " current embeddings, got " + std::to_string(current.size()));
    for (std::size_t s = 0; s < previous.size(); ++s)
        if (previous[s].shape() != current[s].shape())
            throw DimensionError("token_loss: embedding shape mismatch at session " + std::to_string(s + 1));
    Tape<T>& tape = *current.front().tape();

    if (per_session) {
        std::vector<Var<T>> cosines;
        for (std::size_t s = 0; s < previous.size(); ++s)
            cosines.push_back(mean(cosine_similarity(tape.constant(previous[s]), current[s])));
        const auto avg = cosines.size() == 1 ? cosines.front() : mean(concat(
            [&] {
                std::vector<Var<T>> rows;
                for (const auto& c : cosines) rows.push_back(reshape(c, {1}));
                return rows;
            }(),
            0));
        return add_scalar(scale(avg, T(-1)), T(1));
    }

    std::vector<Tensor<T>> prev_parts = previous;
    std::vector<Var<T>> prev_vars;
    for (auto& part : prev_parts) prev_vars.push_back(tape.constant(std::move(part)));
    const std::vector<Var<T>> curr_prefix(current.begin(), current.end() - 1);
    const auto prev_flat = prev_vars.size() == 1 ? prev_vars.front() : concat(prev_vars, 1);
    const auto curr_flat = curr_prefix.size() == 1 ? curr_prefix.front() : concat(curr_prefix, 1);
    return add_scalar(scale(mean(cosine_similarity(prev_flat, curr_flat)), T(-1)), T(1));
}

template <class T>
Var<T> kd_pooled_loss(const Tensor<T>& previous, const Var<T>& current) {
    if (previous.shape() != current.shape())
        throw DimensionError("kd_pooled_loss: shape mismatch " + shape_str(previous.shape()) + " vs " +
                             shape_str(current.shape()));
    const auto prev = current.tape()->constant(previous);
    return add_scalar(scale(mean(cosine_similarity(prev, current)), T(-1)), T(1));
}

template <class T>
Var<T> total_loss(const Var<T>& asl, const std::optional<Var<T>>& token, const LossConfig& config,
                  std::size_t session) {
    if (session < 1) throw ValueError("total_loss: session must be >= 1");
    if (session == 1 || !token || config.lambda == 0) return asl;
    return add(asl, scale(*token, static_cast<T>(config.lambda)));
}

#define KRT_INSTANTIATE_LOSSES(T)                                                                    \
    template Var<T> asl_loss(const Var<T>&, const Tensor<T>&, const LossConfig&);                     \
    template Var<T> token_loss(const std::vector<Tensor<T>>&, const std::vector<Var<T>>&, bool);      \
    template Var<T> kd_pooled_loss(const Tensor<T>&, const Var<T>&);                                  \
    template Var<T> total_loss(const Var<T>&, const std::optional<Var<T>>&, const LossConfig&, std::size_t);

KRT_INSTANTIATE_LOSSES(float)
KRT_INSTANTIATE_LOSSES(double)

#undef KRT_INSTANTIATE_LOSSES

}  // namespace krt
