#pragma once

// Incremental cross-attention: one shared attention block queried by a
// single knowledge-transfer (KT) token, attending over a per-session
// knowledge-retention (KR) token followed by the patch tokens.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "krt/ops.hpp"
#include "krt/rng.hpp"

namespace krt {

struct IcaConfig {
    std::size_t d = 384;          // token dimension
    std::size_t l = 384;          // attention embedding dimension
    std::size_t heads = 8;
    std::size_t mlp_hidden = 0;   // 0 selects 4 * d
    double eps_norm = 1e-5;
    bool kr_init_from_kt = false; // copy the KT token into new KR tokens instead of sampling

    std::size_t head_dim() const { return l / heads; }
    std::size_t hidden() const { return mlp_hidden == 0 ? 4 * d : mlp_hidden; }
    // Throws ConfigError: l % heads != 0, d != l, or zero extents.
    void validate() const;

    bool operator==(const IcaConfig&) const = default;
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
template <class T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng& rng);

template <class T>
struct IcaState {
    IcaConfig config;
    Parameter<T> norm1_gain, norm1_bias;  // shared pre-attention norm
    Parameter<T> w_q, w_k, w_v, w_o, b_o;
    Parameter<T> norm2_gain, norm2_bias;
    Parameter<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    Parameter<T> kt_token;
    std::vector<Parameter<T>> kr_tokens;  // one per session, oldest first

    static IcaState create(const IcaConfig& config, Rng& rng);

    std::size_t session_count() const { return kr_tokens.size(); }
    // Appends a fresh KR token, freezes every older one.
    void add_session(Rng& rng);

    std::vector<Parameter<T>*> parameters();
    std::vector<const Parameter<T>*> parameters() const;
};

// The state's parameters bound to one tape.
template <class T>
struct IcaVars {
    const IcaConfig* config = nullptr;
    Var<T> norm1_gain, norm1_bias, w_q, w_k, w_v, w_o, b_o;
    Var<T> norm2_gain, norm2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    Var<T> kt_token;
    std::vector<Var<T>> kr_tokens;
};

template <class T>
IcaVars<T> bind(Tape<T>& tape, IcaState<T>& state);
// Every parameter enters the tape as a constant; no gradient reaches state.
template <class T>
IcaVars<T> bind(Tape<T>& tape, const IcaState<T>& state);

// Softmax weights of one forward pass: one [B x (L+1)] tensor per head,
// column 0 being the KR token.
template <class T>
using AttentionMaps = std::vector<Tensor<T>>;

// Multi-head cross-attention of one query row over [kr; patches].
//   query:   [1 x d]     (normalized by the caller)
//   kr:      [1 x d]     (normalized by the caller)
//   patches: [B x L x d] (normalized by the caller)
// Returns [B x d].
template <class T>
Var<T> cross_attention(const IcaVars<T>& w, const Var<T>& query, const Var<T>& kr, const Var<T>& patches,
                       AttentionMaps<T>* maps = nullptr);

// Embedding for 1-based session `session`: residual attention followed by a
// residual MLP, all pre-norm. patches: [B x L x d] -> [B x d].
template <class T>
Var<T> ica_forward(const IcaVars<T>& w, std::size_t session, const Var<T>& patches,
                   AttentionMaps<T>* maps = nullptr);

// Embeddings e^1..e^t in session order; shares the patch projections.
template <class T>
std::vector<Var<T>> forward_all_sessions(const IcaVars<T>& w, const Var<T>& patches,
                                         std::vector<AttentionMaps<T>>* maps = nullptr);

// Writes the attention weights of image `index` as a text line "heads L+1"
// followed by little-endian float32 values, row-major [heads x (L+1)].
template <class T>
void export_attention(const std::filesystem::path& path, const AttentionMaps<T>& maps, std::size_t index);

}  // namespace krt
