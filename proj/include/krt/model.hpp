#pragma once

// The incremental classifier: a 3x3 patch extractor, a linear projection
// with fixed sinusoidal positions, the ICA block and one head per session.
// With use_ica off, the average-pooled extractor output feeds the heads.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "krt/ica.hpp"
#include "krt/labels.hpp"

namespace krt {

struct ModelConfig {
    std::size_t extractor_channels = 32;
    std::size_t extractor_depth = 1;
    bool use_ica = true;
    IcaConfig ica{.d = 32, .l = 32, .heads = 4};

    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct ModelState {
    ModelConfig config;
    std::size_t h = 0, w = 0, c = 0;
    std::vector<Parameter<T>> conv_w;  // layer i: [9 * c_in x extractor_channels]
    std::vector<Parameter<T>> conv_b;
    std::optional<Parameter<T>> proj_w, proj_b;  // ICA path only
    Tensor<T> positions;                          // [L x d], not trained
    std::optional<IcaState<T>> ica;
    std::vector<Parameter<T>> head_w, head_b;  // head s: [feature_dim x |C^s|]
    std::vector<ClassId> classes;              // logit column -> class id

    static ModelState create(const ModelConfig& config, std::size_t h, std::size_t w, std::size_t c, Rng& rng);

    std::size_t patches() const { return h * w; }
    std::size_t session_count() const { return head_w.size(); }
    std::size_t feature_dim() const { return config.use_ica ? config.ica.d : config.extractor_channels; }
    // New head for session_classes (sorted); with ICA also a new KR token,
    // freezing the older ones.
    void add_session(const LabelSet& session_classes, Rng& rng);

    std::vector<Parameter<T>*> parameters();
    std::vector<const Parameter<T>*> parameters() const;
};

// Bitwise equality of every parameter value and trainable flag.
template <class T>
bool identical(const ModelState<T>& a, const ModelState<T>& b);

template <class T>
struct ForwardResult {
    Var<T> logits;                  // [B x |classes|], columns in class order
    std::vector<Var<T>> embeddings; // e^1..e^t, ICA path only
    Var<T> pooled;                  // [B x extractor_channels]
};

// images: [B x h x w x c]. Trainable parameters become tape leaves.
template <class T>
ForwardResult<T> forward_logits(Tape<T>& tape, ModelState<T>& model, const Tensor<T>& images,
                                std::vector<AttentionMaps<T>>* maps = nullptr);
// Inference on a state that must stay untouched: parameters enter as constants.
template <class T>
ForwardResult<T> forward_logits(Tape<T>& tape, const ModelState<T>& model, const Tensor<T>& images,
                                std::vector<AttentionMaps<T>>* maps = nullptr);

// Fixed sinusoidal encodings: even columns sin, odd columns cos.
template <class T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim);

// "KRT1", a text manifest closed by an "end" line, then f32 payloads in
// manifest order.
void save_checkpoint(const std::filesystem::path& path, const ModelState<float>& model);
ModelState<float> load_checkpoint(const std::filesystem::path& path);

extern template struct ModelState<float>;
extern template struct ModelState<double>;

}  // namespace krt
