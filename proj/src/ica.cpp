#include "krt/ica.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>

namespace krt {

void IcaConfig::validate() const {
    if (d == 0 || l == 0 || heads == 0) throw ConfigError("ica: d, l and heads must be positive");
    if (l % heads != 0)
        throw ConfigError("ica: l=" + std::to_string(l) + " is not divisible by heads=" + std::to_string(heads));
    if (d != l) throw ConfigError("ica: d=" + std::to_string(d) + " must equal l=" + std::to_string(l));
    if (!(eps_norm > 0)) throw ConfigError("ica: eps_norm must be positive");
}

template <class T>
Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <class T>
IcaState<T> IcaState<T>::create(const IcaConfig& config, Rng& rng) {
    config.validate();
    const std::size_t d = config.d, l = config.l, hid = config.hidden();
    IcaState s;
    s.config = config;
    s.norm1_gain = Parameter<T>("ica.norm1.gain", Tensor<T>::filled({d}, T(1)));
    s.norm1_bias = Parameter<T>("ica.norm1.bias", Tensor<T>({d}));
    s.w_q = Parameter<T>("ica.w_q", uniform_init<T>({d, l}, d, rng));
    s.w_k = Parameter<T>("ica.w_k", uniform_init<T>({d, l}, d, rng));
    s.w_v = Parameter<T>("ica.w_v", uniform_init<T>({d, l}, d, rng));
    s.w_o = Parameter<T>("ica.w_o", uniform_init<T>({l, d}, l, rng));
    s.b_o = Parameter<T>("ica.b_o", uniform_init<T>({d}, l, rng));
    s.norm2_gain = Parameter<T>("ica.norm2.gain", Tensor<T>::filled({d}, T(1)));
    s.norm2_bias = Parameter<T>("ica.norm2.bias", Tensor<T>({d}));
    s.mlp_w1 = Parameter<T>("ica.mlp.w1", uniform_init<T>({d, hid}, d, rng));
    s.mlp_b1 = Parameter<T>("ica.mlp.b1", uniform_init<T>({hid}, d, rng));
    s.mlp_w2 = Parameter<T>("ica.mlp.w2", uniform_init<T>({hid, d}, hid, rng));
    s.mlp_b2 = Parameter<T>("ica.mlp.b2", uniform_init<T>({d}, hid, rng));
    s.kt_token = Parameter<T>("ica.kt_token", uniform_init<T>({d}, d, rng));
    return s;
}

template <class T>
void IcaState<T>::add_session(Rng& rng) {
    for (auto& token : kr_tokens) token.trainable = false;
    Tensor<T> init = config.kr_init_from_kt ? kt_token.value : uniform_init<T>({config.d}, config.d, rng);
    kr_tokens.emplace_back("ica.kr_token." + std::to_string(kr_tokens.size()), std::move(init));
}

template <class T>
std::vector<Parameter<T>*> IcaState<T>::parameters() {
    std::vector<Parameter<T>*> out{&norm1_gain, &norm1_bias, &w_q,    &w_k,    &w_v,    &w_o,    &b_o,     &norm2_gain,
                                   &norm2_bias, &mlp_w1,     &mlp_b1, &mlp_w2, &mlp_b2, &kt_token};
    for (auto& token : kr_tokens) out.push_back(&token);
    return out;
}

template <class T>
std::vector<const Parameter<T>*> IcaState<T>::parameters() const {
    auto mutable_params = const_cast<IcaState*>(this)->parameters();
    return {mutable_params.begin(), mutable_params.end()};
}

namespace {

template <class T, class State, class Leaf>
IcaVars<T> bind_with(State& s, Leaf&& leaf) {
    IcaVars<T> w;
    w.config = &s.config;
    w.norm1_gain = leaf(s.norm1_gain);
    w.norm1_bias = leaf(s.norm1_bias);
    w.w_q = leaf(s.w_q);
    w.w_k = leaf(s.w_k);
    w.w_v = leaf(s.w_v);
    w.w_o = leaf(s.w_o);
    w.b_o = leaf(s.b_o);
    w.norm2_gain = leaf(s.norm2_gain);
    w.norm2_bias = leaf(s.norm2_bias);
    w.mlp_w1 = leaf(s.mlp_w1);
    w.mlp_b1 = leaf(s.mlp_b1);
    w.mlp_w2 = leaf(s.mlp_w2);
    w.mlp_b2 = leaf(s.mlp_b2);
    w.kt_token = leaf(s.kt_token);
    for (auto& token : s.kr_tokens) w.kr_tokens.push_back(leaf(token));
    return w;
}

}  // namespace

template <class T>
IcaVars<T> bind(Tape<T>& tape, IcaState<T>& s) {
    return bind_with<T>(s, [&](Parameter<T>& p) { return tape.leaf(p); });
}

template <class T>
IcaVars<T> bind(Tape<T>& tape, const IcaState<T>& s) {
    return bind_with<T>(s, [&](const Parameter<T>& p) { return tape.constant(p.value); });
}

namespace {

// Patch-side projections shared by every session.
template <class T>
struct PatchProjections {
    Var<T> q;   // [1 x l]
    Var<T> kp;  // [B x L x l]
    Var<T> vp;  // [B x L x l]
    std::size_t batch = 0;
    std::size_t length = 0;
};

template <class T>
void check_patches(const IcaVars<T>& w, const Var<T>& patches) {
    if (patches.value().rank() != 3 || patches.dim(2) != w.config->d)
        throw DimensionError("ica: patches must be [B x L x " + std::to_string(w.config->d) + "], got " +
                             shape_str(patches.shape()));
}

template <class T>
PatchProjections<T> project(const IcaVars<T>& w, const Var<T>& query, const Var<T>& patches) {
    check_patches(w, patches);
    const std::size_t d = w.config->d, l = w.config->l;
    if (query.shape() != Shape{1, d})
        throw DimensionError("ica: query must be [1 x " + std::to_string(d) + "], got " + shape_str(query.shape()));
    PatchProjections<T> p;
    p.batch = patches.dim(0);
    p.length = patches.dim(1);
    const auto flat = reshape(patches, {p.batch * p.length, d});
    p.q = matmul(query, w.w_q);
    p.kp = reshape(matmul(flat, w.w_k), {p.batch, p.length, l});
    p.vp = reshape(matmul(flat, w.w_v), {p.batch, p.length, l});
    return p;
}

template <class T>
Var<T> attend(const IcaVars<T>& w, const PatchProjections<T>& p, const Var<T>& kr, AttentionMaps<T>* maps) {
    const std::size_t d = w.config->d, heads = w.config->heads, dh = w.config->head_dim();
    if (kr.shape() != Shape{1, d})
        throw DimensionError("ica: KR token must be [1 x " + std::to_string(d) + "], got " + shape_str(kr.shape()));
    const std::size_t batch = p.batch, seq = p.length + 1;
    const auto kr_key = repeat(matmul(kr, w.w_k), batch);    // [B x 1 x l]
    const auto kr_value = repeat(matmul(kr, w.w_v), batch);  // [B x 1 x l]
    const auto keys = concat<T>({kr_key, p.kp}, 1);          // [B x L+1 x l]
    const auto values = concat<T>({kr_value, p.vp}, 1);
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));

    if (maps) maps->clear();
    std::vector<Var<T>> outputs;
    outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const auto q_col = transpose(slice(p.q, 1, h * dh, dh));                        // [dh x 1]
        const auto k_rows = reshape(slice(keys, 2, h * dh, dh), {batch * seq, dh});    // [B(L+1) x dh]
        const auto scores = reshape(matmul(k_rows, q_col), {batch, seq});
        const auto weights = softmax_rows(scale(scores, inv_scale));
        if (maps) maps->push_back(weights.value());
        const auto v_h = slice(values, 2, h * dh, dh);                                  // [B x L+1 x dh]
        outputs.push_back(reshape(bmm(reshape(weights, {batch, 1, seq}), v_h), {batch, dh}));
    }
    const auto merged = heads == 1 ? outputs.front() : concat(outputs, 1);  // [B x l]
    return add_rowvec(matmul(merged, w.w_o), w.b_o);
}

template <class T>
Var<T> norm1(const IcaVars<T>& w, const Var<T>& x) {
    return layer_norm(x, w.norm1_gain, w.norm1_bias, static_cast<T>(w.config->eps_norm));
}

template <class T>
Var<T> token_row(const Var<T>& token) {
    return reshape(token, {1, token.size()});
}

template <class T>
Var<T> finish_block(const IcaVars<T>& w, const Var<T>& attention_out, std::size_t batch) {
    const auto e1 = add(repeat(w.kt_token, batch), attention_out);
    const auto normed = layer_norm(e1, w.norm2_gain, w.norm2_bias, static_cast<T>(w.config->eps_norm));
    const auto hidden = gelu(add_rowvec(matmul(normed, w.mlp_w1), w.mlp_b1));
    const auto mlp = add_rowvec(matmul(hidden, w.mlp_w2), w.mlp_b2);
    return add(e1, mlp);
}

template <class T>
const Var<T>& kr_token_for(const IcaVars<T>& w, std::size_t session) {
    if (session < 1 || session > w.kr_tokens.size())
        throw ValueError("ica: session " + std::to_string(session) + " out of range 1.." +
                         std::to_string(w.kr_tokens.size()));
    return w.kr_tokens[session - 1];
}

}  // namespace

template <class T>
Var<T> cross_attention(const IcaVars<T>& w, const Var<T>& query, const Var<T>& kr, const Var<T>& patches,
                       AttentionMaps<T>* maps) {
    return attend(w, project(w, query, patches), kr, maps);
}

template <class T>
Var<T> ica_forward(const IcaVars<T>& w, std::size_t session, const Var<T>& patches, AttentionMaps<T>* maps) {
    const auto& kr = kr_token_for(w, session);
    check_patches(w, patches);
    const auto proj = project(w, norm1(w, token_row(w.kt_token)), norm1(w, patches));
    const auto z = attend(w, proj, norm1(w, token_row(kr)), maps);
    return finish_block(w, z, proj.batch);
}

template <class T>
std::vector<Var<T>> forward_all_sessions(const IcaVars<T>& w, const Var<T>& patches,
                                         std::vector<AttentionMaps<T>>* maps) {
    check_patches(w, patches);
    const auto proj = project(w, norm1(w, token_row(w.kt_token)), norm1(w, patches));
    std::vector<Var<T>> out;
    if (maps) maps->assign(w.kr_tokens.size(), {});
    for (std::size_t s = 1; s <= w.kr_tokens.size(); ++s) {
        const auto z = attend(w, proj, norm1(w, token_row(w.kr_tokens[s - 1])), maps ? &(*maps)[s - 1] : nullptr);
        out.push_back(finish_block(w, z, proj.batch));
    }
    return out;
}

template <class T>
void export_attention(const std::filesystem::path& path, const AttentionMaps<T>& maps, std::size_t index) {
    if (maps.empty()) throw ValueError("export_attention: no attention maps");
    const std::size_t seq = maps.front().dim(1);
    if (index >= maps.front().dim(0)) throw ValueError("export_attention: image index out of range");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << maps.size() << ' ' << seq << '\n';
    for (const auto& head : maps) {
        for (std::size_t j = 0; j < seq; ++j) {
            const auto v = static_cast<float>(head.at(index, j));
            unsigned char bytes[4];
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            for (int b = 0; b < 4; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
            out.write(reinterpret_cast<const char*>(bytes), 4);
        }
    }
    if (!out) throw IoError("failed writing " + path.string());
}

#define KRT_INSTANTIATE_ICA(T)                                                                                  \
    template Tensor<T> uniform_init<T>(Shape, std::size_t, Rng&);                                               \
    template struct IcaState<T>;                                                                                \
    template IcaVars<T> bind(Tape<T>&, IcaState<T>&);                                                           \
    template IcaVars<T> bind(Tape<T>&, const IcaState<T>&);                                                     \
    template Var<T> cross_attention(const IcaVars<T>&, const Var<T>&, const Var<T>&, const Var<T>&,             \
                                    AttentionMaps<T>*);                                                         \
    template Var<T> ica_forward(const IcaVars<T>&, std::size_t, const Var<T>&, AttentionMaps<T>*);              \
    template std::vector<Var<T>> forward_all_sessions(const IcaVars<T>&, const Var<T>&,                         \
                                                      std::vector<AttentionMaps<T>>*);                          \
    template void export_attention(const std::filesystem::path&, const AttentionMaps<T>&, std::size_t);

KRT_INSTANTIATE_ICA(float)
KRT_INSTANTIATE_ICA(double)

#undef KRT_INSTANTIATE_ICA

}  // namespace krt
