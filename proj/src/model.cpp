#include "krt/model.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "binio.hpp"
#include "krt/errors.hpp"

namespace krt {

void ModelConfig::validate() const {
    if (extractor_channels == 0) throw ConfigError("model.extractor_channels: must be positive");
    if (extractor_depth == 0) throw ConfigError("model.extractor_depth: must be positive");
    if (use_ica) ica.validate();
}

template <class T>
Tensor<T> sinusoidal_positions(std::size_t length, std::size_t dim) {
    Tensor<T> pe({length, dim});
    for (std::size_t pos = 0; pos < length; ++pos)
        for (std::size_t i = 0; i < dim; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
            const double angle = static_cast<double>(pos) * rate;
            pe.at(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return pe;
}

template <class T>
ModelState<T> ModelState<T>::create(const ModelConfig& config, std::size_t h, std::size_t w, std::size_t c, Rng& rng) {
    config.validate();
    if (h == 0 || w == 0 || c == 0) throw DimensionError("model: empty input grid");
    ModelState m;
    m.config = config;
    m.h = h;
    m.w = w;
    m.c = c;
    std::size_t c_in = c;
    const std::size_t c_out = config.extractor_channels;
    for (std::size_t i = 0; i < config.extractor_depth; ++i) {
        const std::string prefix = "extractor." + std::to_string(i);
        m.conv_w.emplace_back(prefix + ".w", uniform_init<T>({9 * c_in, c_out}, 9 * c_in, rng));
        m.conv_b.emplace_back(prefix + ".b", uniform_init<T>({c_out}, 9 * c_in, rng));
        c_in = c_out;
    }
    if (config.use_ica) {
        const std::size_t d = config.ica.d;
        m.proj_w.emplace("proj.w", uniform_init<T>({c_out, d}, c_out, rng));
        m.proj_b.emplace("proj.b", uniform_init<T>({d}, c_out, rng));
        m.positions = sinusoidal_positions<T>(h * w, d);
        m.ica = IcaState<T>::create(config.ica, rng);
    }
    return m;
}

template <class T>
void ModelState<T>::add_session(const LabelSet& session_classes, Rng& rng) {
    if (session_classes.empty()) throw ValueError("add_session: empty class set");
    for (ClassId k : session_classes)
        for (ClassId have : classes)
            if (k == have) throw ValueError("add_session: class " + std::to_string(k) + " already has a head");
    const std::size_t n = session_classes.size(), f = feature_dim();
    const std::string prefix = "head." + std::to_string(head_w.size());
    head_w.emplace_back(prefix + ".w", uniform_init<T>({f, n}, f, rng));
    head_b.emplace_back(prefix + ".b", Tensor<T>({n}));
    classes.insert(classes.end(), session_classes.begin(), session_classes.end());
    if (ica) ica->add_session(rng);
}

template <class T>
std::vector<Parameter<T>*> ModelState<T>::parameters() {
    std::vector<Parameter<T>*> out;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
        out.push_back(&conv_w[i]);
        out.push_back(&conv_b[i]);
    }
    if (proj_w) out.push_back(&*proj_w);
    if (proj_b) out.push_back(&*proj_b);
    if (ica)
        for (auto* p : ica->parameters()) out.push_back(p);
    for (std::size_t i = 0; i < head_w.size(); ++i) {
        out.push_back(&head_w[i]);
        out.push_back(&head_b[i]);
    }
    return out;
}

template <class T>
std::vector<const Parameter<T>*> ModelState<T>::parameters() const {
    auto ps = const_cast<ModelState*>(this)->parameters();
    return {ps.begin(), ps.end()};
}

template <class T>
bool identical(const ModelState<T>& a, const ModelState<T>& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size() || a.classes != b.classes) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i]->name != pb[i]->name || pa[i]->trainable != pb[i]->trainable || !(pa[i]->value == pb[i]->value))
            return false;
    return a.positions == b.positions;
}

namespace {

template <class T, class State, class Leaf>
ForwardResult<T> forward_impl(Tape<T>& tape, State& model, const Tensor<T>& images, Leaf&& leaf,
                              std::vector<AttentionMaps<T>>* maps) {
    if (images.rank() != 4 || images.dim(1) != model.h || images.dim(2) != model.w || images.dim(3) != model.c)
        throw DimensionError("forward_logits: expected [B x " + std::to_string(model.h) + " x " +
                             std::to_string(model.w) + " x " + std::to_string(model.c) + "], got " +
                             shape_str(images.shape()));
    if (model.session_count() == 0) throw ValueError("forward_logits: model has no heads");
    if (model.ica && model.ica->session_count() != model.session_count())
        throw DimensionError("forward_logits: heads and KR tokens are misaligned");
    const std::size_t batch = images.dim(0), cells = model.patches();
    const std::size_t channels = model.config.extractor_channels;

    Var<T> x = tape.constant(images);
    for (std::size_t i = 0; i < model.conv_w.size(); ++i) {
        Var<T> y = matmul(im2col3x3(x), leaf(model.conv_w[i]));
        y = gelu(add_rowvec(y, leaf(model.conv_b[i])));
        x = reshape(y, {batch, model.h, model.w, channels});
    }
    ForwardResult<T> out;
    out.pooled = mean_axis(reshape(x, {batch, cells, channels}), 1);

    std::vector<Var<T>> parts;
    if (model.ica) {
        Var<T> p = matmul(reshape(x, {batch * cells, channels}), leaf(*model.proj_w));
        p = reshape(add_rowvec(p, leaf(*model.proj_b)), {batch, cells, model.config.ica.d});
        p = add(p, repeat(tape.constant(model.positions), batch));
        const IcaVars<T> vars = bind(tape, *model.ica);
        out.embeddings = forward_all_sessions(vars, p, maps);
        for (std::size_t s = 0; s < model.session_count(); ++s)
            parts.push_back(add_rowvec(matmul(out.embeddings[s], leaf(model.head_w[s])), leaf(model.head_b[s])));
    } else {
        for (std::size_t s = 0; s < model.session_count(); ++s)
            parts.push_back(add_rowvec(matmul(out.pooled, leaf(model.head_w[s])), leaf(model.head_b[s])));
    }
    out.logits = parts.size() == 1 ? parts.front() : concat(parts, 1);
    return out;
}

}  // namespace

template <class T>
ForwardResult<T> forward_logits(Tape<T>& tape, ModelState<T>& model, const Tensor<T>& images,
                                std::vector<AttentionMaps<T>>* maps) {
    return forward_impl<T>(tape, model, images, [&](Parameter<T>& p) { return tape.leaf(p); }, maps);
}

template <class T>
ForwardResult<T> forward_logits(Tape<T>& tape, const ModelState<T>& model, const Tensor<T>& images,
                                std::vector<AttentionMaps<T>>* maps) {
    return forward_impl<T>(tape, model, images, [&](const Parameter<T>& p) { return tape.constant(p.value); },
                           maps);
}

namespace {

constexpr char kCheckpointMagic[4] = {'K', 'R', 'T', '1'};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState<float>& model) {
    std::ostringstream manifest;
    const auto& cfg = model.config;
    manifest << "\nmodel " << model.h << ' ' << model.w << ' ' << model.c << ' ' << cfg.extractor_channels << ' '
             << cfg.extractor_depth << ' ' << (cfg.use_ica ? 1 : 0) << ' ' << cfg.ica.d << ' ' << cfg.ica.l << ' '
             << cfg.ica.heads << ' ' << cfg.ica.mlp_hidden << ' ' << (cfg.ica.kr_init_from_kt ? 1 : 0) << '\n';
    manifest << "heads";
    for (const auto& hw : model.head_w) manifest << ' ' << hw.value.dim(1);
    manifest << "\nclasses";
    for (ClassId k : model.classes) manifest << ' ' << k;
    manifest << '\n';
    const auto params = model.parameters();
    for (const auto* p : params) {
        manifest << "param " << p->name << ' ' << (p->trainable ? 1 : 0) << ' ' << p->value.rank();
        for (std::size_t d : p->value.shape()) manifest << ' ' << d;
        manifest << '\n';
    }
    manifest << "end\n";

    binio::Writer out;
    out.bytes(kCheckpointMagic, 4);
    const std::string text = manifest.str();
    out.bytes(text.data(), text.size());
    for (const auto* p : params)
        for (float v : p->value.data()) out.f32(v);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(out.buffer().data()), static_cast<std::streamsize>(out.buffer().size()));
    if (!f) throw IoError("write failed: " + path.string());
}

ModelState<float> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string what = path.string();
    if (buf.size() < 4 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
        throw DataError(what + ": not a KRT1 checkpoint");
    const std::string_view rest(reinterpret_cast<const char*>(buf.data() + 4), buf.size() - 4);
    const auto end_pos = rest.find("\nend\n");
    if (end_pos == std::string_view::npos) throw DataError(what + ": manifest has no end line");
    std::istringstream manifest{std::string(rest.substr(0, end_pos + 1))};

    ModelConfig cfg;
    std::size_t h = 0, w = 0, c = 0;
    std::vector<std::size_t> head_sizes;
    std::vector<ClassId> classes;
    struct Entry {
        std::string name;
        bool trainable;
        Shape shape;
    };
    std::vector<Entry> entries;
    std::string line;
    bool saw_model = false;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "model") {
            int use_ica = 0, kr_copy = 0;
            ls >> h >> w >> c >> cfg.extractor_channels >> cfg.extractor_depth >> use_ica >> cfg.ica.d >> cfg.ica.l >>
                cfg.ica.heads >> cfg.ica.mlp_hidden >> kr_copy;
            cfg.use_ica = use_ica != 0;
            cfg.ica.kr_init_from_kt = kr_copy != 0;
            saw_model = true;
        } else if (tag == "heads") {
            for (std::size_t n; ls >> n;) head_sizes.push_back(n);
        } else if (tag == "classes") {
            for (ClassId k; ls >> k;) classes.push_back(k);
        } else if (tag == "param") {
            Entry e;
            int trainable = 0;
            std::size_t rank = 0;
            ls >> e.name >> trainable >> rank;
            e.trainable = trainable != 0;
            e.shape.resize(rank);
            for (auto& d : e.shape) ls >> d;
            entries.push_back(std::move(e));
        } else {
            throw DataError(what + ": unknown manifest line '" + line + "'");
        }
        if (ls.fail() && !ls.eof()) throw DataError(what + ": malformed manifest line '" + line + "'");
    }
    if (!saw_model) throw DataError(what + ": manifest lacks a model line");

    Rng scratch(0);
    ModelState<float> model;
    try {
        model = ModelState<float>::create(cfg, h, w, c, scratch);
        std::size_t offset = 0;
        for (std::size_t n : head_sizes) {
            if (offset + n > classes.size()) throw DataError(what + ": head sizes exceed class list");
            model.add_session(LabelSet(classes.begin() + offset, classes.begin() + offset + n), scratch);
            offset += n;
        }
        if (offset != classes.size()) throw DataError(what + ": class list does not match head sizes");
    } catch (const ConfigError& e) {
        throw DataError(what + ": " + e.what());
    }
    const auto params = model.parameters();
    if (params.size() != entries.size()) throw DataError(what + ": parameter count mismatch");
    binio::Reader payload(buf.data() + 4 + end_pos + 5, buf.size() - 4 - end_pos - 5, what);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto* p = params[i];
        if (p->name != entries[i].name || p->value.shape() != entries[i].shape)
            throw DataError(what + ": parameter '" + entries[i].name + "' does not match the model layout");
        p->trainable = entries[i].trainable;
        for (float& v : p->value.data()) v = payload.f32();
        p->zero_grad();
    }
    if (payload.remaining() != 0) throw DataError(what + ": trailing bytes after payload");
    return model;
}

template struct ModelState<float>;
template struct ModelState<double>;

#define KRT_INSTANTIATE_MODEL(T)                                                                                 \
    template Tensor<T> sinusoidal_positions<T>(std::size_t, std::size_t);                                        \
    template bool identical<T>(const ModelState<T>&, const ModelState<T>&);                                      \
    template ForwardResult<T> forward_logits<T>(Tape<T>&, ModelState<T>&, const Tensor<T>&,                      \
                                                std::vector<AttentionMaps<T>>*);                                 \
    template ForwardResult<T> forward_logits<T>(Tape<T>&, const ModelState<T>&, const Tensor<T>&,                \
                                                std::vector<AttentionMaps<T>>*);

KRT_INSTANTIATE_MODEL(float)
KRT_INSTANTIATE_MODEL(double)

#undef KRT_INSTANTIATE_MODEL

}  // namespace krt
