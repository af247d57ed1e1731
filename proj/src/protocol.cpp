#include "krt/protocol.hpp"

#include <algorithm>
#include <numeric>

#include "krt/errors.hpp"

namespace krt {

LabelSet SessionPlan::seen_through(std::size_t t) const {
    if (t > sessions.size()) throw ValueError("seen_through: session " + std::to_string(t) + " beyond plan");
    LabelSet out;
    for (std::size_t s = 0; s < t; ++s) out.insert(out.end(), sessions[s].begin(), sessions[s].end());
    normalize(out);
    return out;
}

std::size_t SessionPlan::session_of(ClassId k) const {
    for (std::size_t s = 0; s < sessions.size(); ++s)
        if (contains(sessions[s], k)) return s;
    throw ValueError("session_of: class " + std::to_string(k) + " is not in the plan");
}

SessionPlan build_plan(const std::vector<std::string>& class_names, std::size_t base, std::size_t inc) {
    const std::size_t total = class_names.size();
    if (total == 0) throw ConfigError("plan: no classes");
    if (base > total) throw ConfigError("plan.base: exceeds the class count " + std::to_string(total));
    const std::size_t first = base == 0 ? inc : base;
    if (first == 0) throw ConfigError("plan: base and inc are both zero");
    if (first < total && inc == 0) throw ConfigError("plan.inc: must be positive when base < class count");
    if (first > total) throw ConfigError("plan.inc: exceeds the class count " + std::to_string(total));
    if (first < total && (total - first) % inc != 0)
        throw ConfigError("plan: " + std::to_string(total - first) + " remaining classes do not split into chunks of " +
                          std::to_string(inc));

    std::vector<ClassId> order(total);
    std::iota(order.begin(), order.end(), ClassId{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](ClassId a, ClassId b) { return class_names[a] < class_names[b]; });
    for (std::size_t i = 1; i < total; ++i)
        if (class_names[order[i]] == class_names[order[i - 1]])
            throw ConfigError("plan: duplicate class name '" + class_names[order[i]] + "'");

    SessionPlan plan;
    plan.base_count = base;
    plan.inc_count = inc;
    for (ClassId k : order) plan.class_order.push_back(class_names[k]);
    std::size_t pos = 0;
    auto take = [&](std::size_t n) {
        LabelSet s(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + n));
        normalize(s);
        plan.sessions.push_back(std::move(s));
        pos += n;
    };
    take(first);
    while (pos < total) take(inc);
    return plan;
}

ArmTraits arm_traits(Arm arm) {
    ArmTraits t;
    switch (arm) {
        case Arm::ft: t.forbids_buffer = true; break;
        case Arm::er: t.needs_buffer = true; break;
        case Arm::kd_baseline: t.use_kd = true; t.forbids_buffer = true; break;
        case Arm::krt: t.use_ica = t.use_dpl = true; t.forbids_buffer = true; break;
        case Arm::krt_r: t.use_ica = t.use_dpl = true; t.needs_buffer = true; break;
        case Arm::krt_no_dpl: t.use_ica = true; t.forbids_buffer = true; break;
        case Arm::krt_no_ica: t.use_dpl = true; t.forbids_buffer = true; break;
        case Arm::upper_bound: t.use_ica = true; t.joint = true; t.forbids_buffer = true; break;
    }
    return t;
}

const std::vector<Arm>& all_arms() {
    static const std::vector<Arm> arms{Arm::ft,       Arm::er,         Arm::kd_baseline, Arm::krt,
                                       Arm::krt_r,    Arm::krt_no_dpl, Arm::krt_no_ica,  Arm::upper_bound};
    return arms;
}

std::string arm_name(Arm arm) {
    switch (arm) {
        case Arm::ft: return "ft";
        case Arm::er: return "er";
        case Arm::kd_baseline: return "kd_baseline";
        case Arm::krt: return "krt";
        case Arm::krt_r: return "krt_r";
        case Arm::krt_no_dpl: return "krt_no_dpl";
        case Arm::krt_no_ica: return "krt_no_ica";
        case Arm::upper_bound: return "upper_bound";
    }
    return "unknown";
}

Arm parse_arm(const std::string& name) {
    for (Arm a : all_arms())
        if (arm_name(a) == name) return a;
    throw ConfigError("arm: unknown method '" + name + "'");
}

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("train.epochs: must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size: must be positive");
    if (!(kd_weight >= 0.0)) throw ConfigError("train.kd_weight: must be >= 0");
    adam.validate();
}

void ProtocolConfig::validate() const {
    const ArmTraits t = arm_traits(arm);
    const bool has_buffer = buffer.kind != BufferPolicy::Kind::none;
    if (has_buffer && buffer.capacity == 0) throw ConfigError("buffer: capacity must be positive");
    if (t.needs_buffer && !has_buffer) throw ConfigError("buffer: arm " + arm_name(arm) + " requires a buffer");
    if (t.forbids_buffer && has_buffer) throw ConfigError("buffer: arm " + arm_name(arm) + " forbids a buffer");
    loss.validate();
    dpl.validate();
    ModelConfig m = model;
    m.use_ica = t.use_ica;
    m.validate();
    train.validate();
}

void update_buffer(RehearsalBuffer& buffer, const std::vector<std::size_t>& images,
                   const std::vector<LabelSet>& visible_labels, const LabelSet& new_classes, std::size_t session,
                   std::uint64_t seed) {
    if (images.size() != visible_labels.size())
        throw DimensionError("update_buffer: images and label sets differ in length");
    using Kind = BufferPolicy::Kind;
    if (buffer.policy.kind == Kind::none || buffer.policy.capacity == 0) return;
    Rng rng(seed);

    std::size_t quota = buffer.policy.capacity;
    if (buffer.policy.kind == Kind::total) {
        LabelSet covered;
        for (const auto& [k, list] : buffer.per_class) covered.push_back(k);
        covered = set_union(covered, new_classes);
        quota = std::max<std::size_t>(1, buffer.policy.capacity / std::max<std::size_t>(1, covered.size()));
    }

    std::map<std::size_t, std::size_t> slot_of_image;
    for (std::size_t e = 0; e < buffer.exemplars.size(); ++e) slot_of_image[buffer.exemplars[e].image] = e;
    for (ClassId k : new_classes) {
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < images.size(); ++i)
            if (contains(visible_labels[i], k)) candidates.push_back(i);
        rng.shuffle(candidates.begin(), candidates.end());
        candidates.resize(std::min(candidates.size(), quota));
        std::sort(candidates.begin(), candidates.end());
        auto& list = buffer.per_class[k];
        for (std::size_t i : candidates) {
            auto [it, inserted] = slot_of_image.try_emplace(images[i], buffer.exemplars.size());
            if (inserted) buffer.exemplars.push_back({images[i], visible_labels[i], session});
            if (std::find(list.begin(), list.end(), it->second) == list.end()) list.push_back(it->second);
        }
    }

    if (buffer.policy.kind != Kind::total) return;
    for (auto& [k, list] : buffer.per_class) {
        if (list.size() <= quota) continue;
        rng.shuffle(list.begin(), list.end());
        list.resize(quota);
        std::sort(list.begin(), list.end());
    }
    std::vector<std::size_t> remap(buffer.exemplars.size(), SIZE_MAX);
    std::vector<bool> used(buffer.exemplars.size(), false);
    for (const auto& [k, list] : buffer.per_class)
        for (std::size_t e : list) used[e] = true;
    std::vector<Exemplar> kept;
    for (std::size_t e = 0; e < buffer.exemplars.size(); ++e)
        if (used[e]) {
            remap[e] = kept.size();
            kept.push_back(std::move(buffer.exemplars[e]));
        }
    buffer.exemplars = std::move(kept);
    for (auto& [k, list] : buffer.per_class)
        for (auto& e : list) e = remap[e];
}

std::vector<std::size_t> assign_sessions(const Dataset& data, const SessionPlan& plan, std::uint64_t seed,
                                         const std::string& stream) {
    std::vector<std::size_t> owner(data.n_classes(), SIZE_MAX);
    for (std::size_t s = 0; s < plan.sessions.size(); ++s)
        for (ClassId k : plan.sessions[s]) owner.at(k) = s;
    Rng rng(derive_seed(seed, stream));
    std::vector<std::size_t> out;
    out.reserve(data.examples.size());
    for (const auto& ex : data.examples) {
        std::vector<std::size_t> touched;
        for (ClassId k : ex.labels) {
            if (k >= owner.size() || owner[k] == SIZE_MAX)
                throw DataError("example " + std::to_string(ex.id) + " carries a class outside the plan");
            touched.push_back(owner[k]);
        }
        std::sort(touched.begin(), touched.end());
        touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
        if (touched.empty()) throw DataError("example " + std::to_string(ex.id) + " has no labels");
        out.push_back(touched[rng.below(touched.size())]);
    }
    return out;
}

namespace {

constexpr std::size_t kInferBatch = 100;

struct Inference {
    std::size_t cols = 0;
    std::vector<double> probs;                   // [n x cols]
    std::vector<std::vector<Real>> embeddings;   // per session, [n x d]
    std::vector<Real> pooled;                    // [n x extractor_channels]
};

ModelState<Real> frozen_copy(const ModelState<Real>& model) {
    ModelState<Real> copy = model;
    for (auto* p : copy.parameters()) p->grad = Tensor<Real>();
    return copy;
}

}  // namespace

Learner::Learner(const GeneratedData& data, const ProtocolConfig& config)
    : data_(data), config_(config), traits_(arm_traits(config.arm)), init_rng_(derive_seed(config.seed, "init")) {
    config_.validate();
    config_.model.use_ica = traits_.use_ica;
    if (data.train.examples.empty() || data.test.examples.empty()) throw DataError("dataset: empty train or test set");
    if (data.train.class_names != data.test.class_names) throw DataError("dataset: train and test classes differ");
    const std::size_t total = data.train.n_classes();
    plan_ = traits_.joint ? build_plan(data.train.class_names, total, 0)
                          : build_plan(data.train.class_names, config.base, config.inc);
    train_session_of_ = assign_sessions(data.train, plan_, config.seed, "assign.train");
    test_session_of_ = assign_sessions(data.test, plan_, config.seed, "assign.test");
    model_ = ModelState<Real>::create(config_.model, data.train.h, data.train.w, data.train.c, init_rng_);
    buffer_.policy = config_.buffer;
}

Tensor<Real> Learner::gather_images(const Dataset& set, const std::size_t* idx, std::size_t count) const {
    const std::size_t f = set.feature_size();
    Tensor<Real> out({count, set.h, set.w, set.c});
    auto dst = out.data();
    for (std::size_t b = 0; b < count; ++b) {
        const auto& src = set.examples[idx[b]].features;
        std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(b * f));
    }
    return out;
}

Learner::Batchable Learner::session_data(std::size_t t) const {
    Batchable d;
    const LabelSet& classes = plan_.sessions[t - 1];
    for (std::size_t i = 0; i < data_.train.examples.size(); ++i) {
        if (train_session_of_[i] != t - 1) continue;
        d.images.push_back(i);
        d.visible.push_back(set_intersection(data_.train.examples[i].labels, classes));
    }
    for (const auto& ex : buffer_.exemplars) {
        d.images.push_back(ex.image);
        d.visible.push_back(ex.labels);
    }
    d.labels = d.visible;
    return d;
}

namespace {

Inference infer(const ModelState<Real>& model, const std::vector<std::size_t>& images,
                std::size_t cols, const std::function<Tensor<Real>(const std::size_t*, std::size_t)>& gather) {
    Inference r;
    r.cols = cols;
    const std::size_t n = images.size();
    r.probs.resize(n * cols);
    r.embeddings.resize(model.ica ? model.session_count() : 0);
    for (auto& e : r.embeddings) e.resize(n * model.config.ica.d);
    const std::size_t pc = model.config.extractor_channels;
    r.pooled.resize(n * pc);
    for (std::size_t start = 0; start < n; start += kInferBatch) {
        const std::size_t count = std::min(kInferBatch, n - start);
        Tape<Real> tape;
        const auto fr = forward_logits(tape, model, gather(images.data() + start, count));
        const auto probs = sigmoid(fr.logits).value();
        for (std::size_t b = 0; b < count; ++b)
            for (std::size_t j = 0; j < cols; ++j) r.probs[(start + b) * cols + j] = probs.at(b, j);
        for (std::size_t s = 0; s < r.embeddings.size(); ++s) {
            const auto src = fr.embeddings[s].value().data();
            std::copy(src.begin(), src.end(), r.embeddings[s].begin() + static_cast<std::ptrdiff_t>(start * model.config.ica.d));
        }
        const auto pooled = fr.pooled.value().data();
        std::copy(pooled.begin(), pooled.end(), r.pooled.begin() + static_cast<std::ptrdiff_t>(start * pc));
    }
    return r;
}

Tensor<Real> rows_of(const std::vector<Real>& table, std::size_t width, const std::size_t* idx, std::size_t count) {
    Tensor<Real> out({count, width});
    auto dst = out.data();
    for (std::size_t b = 0; b < count; ++b)
        std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(idx[b] * width), width,
                    dst.begin() + static_cast<std::ptrdiff_t>(b * width));
    return out;
}

}  // namespace

SessionOutcome Learner::train_session(std::size_t t, const ProtocolHooks* hooks) {
    if (t != done_ + 1) throw ValueError("train_session: expected session " + std::to_string(done_ + 1));
    if (t > plan_.session_count()) throw ValueError("train_session: plan has only " + std::to_string(plan_.session_count()) + " sessions");
    const bool incremental = t >= 2;
    if (incremental && !snapshot_) throw ValueError("train_session: no snapshot of the previous session");

    model_.add_session(plan_.sessions[t - 1], init_rng_);
    if (hooks && hooks->before_training) hooks->before_training(t, model_, snapshot());

    Batchable d = session_data(t);
    const std::size_t n = d.images.size();
    if (n == 0) throw DataError("session " + std::to_string(t) + ": empty training set");
    const std::size_t n_current = n - buffer_.size();
    auto gather_train = [&](const std::size_t* idx, std::size_t count) { return gather_images(data_.train, idx, count); };

    SessionOutcome outcome;
    outcome.train_images = n;
    std::optional<Inference> cached;
    const bool needs_snapshot = incremental && (traits_.use_dpl || traits_.use_ica || traits_.use_kd);
    if (needs_snapshot) cached = infer(*snapshot_, d.images, snapshot_->classes.size(), gather_train);

    if (incremental && traits_.use_dpl) {
        ScoreMatrix scores{n, cached->cols, cached->probs,
                           std::vector<ClassId>(snapshot_->classes.begin(), snapshot_->classes.end())};
        const double mu_t = session_target(snapshot_->classes.size(), plan_.total_classes(), config_.dpl.mu);
        const PseudoLabelReport report = dynamic_threshold_search(scores, config_.dpl, mu_t, d.visible);
        const auto merged = merge_labels(d.visible, report.pseudo, plan_.sessions[t - 1]);
        for (std::size_t i = 0; i < n; ++i) d.labels[i] = merged[i].labels;

        DplSummary s;
        s.final_eta = report.final_eta;
        s.beta = report.beta;
        s.mu_t = report.mu_t;
        s.iterations = report.iterations;
        s.converged = report.converged;
        s.total_pseudo = report.total_pseudo;
        s.images = n;
        const LabelSet old = plan_.seen_through(t - 1);
        for (std::size_t i = 0; i < n_current; ++i) {
            const LabelSet truth = set_intersection(data_.train.examples[d.images[i]].labels, old);
            s.old_signal_pairs += truth.size();
            s.restored_pairs += set_intersection(truth, merged[i].pseudo).size();
            s.false_pseudo += set_difference(merged[i].pseudo, truth).size();
        }
        outcome.dpl = s;
    }

    const std::size_t k_all = model_.classes.size();
    std::vector<std::size_t> column(data_.train.n_classes(), SIZE_MAX);
    for (std::size_t j = 0; j < k_all; ++j) column[model_.classes[j]] = j;

    Adam<Real> adam(model_.parameters(), config_.train.adam);
    Rng shuffle_rng(derive_seed(config_.seed, "shuffle." + std::to_string(t)));
    std::vector<std::size_t> order(n);
    std::vector<std::size_t> batch_images, batch_rows;
    const std::size_t bs = config_.train.batch_size;
    for (std::size_t epoch = 0; epoch < config_.train.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle_rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < n; start += bs) {
            const std::size_t count = std::min(bs, n - start);
            batch_rows.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                              order.begin() + static_cast<std::ptrdiff_t>(start + count));
            batch_images.resize(count);
            Tensor<Real> targets({count, k_all});
            for (std::size_t b = 0; b < count; ++b) {
                batch_images[b] = d.images[batch_rows[b]];
                for (ClassId k : d.labels[batch_rows[b]])
                    if (column[k] != SIZE_MAX) targets.at(b, column[k]) = Real(1);
            }

            Tape<Real> tape;
            const auto fr = forward_logits(tape, model_, gather_train(batch_images.data(), count));
            const Var<Real> asl = asl_loss(sigmoid(fr.logits), targets, config_.loss);
            std::optional<Var<Real>> token;
            if (incremental && traits_.use_ica) {
                std::vector<Tensor<Real>> previous;
                for (const auto& table : cached->embeddings)
                    previous.push_back(rows_of(table, config_.model.ica.d, batch_rows.data(), count));
                token = token_loss(previous, fr.embeddings, config_.loss.token_per_session);
            }
            Var<Real> total = total_loss(asl, token, config_.loss, t);
            if (incremental && traits_.use_kd) {
                const Tensor<Real> prev = rows_of(cached->pooled, config_.model.extractor_channels, batch_rows.data(), count);
                total = add(total, scale(kd_pooled_loss(prev, fr.pooled), static_cast<Real>(config_.train.kd_weight)));
            }
            adam.zero_grad();
            tape.backward(total);
            adam.step();
            outcome.final_loss = total.value().item();
        }
    }
    if (hooks && hooks->after_training) hooks->after_training(t, model_, snapshot());

    if (!traits_.joint && buffer_.policy.kind != BufferPolicy::Kind::none) {
        const std::vector<std::size_t> current(d.images.begin(), d.images.begin() + static_cast<std::ptrdiff_t>(n_current));
        const std::vector<LabelSet> visible(d.visible.begin(), d.visible.begin() + static_cast<std::ptrdiff_t>(n_current));
        update_buffer(buffer_, current, visible, plan_.sessions[t - 1], t,
                      derive_seed(config_.seed, "buffer." + std::to_string(t)));
    }
    outcome.buffer_size = buffer_.size();
    outcome.metrics = evaluate_cumulative(t);
    for (std::size_t i = 0; i < data_.test.examples.size(); ++i)
        if (test_session_of_[i] < t) ++outcome.test_images;
    snapshot_ = frozen_copy(model_);
    ++done_;
    return outcome;
}

MetricsRecord Learner::evaluate_cumulative(std::size_t t) const {
    if (t == 0 || t > done_ + 1 || t > plan_.session_count() || t > model_.session_count())
        throw ValueError("evaluate_cumulative: session " + std::to_string(t) + " has not been learned");
    std::vector<std::size_t> images;
    for (std::size_t i = 0; i < data_.test.examples.size(); ++i)
        if (test_session_of_[i] < t) images.push_back(i);
    std::size_t cols = 0;
    for (std::size_t s = 0; s < t; ++s) cols += plan_.sessions[s].size();
    const auto inf = infer(model_, images, cols,
                           [&](const std::size_t* idx, std::size_t count) { return gather_images(data_.test, idx, count); });
    EvalBatch batch;
    batch.n = images.size();
    batch.classes = cols;
    batch.scores = inf.probs;
    batch.truths.assign(batch.n * cols, 0);
    std::vector<std::size_t> column(data_.test.n_classes(), SIZE_MAX);
    for (std::size_t j = 0; j < cols; ++j) column[model_.classes[j]] = j;
    for (std::size_t i = 0; i < images.size(); ++i)
        for (ClassId k : data_.test.examples[images[i]].labels)
            if (column[k] != SIZE_MAX) batch.truths[i * cols + column[k]] = 1;
    MetricsRecord rec = evaluate(batch);
    rec.session = t;
    return rec;
}

RunOutcome run_protocol(const GeneratedData& data, const ProtocolConfig& config, const ProtocolHooks* hooks) {
    Learner learner(data, config);
    RunOutcome out;
    out.plan = learner.plan();
    for (std::size_t t = 1; t <= learner.plan().session_count(); ++t) out.sessions.push_back(learner.train_session(t, hooks));
    std::vector<MetricsRecord> records;
    for (const auto& s : out.sessions) records.push_back(s.metrics);
    out.aggregates = aggregate(records);
    return out;
}

}  // namespace krt
