#pragma once

// Multi-label class-incremental protocol: class partitioning, per-session
// training, rehearsal, snapshots and cumulative evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "krt/datagen.hpp"
#include "krt/dpl.hpp"
#include "krt/losses.hpp"
#include "krt/metrics.hpp"
#include "krt/model.hpp"
#include "krt/optim.hpp"

namespace krt {

using Real = float;

struct SessionPlan {
    std::vector<std::string> class_order;  // lexicographic
    std::size_t base_count = 0;
    std::size_t inc_count = 0;
    std::vector<LabelSet> sessions;  // C^1..C^T as dataset class indices

    std::size_t session_count() const { return sessions.size(); }
    std::size_t total_classes() const { return class_order.size(); }
    // C^1 u ... u C^t, 1-based t.
    LabelSet seen_through(std::size_t t) const;
    // 0-based session owning class k.
    std::size_t session_of(ClassId k) const;

    bool operator==(const SessionPlan&) const = default;
};

// Sorts names; session 1 takes the first base (or inc when base is 0), then
// chunks of inc. Throws ConfigError on a remainder.
SessionPlan build_plan(const std::vector<std::string>& class_names, std::size_t base, std::size_t inc);

enum class Arm { ft, er, kd_baseline, krt, krt_r, krt_no_dpl, krt_no_ica, upper_bound };

struct ArmTraits {
    bool use_ica = false;
    bool use_dpl = false;
    bool use_kd = false;
    bool needs_buffer = false;
    bool forbids_buffer = false;
    bool joint = false;
};

ArmTraits arm_traits(Arm arm);
std::string arm_name(Arm arm);
// Throws ConfigError on an unknown name.
Arm parse_arm(const std::string& name);
const std::vector<Arm>& all_arms();

struct BufferPolicy {
    enum class Kind { none, per_class, total };
    Kind kind = Kind::none;
    std::size_t capacity = 0;

    bool operator==(const BufferPolicy&) const = default;
};

struct Exemplar {
    std::size_t image = 0;    // index into the training set
    LabelSet labels;          // labels visible when it was stored
    std::size_t session = 0;  // 1-based session it came from
};

struct RehearsalBuffer {
    BufferPolicy policy;
    std::map<ClassId, std::vector<std::size_t>> per_class;  // class -> exemplar indices
    std::vector<Exemplar> exemplars;                        // each image stored once

    std::size_t size() const { return exemplars.size(); }
};

// Samples up to the policy's per-class quota among images visibly labeled
// with each new class. The total policy shrinks older lists uniformly to
// the new quota and drops exemplars nobody references.
void update_buffer(RehearsalBuffer& buffer, const std::vector<std::size_t>& images,
                   const std::vector<LabelSet>& visible_labels, const LabelSet& new_classes, std::size_t session,
                   std::uint64_t seed);

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 16;
    AdamConfig adam;
    double kd_weight = 10.0;  // weight of the pooled-feature distillation term

    void validate() const;

    bool operator==(const TrainConfig&) const = default;
};

struct ProtocolConfig {
    Arm arm = Arm::krt;
    std::size_t base = 0;
    std::size_t inc = 5;
    BufferPolicy buffer;
    LossConfig loss;
    DplConfig dpl;
    ModelConfig model;
    TrainConfig train;
    std::uint64_t seed = 0;

    // Arm consistency plus every nested config.
    void validate() const;

    bool operator==(const ProtocolConfig&) const = default;
};

struct DplSummary {
    double final_eta = 0.0;
    double beta = 0.0;
    double mu_t = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    std::size_t total_pseudo = 0;
    std::size_t images = 0;
    // Ground-truth (image, old class) pairs among current-session images,
    // and how many of them received the matching pseudo label.
    std::size_t old_signal_pairs = 0;
    std::size_t restored_pairs = 0;
    std::size_t false_pseudo = 0;

    bool operator==(const DplSummary&) const = default;
};

struct SessionOutcome {
    MetricsRecord metrics;
    std::size_t train_images = 0;
    std::size_t buffer_size = 0;
    std::size_t test_images = 0;
    double final_loss = 0.0;
    std::optional<DplSummary> dpl;

    bool operator==(const SessionOutcome&) const = default;
};

struct RunOutcome {
    SessionPlan plan;
    std::vector<SessionOutcome> sessions;
    Aggregates aggregates;
};

// Observation points for invariant checks; any may be empty.
struct ProtocolHooks {
    // After head expansion, before any update.
    std::function<void(std::size_t t, const ModelState<Real>& model, const ModelState<Real>* snapshot)> before_training;
    std::function<void(std::size_t t, const ModelState<Real>& model, const ModelState<Real>* snapshot)> after_training;
};

// Session index (0-based) for each example: uniform among the sessions
// its labels touch, drawn from a stream of the master seed.
std::vector<std::size_t> assign_sessions(const Dataset& data, const SessionPlan& plan, std::uint64_t seed,
                                         const std::string& stream);

// Stateful runner; train_session must be called for t = 1, 2, ... in order.
class Learner {
public:
    Learner(const GeneratedData& data, const ProtocolConfig& config);

    const SessionPlan& plan() const { return plan_; }
    const ModelState<Real>& model() const { return model_; }
    const ModelState<Real>* snapshot() const { return snapshot_ ? &*snapshot_ : nullptr; }
    const RehearsalBuffer& buffer() const { return buffer_; }
    std::size_t sessions_done() const { return done_; }

    SessionOutcome train_session(std::size_t t, const ProtocolHooks* hooks = nullptr);
    // Metrics on Z^1..Z^t over C^1..C^t with the current model.
    MetricsRecord evaluate_cumulative(std::size_t t) const;

private:
    struct Batchable {
        std::vector<std::size_t> images;  // training-set indices
        std::vector<LabelSet> labels;     // training targets per image
        std::vector<LabelSet> visible;    // true labels the learner may see
    };

    Batchable session_data(std::size_t t) const;
    Tensor<Real> gather_images(const Dataset& set, const std::size_t* idx, std::size_t count) const;

    const GeneratedData& data_;
    ProtocolConfig config_;
    ArmTraits traits_;
    SessionPlan plan_;
    std::vector<std::size_t> train_session_of_;
    std::vector<std::size_t> test_session_of_;
    ModelState<Real> model_;
    std::optional<ModelState<Real>> snapshot_;
    RehearsalBuffer buffer_;
    Rng init_rng_;
    std::size_t done_ = 0;
};

RunOutcome run_protocol(const GeneratedData& data, const ProtocolConfig& config,
                        const ProtocolHooks* hooks = nullptr);

}  // namespace krt
