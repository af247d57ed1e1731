#include "krt/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "krt/errors.hpp"

#ifndef KRT_VERSION
#define KRT_VERSION "0.1.0+unknown"
#endif

namespace krt::cli {

namespace {

std::string join_path(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

const Json& lookup(const Json& doc, const std::string& dotted) {
    const Json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = dotted.find('.', start);
        const std::string key = dotted.substr(start, dot - start);
        if (!node->is_object() || !node->contains(key)) throw ConfigError(dotted + ": missing");
        node = &(*node)[key];
        if (dot == std::string::npos) return *node;
        start = dot + 1;
    }
}

std::size_t get_size(const Json& doc, const std::string& path) {
    const Json& v = lookup(doc, path);
    if (v.is_number_unsigned()) return v.get<std::size_t>();
    if (v.is_number_integer()) {
        if (v.get<std::int64_t>() < 0) throw ConfigError(path + ": must be >= 0");
        return static_cast<std::size_t>(v.get<std::int64_t>());
    }
    throw ConfigError(path + ": expected a non-negative integer");
}

std::uint64_t get_u64(const Json& doc, const std::string& path) {
    const Json& v = lookup(doc, path);
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError(path + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
}

double get_double(const Json& doc, const std::string& path) {
    const Json& v = lookup(doc, path);
    if (!v.is_number()) throw ConfigError(path + ": expected a number");
    return v.get<double>();
}

bool get_bool(const Json& doc, const std::string& path) {
    const Json& v = lookup(doc, path);
    if (!v.is_boolean()) throw ConfigError(path + ": expected true or false");
    return v.get<bool>();
}

std::string get_string(const Json& doc, const std::string& path) {
    const Json& v = lookup(doc, path);
    if (!v.is_string()) throw ConfigError(path + ": expected a string");
    return v.get<std::string>();
}

std::string buffer_kind_name(BufferPolicy::Kind kind) {
    switch (kind) {
        case BufferPolicy::Kind::none: return "none";
        case BufferPolicy::Kind::per_class: return "per_class";
        case BufferPolicy::Kind::total: return "total";
    }
    return "none";
}

BufferPolicy default_buffer(Arm arm) {
    if (arm == Arm::er) return {BufferPolicy::Kind::per_class, 20};
    if (arm == Arm::krt_r) return {BufferPolicy::Kind::per_class, 5};
    return {};
}

std::string fixed(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string signed_fixed(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%+.2f", v);
    return buf;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
    if (!out.flush()) throw IoError("write failed for '" + path.string() + "'");
}

Json labels_json(const LabelSet& set) {
    Json a = Json::array();
    for (ClassId k : set) a.push_back(k);
    return a;
}

LabelSet labels_from(const Json& v, const std::string& where) {
    if (!v.is_array()) throw DataError(where + ": expected an array of class ids");
    LabelSet out;
    for (const auto& x : v) {
        if (!x.is_number_unsigned() || x.get<std::uint64_t>() > UINT32_MAX)
            throw DataError(where + ": class ids must be non-negative integers");
        out.push_back(x.get<ClassId>());
    }
    normalize(out);
    return out;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, sep)) {
        const auto b = cur.find_first_not_of(" \t\r");
        const auto e = cur.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? std::string() : cur.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

bool parse_u64(const std::string& s, std::uint64_t& v) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) return false;
    errno = 0;
    v = std::strtoull(s.c_str(), nullptr, 10);
    return errno == 0;
}

bool parse_double(const std::string& s, double& v) {
    if (s.empty()) return false;
    char* end = nullptr;
    v = std::strtod(s.c_str(), &end);
    return end == s.c_str() + s.size();
}

}  // namespace

Json default_document() {
    const GenSpec g;
    const ProtocolConfig p;
    const IcaConfig& ica = p.model.ica;
    Json doc;
    doc["arm"] = arm_name(p.arm);
    doc["seed"] = p.seed;
    doc["out"] = "krt_out";
    doc["dataset"] = nullptr;
    doc["data"] = {{"n_classes", g.n_classes},   {"h", g.h},
                   {"w", g.w},                   {"c", g.c},
                   {"avg_labels", g.avg_labels}, {"noise_sigma", g.noise_sigma},
                   {"signal", g.signal},         {"co_occurrence", g.co_occurrence},
                   {"cells_per_label", g.cells_per_label},
                   {"shared_fraction", g.shared_fraction},
                   {"n_train", g.n_train},       {"n_test", g.n_test}};
    doc["plan"] = {{"base", p.base}, {"inc", p.inc}};
    doc["buffer"] = {{"kind", "auto"}, {"capacity", 0}};
    doc["loss"] = {{"lambda", nullptr},
                   {"gamma_pos", p.loss.gamma_pos},
                   {"gamma_neg", p.loss.gamma_neg},
                   {"clamp_eps", p.loss.clamp_eps},
                   {"neg_margin", p.loss.neg_margin},
                   {"token_per_session", p.loss.token_per_session}};
    doc["dpl"] = {{"eta_init", p.dpl.eta_init}, {"mu", p.dpl.mu},           {"eta_step", p.dpl.eta_step},
                  {"tolerance", p.dpl.tolerance}, {"eta_min", p.dpl.eta_min}, {"eta_max", p.dpl.eta_max},
                  {"max_iters", p.dpl.max_iters}};
    doc["model"] = {{"extractor_channels", p.model.extractor_channels},
                    {"extractor_depth", p.model.extractor_depth},
                    {"ica",
                     {{"d", ica.d},
                      {"l", ica.l},
                      {"heads", ica.heads},
                      {"mlp_hidden", ica.mlp_hidden},
                      {"eps_norm", ica.eps_norm},
                      {"kr_init_from_kt", ica.kr_init_from_kt}}}};
    doc["train"] = {{"epochs", p.train.epochs},         {"batch_size", p.train.batch_size},
                    {"lr", p.train.adam.lr},             {"beta1", p.train.adam.beta1},
                    {"beta2", p.train.adam.beta2},       {"eps", p.train.adam.eps},
                    {"kd_weight", p.train.kd_weight}};
    return doc;
}

void merge_strict(Json& doc, const Json& patch, const std::string& path) {
    if (!patch.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string key = join_path(path, it.key());
        if (!doc.contains(it.key())) throw ConfigError(key + ": unknown key");
        Json& slot = doc[it.key()];
        if (slot.is_object())
            merge_strict(slot, it.value(), key);
        else if (it.value().is_object())
            throw ConfigError(key + ": expected a scalar");
        else
            slot = it.value();
    }
}

void set_key(Json& doc, const std::string& dotted, const std::string& value_text) {
    if (dotted.empty()) throw ConfigError("empty configuration key");
    Json value;
    try {
        value = Json::parse(value_text);
    } catch (const Json::parse_error&) {
        value = value_text;
    }
    Json patch = value;
    std::size_t end = dotted.size();
    while (true) {
        const std::size_t dot = dotted.rfind('.', end - 1);
        const std::size_t start = dot == std::string::npos ? 0 : dot + 1;
        const std::string key = dotted.substr(start, end - start);
        if (key.empty()) throw ConfigError(dotted + ": malformed key");
        Json wrap;
        wrap[key] = std::move(patch);
        patch = std::move(wrap);
        if (dot == std::string::npos) break;
        end = dot;
    }
    merge_strict(doc, patch);
}

RunConfig resolve(const Json& in) {
    Json doc = default_document();
    merge_strict(doc, in);

    RunConfig c;
    const Json& ds = doc["dataset"];
    if (!ds.is_null()) {
        if (!ds.is_string() || ds.get<std::string>().empty()) throw ConfigError("dataset: expected a directory path or null");
        c.dataset = ds.get<std::string>();
    }
    c.out = get_string(doc, "out");
    if (c.out.empty()) throw ConfigError("out: must not be empty");

    ProtocolConfig& p = c.protocol;
    p.seed = get_u64(doc, "seed");
    p.arm = parse_arm(get_string(doc, "arm"));

    GenSpec& g = c.data;
    g.n_classes = get_size(doc, "data.n_classes");
    g.h = get_size(doc, "data.h");
    g.w = get_size(doc, "data.w");
    g.c = get_size(doc, "data.c");
    g.avg_labels = get_double(doc, "data.avg_labels");
    g.noise_sigma = get_double(doc, "data.noise_sigma");
    g.signal = get_double(doc, "data.signal");
    g.co_occurrence = get_double(doc, "data.co_occurrence");
    g.cells_per_label = get_size(doc, "data.cells_per_label");
    g.shared_fraction = get_double(doc, "data.shared_fraction");
    g.n_train = get_size(doc, "data.n_train");
    g.n_test = get_size(doc, "data.n_test");
    g.seed = p.seed;
    if (!c.dataset) g.validate();

    p.base = get_size(doc, "plan.base");
    p.inc = get_size(doc, "plan.inc");

    const std::string kind = get_string(doc, "buffer.kind");
    const std::size_t capacity = get_size(doc, "buffer.capacity");
    if (kind == "auto") {
        p.buffer = default_buffer(p.arm);
        if (capacity > 0) {
            if (p.buffer.kind == BufferPolicy::Kind::none)
                throw ConfigError("buffer.capacity: arm " + arm_name(p.arm) + " has no buffer; set buffer.kind");
            p.buffer.capacity = capacity;
        }
    } else if (kind == "none") {
        if (capacity != 0) throw ConfigError("buffer.capacity: must be 0 when buffer.kind is none");
        p.buffer = {};
    } else if (kind == "per_class") {
        p.buffer = {BufferPolicy::Kind::per_class, capacity};
    } else if (kind == "total") {
        p.buffer = {BufferPolicy::Kind::total, capacity};
    } else {
        throw ConfigError("buffer.kind: expected auto, none, per_class or total");
    }

    const Json& lambda = doc["loss"]["lambda"];
    p.loss.lambda = lambda.is_null() ? (p.base == 0 ? 100.0 : 300.0) : get_double(doc, "loss.lambda");
    p.loss.gamma_pos = get_double(doc, "loss.gamma_pos");
    p.loss.gamma_neg = get_double(doc, "loss.gamma_neg");
    p.loss.clamp_eps = get_double(doc, "loss.clamp_eps");
    p.loss.neg_margin = get_double(doc, "loss.neg_margin");
    p.loss.token_per_session = get_bool(doc, "loss.token_per_session");

    p.dpl.eta_init = get_double(doc, "dpl.eta_init");
    p.dpl.mu = get_double(doc, "dpl.mu");
    p.dpl.eta_step = get_double(doc, "dpl.eta_step");
    p.dpl.tolerance = get_double(doc, "dpl.tolerance");
    p.dpl.eta_min = get_double(doc, "dpl.eta_min");
    p.dpl.eta_max = get_double(doc, "dpl.eta_max");
    p.dpl.max_iters = get_size(doc, "dpl.max_iters");

    p.model.extractor_channels = get_size(doc, "model.extractor_channels");
    p.model.extractor_depth = get_size(doc, "model.extractor_depth");
    p.model.ica.d = get_size(doc, "model.ica.d");
    p.model.ica.l = get_size(doc, "model.ica.l");
    p.model.ica.heads = get_size(doc, "model.ica.heads");
    p.model.ica.mlp_hidden = get_size(doc, "model.ica.mlp_hidden");
    p.model.ica.eps_norm = get_double(doc, "model.ica.eps_norm");
    p.model.ica.kr_init_from_kt = get_bool(doc, "model.ica.kr_init_from_kt");
    p.model.use_ica = arm_traits(p.arm).use_ica;

    p.train.epochs = get_size(doc, "train.epochs");
    p.train.batch_size = get_size(doc, "train.batch_size");
    p.train.adam.lr = get_double(doc, "train.lr");
    p.train.adam.beta1 = get_double(doc, "train.beta1");
    p.train.adam.beta2 = get_double(doc, "train.beta2");
    p.train.adam.eps = get_double(doc, "train.eps");
    p.train.kd_weight = get_double(doc, "train.kd_weight");

    p.validate();
    return c;
}

Json to_json(const RunConfig& c) {
    const ProtocolConfig& p = c.protocol;
    const GenSpec& g = c.data;
    Json doc = default_document();
    doc["arm"] = arm_name(p.arm);
    doc["seed"] = p.seed;
    doc["out"] = c.out;
    doc["dataset"] = c.dataset ? Json(*c.dataset) : Json(nullptr);
    doc["data"] = {{"n_classes", g.n_classes},   {"h", g.h},
                   {"w", g.w},                   {"c", g.c},
                   {"avg_labels", g.avg_labels}, {"noise_sigma", g.noise_sigma},
                   {"signal", g.signal},         {"co_occurrence", g.co_occurrence},
                   {"cells_per_label", g.cells_per_label},
                   {"shared_fraction", g.shared_fraction},
                   {"n_train", g.n_train},       {"n_test", g.n_test}};
    doc["plan"] = {{"base", p.base}, {"inc", p.inc}};
    doc["buffer"] = {{"kind", buffer_kind_name(p.buffer.kind)}, {"capacity", p.buffer.capacity}};
    doc["loss"]["lambda"] = p.loss.lambda;
    doc["loss"]["gamma_pos"] = p.loss.gamma_pos;
    doc["loss"]["gamma_neg"] = p.loss.gamma_neg;
    doc["loss"]["clamp_eps"] = p.loss.clamp_eps;
    doc["loss"]["neg_margin"] = p.loss.neg_margin;
    doc["loss"]["token_per_session"] = p.loss.token_per_session;
    doc["dpl"] = {{"eta_init", p.dpl.eta_init}, {"mu", p.dpl.mu},           {"eta_step", p.dpl.eta_step},
                  {"tolerance", p.dpl.tolerance}, {"eta_min", p.dpl.eta_min}, {"eta_max", p.dpl.eta_max},
                  {"max_iters", p.dpl.max_iters}};
    Json& m = doc["model"];
    m["extractor_channels"] = p.model.extractor_channels;
    m["extractor_depth"] = p.model.extractor_depth;
    m["ica"] = {{"d", p.model.ica.d},
                {"l", p.model.ica.l},
                {"heads", p.model.ica.heads},
                {"mlp_hidden", p.model.ica.mlp_hidden},
                {"eps_norm", p.model.ica.eps_norm},
                {"kr_init_from_kt", p.model.ica.kr_init_from_kt}};
    doc["train"] = {{"epochs", p.train.epochs},         {"batch_size", p.train.batch_size},
                    {"lr", p.train.adam.lr},             {"beta1", p.train.adam.beta1},
                    {"beta2", p.train.adam.beta2},       {"eps", p.train.adam.eps},
                    {"kd_weight", p.train.kd_weight}};
    return doc;
}

Json to_json(const RunResult& r) {
    Json doc;
    doc["version"] = r.version;
    doc["config"] = to_json(r.config);

    Json plan;
    plan["class_order"] = r.plan.class_order;
    plan["base_count"] = r.plan.base_count;
    plan["inc_count"] = r.plan.inc_count;
    plan["sessions"] = Json::array();
    for (const auto& s : r.plan.sessions) plan["sessions"].push_back(labels_json(s));
    doc["plan"] = std::move(plan);

    doc["sessions"] = Json::array();
    for (const auto& s : r.sessions) {
        Json j;
        j["session"] = s.metrics.session;
        j["map"] = s.metrics.map;
        j["cf1"] = s.metrics.cf1;
        j["of1"] = s.metrics.of1;
        j["per_class_ap"] = Json::array();
        for (const auto& ap : s.metrics.per_class_ap) j["per_class_ap"].push_back(ap ? Json(*ap) : Json(nullptr));
        j["train_images"] = s.train_images;
        j["buffer_size"] = s.buffer_size;
        j["test_images"] = s.test_images;
        j["final_loss"] = s.final_loss;
        if (s.dpl) {
            const DplSummary& d = *s.dpl;
            j["dpl"] = {{"final_eta", d.final_eta},         {"beta", d.beta},
                        {"mu_t", d.mu_t},                   {"iterations", d.iterations},
                        {"converged", d.converged},         {"total_pseudo", d.total_pseudo},
                        {"images", d.images},               {"old_signal_pairs", d.old_signal_pairs},
                        {"restored_pairs", d.restored_pairs}, {"false_pseudo", d.false_pseudo}};
        } else {
            j["dpl"] = nullptr;
        }
        doc["sessions"].push_back(std::move(j));
    }
    doc["aggregates"] = {{"avg_map", r.aggregates.avg_map},
                         {"last_map", r.aggregates.last_map},
                         {"last_cf1", r.aggregates.last_cf1},
                         {"last_of1", r.aggregates.last_of1}};
    doc["wall_clock_seconds"] = r.wall_clock_seconds;
    return doc;
}

RunResult result_from_json(const Json& doc) {
    try {
        RunResult r;
        r.version = doc.at("version").get<std::string>();
        r.config = resolve(doc.at("config"));

        const Json& plan = doc.at("plan");
        r.plan.class_order = plan.at("class_order").get<std::vector<std::string>>();
        r.plan.base_count = plan.at("base_count").get<std::size_t>();
        r.plan.inc_count = plan.at("inc_count").get<std::size_t>();
        for (const auto& s : plan.at("sessions")) r.plan.sessions.push_back(labels_from(s, "plan.sessions"));

        for (const auto& j : doc.at("sessions")) {
            SessionOutcome s;
            s.metrics.session = j.at("session").get<std::size_t>();
            s.metrics.map = j.at("map").get<double>();
            s.metrics.cf1 = j.at("cf1").get<double>();
            s.metrics.of1 = j.at("of1").get<double>();
            for (const auto& ap : j.at("per_class_ap"))
                s.metrics.per_class_ap.push_back(ap.is_null() ? std::nullopt : std::optional<double>(ap.get<double>()));
            s.train_images = j.at("train_images").get<std::size_t>();
            s.buffer_size = j.at("buffer_size").get<std::size_t>();
            s.test_images = j.at("test_images").get<std::size_t>();
            s.final_loss = j.at("final_loss").get<double>();
            const Json& d = j.at("dpl");
            if (!d.is_null()) {
                DplSummary x;
                x.final_eta = d.at("final_eta").get<double>();
                x.beta = d.at("beta").get<double>();
                x.mu_t = d.at("mu_t").get<double>();
                x.iterations = d.at("iterations").get<std::size_t>();
                x.converged = d.at("converged").get<bool>();
                x.total_pseudo = d.at("total_pseudo").get<std::size_t>();
                x.images = d.at("images").get<std::size_t>();
                x.old_signal_pairs = d.at("old_signal_pairs").get<std::size_t>();
                x.restored_pairs = d.at("restored_pairs").get<std::size_t>();
                x.false_pseudo = d.at("false_pseudo").get<std::size_t>();
                s.dpl = x;
            }
            r.sessions.push_back(std::move(s));
        }
        const Json& a = doc.at("aggregates");
        r.aggregates.avg_map = a.at("avg_map").get<double>();
        r.aggregates.last_map = a.at("last_map").get<double>();
        r.aggregates.last_cf1 = a.at("last_cf1").get<double>();
        r.aggregates.last_of1 = a.at("last_of1").get<double>();
        r.wall_clock_seconds = doc.at("wall_clock_seconds").get<double>();
        return r;
    } catch (const Json::exception& e) {
        throw DataError(std::string("results: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(std::string("results: config: ") + e.what());
    }
}

RunResult load_result(const std::filesystem::path& path) {
    Json doc;
    try {
        doc = Json::parse(read_text(path));
    } catch (const Json::parse_error& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    return result_from_json(doc);
}

GeneratedData materialize_data(const RunConfig& config) {
    if (config.dataset) return load_dataset_dir(*config.dataset);
    GenSpec spec = config.data;
    spec.seed = config.protocol.seed;
    return generate(spec);
}

RunResult run(const RunConfig& config) {
    const auto start = std::chrono::steady_clock::now();
    RunResult r;
    r.config = config;
    r.version = KRT_VERSION;

    const GeneratedData data = materialize_data(config);
    spdlog::info("dataset: {} train / {} test images, {} classes", data.train.examples.size(),
                 data.test.examples.size(), data.train.n_classes());
    Learner learner(data, config.protocol);
    r.plan = learner.plan();
    spdlog::info("arm {}: {} session(s)", arm_name(config.protocol.arm), r.plan.session_count());
    for (std::size_t t = 1; t <= r.plan.session_count(); ++t) {
        SessionOutcome s = learner.train_session(t);
        spdlog::info("session {}: mAP {:.2f} CF1 {:.2f} OF1 {:.2f} loss {:.4f} train {} buffer {}", t, s.metrics.map,
                     s.metrics.cf1, s.metrics.of1, s.final_loss, s.train_images, s.buffer_size);
        if (s.dpl)
            spdlog::debug("session {} dpl: eta {:.2f} beta {:.3f} mu_t {:.3f} iterations {} converged {}", t,
                          s.dpl->final_eta, s.dpl->beta, s.dpl->mu_t, s.dpl->iterations, s.dpl->converged);
        r.sessions.push_back(std::move(s));
    }
    std::vector<MetricsRecord> records;
    for (const auto& s : r.sessions) records.push_back(s.metrics);
    r.aggregates = aggregate(records);
    r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

std::string summary_csv(const RunResult& r) {
    std::string s = "session,map,cf1,of1\n";
    for (const auto& x : r.sessions)
        s += std::to_string(x.metrics.session) + "," + fixed(x.metrics.map, 4) + "," + fixed(x.metrics.cf1, 4) + "," +
             fixed(x.metrics.of1, 4) + "\n";
    return s;
}

std::string curves_tsv(const RunResult& r) {
    std::string s = "session\tclasses_seen\tmap\n";
    for (const auto& x : r.sessions)
        s += std::to_string(x.metrics.session) + "\t" + std::to_string(r.plan.seen_through(x.metrics.session).size()) +
             "\t" + fixed(x.metrics.map, 4) + "\n";
    return s;
}

void write_outputs(const RunResult& r, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    write_text(dir / "results.json", to_json(r).dump(2) + "\n");
    write_text(dir / "summary.csv", summary_csv(r));
    write_text(dir / "curves.tsv", curves_tsv(r));
}

std::vector<CompareRow> compare(const std::vector<RunResult>& results, const std::vector<std::string>& labels) {
    if (results.size() < 2) throw ConfigError("compare: at least two results are required");
    if (labels.size() != results.size()) throw ConfigError("compare: one label per result is required");
    const RunResult& ref = results.front();
    std::vector<CompareRow> rows;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const RunResult& r = results[i];
        const bool joint = arm_traits(r.config.protocol.arm).joint || arm_traits(ref.config.protocol.arm).joint;
        if (!joint && r.plan != ref.plan)
            throw ConfigError("compare: plan of '" + labels[i] + "' differs from '" + labels[0] + "'");
        if (r.plan.class_order != ref.plan.class_order)
            throw ConfigError("compare: class set of '" + labels[i] + "' differs from '" + labels[0] + "'");
        const bool same_data = r.config.dataset == ref.config.dataset &&
                               (r.config.dataset || (r.config.data == ref.config.data &&
                                                     r.config.protocol.seed == ref.config.protocol.seed));
        if (!same_data) throw ConfigError("compare: dataset of '" + labels[i] + "' differs from '" + labels[0] + "'");
        CompareRow row;
        row.label = labels[i];
        row.arm = arm_name(r.config.protocol.arm);
        row.aggregates = r.aggregates;
        row.delta = {r.aggregates.avg_map - ref.aggregates.avg_map, r.aggregates.last_map - ref.aggregates.last_map,
                     r.aggregates.last_cf1 - ref.aggregates.last_cf1, r.aggregates.last_of1 - ref.aggregates.last_of1};
        for (const auto& s : r.sessions) row.session_maps.push_back(s.metrics.map);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string render_compare(const std::vector<CompareRow>& rows) {
    std::size_t sessions = 0, label_w = 5;
    for (const auto& r : rows) {
        sessions = std::max(sessions, r.session_maps.size());
        label_w = std::max(label_w, r.label.size());
    }
    auto pad = [](std::string s, std::size_t w) {
        if (s.size() < w) s.append(w - s.size(), ' ');
        return s;
    };
    std::string out = pad("label", label_w) + "  " + pad("arm", 12);
    for (const char* h : {"avg_map", "last_map", "last_cf1", "last_of1"}) out += "  " + pad(h, 17);
    for (std::size_t t = 1; t <= sessions; ++t) out += "  " + pad("S" + std::to_string(t), 6);
    out += "\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        out += pad(r.label, label_w) + "  " + pad(r.arm, 12);
        const double vals[] = {r.aggregates.avg_map, r.aggregates.last_map, r.aggregates.last_cf1, r.aggregates.last_of1};
        const double deltas[] = {r.delta.avg_map, r.delta.last_map, r.delta.last_cf1, r.delta.last_of1};
        for (int k = 0; k < 4; ++k) {
            std::string cell = fixed(vals[k]);
            if (i > 0) cell += " (" + signed_fixed(deltas[k]) + ")";
            out += "  " + pad(cell, 17);
        }
        for (double m : r.session_maps) out += "  " + pad(fixed(m), 6);
        out += "\n";
    }
    return out;
}

StandaloneDplInput read_dpl_inputs(const std::filesystem::path& scores_path, const std::filesystem::path& labels_path) {
    const std::string sname = scores_path.filename().string();
    const std::string lname = labels_path.filename().string();
    StandaloneDplInput in;

    std::istringstream scores(read_text(scores_path));
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false, has_id = false;
    std::vector<std::uint64_t> row_ids;
    while (std::getline(scores, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto cells = split(line, ',');
        const std::string where = sname + ":" + std::to_string(lineno);
        if (!header_seen) {
            header_seen = true;
            has_id = !cells.empty() && cells.front() == "image_id";
            for (std::size_t k = has_id ? 1 : 0; k < cells.size(); ++k) {
                std::uint64_t id = 0;
                if (!parse_u64(cells[k], id) || id > UINT32_MAX)
                    throw DataError(where + ": class id '" + cells[k] + "' is not a non-negative integer");
                in.scores.class_ids.push_back(static_cast<ClassId>(id));
            }
            LabelSet sorted = in.scores.class_ids;
            normalize(sorted);
            if (sorted.size() != in.scores.class_ids.size()) throw DataError(where + ": duplicate class id in header");
            in.scores.cols = in.scores.class_ids.size();
            continue;
        }
        const std::size_t expected = in.scores.cols + (has_id ? 1 : 0);
        if (cells.size() != expected)
            throw DataError(where + ": expected " + std::to_string(expected) + " fields, got " +
                            std::to_string(cells.size()));
        std::size_t k0 = 0;
        if (has_id) {
            std::uint64_t id = 0;
            if (!parse_u64(cells[0], id)) throw DataError(where + ": image_id '" + cells[0] + "' is not an integer");
            row_ids.push_back(id);
            k0 = 1;
        }
        for (std::size_t k = k0; k < cells.size(); ++k) {
            double v = 0.0;
            if (!parse_double(cells[k], v)) throw DataError(where + ": '" + cells[k] + "' is not a number");
            if (!(v >= 0.0 && v <= 1.0)) throw DataError(where + ": score " + cells[k] + " outside [0, 1]");
            in.scores.values.push_back(v);
        }
        ++in.scores.rows;
    }
    if (!header_seen) throw DataError(sname + ": empty score file");
    if (in.scores.rows == 0) throw DataError(sname + ": no score rows");

    std::istringstream labels(read_text(labels_path));
    std::vector<std::uint64_t> label_ids;
    std::vector<LabelSet> label_sets;
    std::map<std::uint64_t, std::size_t> by_id;
    lineno = 0;
    while (std::getline(labels, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = lname + ":" + std::to_string(lineno);
        Json j;
        try {
            j = Json::parse(line);
        } catch (const Json::parse_error& e) {
            throw DataError(where + ": invalid JSON");
        }
        if (!j.is_object() || !j.contains("image_id") || !j["image_id"].is_number_unsigned())
            throw DataError(where + ": missing non-negative integer image_id");
        if (!j.contains("labels")) throw DataError(where + ": missing labels");
        const std::uint64_t id = j["image_id"].get<std::uint64_t>();
        if (!by_id.emplace(id, label_sets.size()).second) throw DataError(where + ": duplicate image_id");
        label_ids.push_back(id);
        label_sets.push_back(labels_from(j["labels"], where));
    }
    if (label_sets.empty()) throw DataError(lname + ": empty label file");

    if (has_id) {
        for (std::size_t i = 0; i < row_ids.size(); ++i) {
            auto it = by_id.find(row_ids[i]);
            if (it == by_id.end())
                throw DataError(sname + ": image_id " + std::to_string(row_ids[i]) + " has no line in " + lname);
            in.image_ids.push_back(row_ids[i]);
            in.true_labels.push_back(label_sets[it->second]);
        }
    } else {
        if (label_sets.size() != in.scores.rows)
            throw DataError(lname + ": " + std::to_string(label_sets.size()) + " label lines for " +
                            std::to_string(in.scores.rows) + " score rows");
        in.image_ids = label_ids;
        in.true_labels = label_sets;
    }
    in.scores.validate();
    return in;
}

std::string merged_jsonl(const StandaloneDplInput& input, const PseudoLabelReport& report,
                         const LabelSet& current_classes) {
    const auto merged = merge_labels(input.true_labels, report.pseudo, current_classes);
    std::string out;
    for (std::size_t i = 0; i < merged.size(); ++i) {
        Json j;
        j["image_id"] = input.image_ids[i];
        j["labels"] = labels_json(merged[i].labels);
        j["pseudo"] = labels_json(merged[i].pseudo);
        out += j.dump() + "\n";
    }
    return out;
}

Json report_json(const PseudoLabelReport& r) {
    return Json{{"eta", r.final_eta},
                {"beta", r.beta},
                {"mu_t", r.mu_t},
                {"converged", r.converged},
                {"iterations", r.iterations},
                {"total_pseudo", r.total_pseudo},
                {"images", r.pseudo.size()}};
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config:
        case ErrorKind::value: return 2;
        case ErrorKind::data:
        case ErrorKind::io: return 3;
        default: return 4;
    }
}

void set_log_level(const std::string& level) {
    spdlog::level::level_enum lv;
    if (level == "error")
        lv = spdlog::level::err;
    else if (level == "info")
        lv = spdlog::level::info;
    else if (level == "debug")
        lv = spdlog::level::debug;
    else
        throw ConfigError("KRT_LOG: expected error, info or debug");
    auto logger = spdlog::get("krt");
    if (!logger) logger = spdlog::stderr_logger_mt("krt");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
    spdlog::set_level(lv);
}

namespace {

void configure_logging() {
    const char* env = std::getenv("KRT_LOG");
    set_log_level(env ? env : "info");
}

// Pulls "--set key=value" and "--a.b=value" pairs out of argv; the rest is
// left for the flag parser.
std::vector<std::pair<std::string, std::string>> take_dotted(std::vector<std::string>& args) {
    std::vector<std::pair<std::string, std::string>> found;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const std::string& a = args[i];
        std::string kv;
        if (a == "--set") {
            if (i + 1 >= args.size()) throw ConfigError("--set: expected key=value");
            kv = args[++i];
        } else if (a.rfind("--set=", 0) == 0) {
            kv = a.substr(6);
        } else if (a.rfind("--", 0) == 0 && a.substr(2, a.find('=') - 2).find('.') != std::string::npos) {
            kv = a.substr(2);
            if (kv.find('=') == std::string::npos) {
                if (i + 1 >= args.size()) throw ConfigError(a + ": expected a value");
                kv += "=" + args[++i];
            }
        } else {
            rest.push_back(a);
            continue;
        }
        const std::size_t eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set: expected key=value, got '" + kv + "'");
        found.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    args = std::move(rest);
    return found;
}

struct RunFlags {
    std::string config_path;
    std::optional<std::string> arm, out, dataset;
    std::optional<std::size_t> base, inc, buffer_per_class, buffer_total, epochs;
    std::optional<double> lambda, eta0, mu, gamma_pos, gamma_neg;
    std::optional<std::uint64_t> seed;
    bool print_config = false;
};

void add_run_flags(CLI::App* app, RunFlags& f, bool full) {
    app->add_option("--config", f.config_path, "JSON config file");
    app->add_option("--seed", f.seed, "Master seed");
    app->add_option("--out", f.out, "Output directory");
    if (!full) return;
    app->add_option("--arm", f.arm, "ft|er|kd_baseline|krt|krt_r|krt_no_dpl|krt_no_ica|upper_bound");
    app->add_option("--dataset", f.dataset, "Dataset directory (train.mlds, test.mlds)");
    app->add_option("--base", f.base, "Classes in session 1 (0: same as --inc)");
    app->add_option("--inc", f.inc, "Classes per later session");
    auto* per = app->add_option("--buffer-per-class", f.buffer_per_class, "Exemplars per class");
    auto* tot = app->add_option("--buffer-total", f.buffer_total, "Total exemplar budget");
    per->excludes(tot);
    app->add_option("--lambda", f.lambda, "Token loss weight");
    app->add_option("--eta0", f.eta0, "Initial pseudo-label threshold");
    app->add_option("--mu", f.mu, "Target pseudo labels per image");
    app->add_option("--gamma-pos", f.gamma_pos, "ASL positive focusing exponent");
    app->add_option("--gamma-neg", f.gamma_neg, "ASL negative focusing exponent");
    app->add_option("--epochs", f.epochs, "Epochs per session");
    app->add_flag("--print-config", f.print_config, "Print the resolved config and exit");
}

Json layered_document(const RunFlags& f, const std::vector<std::pair<std::string, std::string>>& dotted) {
    Json doc = default_document();
    if (!f.config_path.empty()) {
        Json file;
        try {
            file = Json::parse(read_text(f.config_path));
        } catch (const Json::parse_error& e) {
            throw ConfigError(f.config_path + ": invalid JSON: " + e.what());
        } catch (const IoError& e) {
            throw ConfigError(std::string("--config: ") + e.what());
        }
        merge_strict(doc, file);
    }
    for (const auto& [k, v] : dotted) set_key(doc, k, v);
    if (f.arm) doc["arm"] = *f.arm;
    if (f.seed) doc["seed"] = *f.seed;
    if (f.out) doc["out"] = *f.out;
    if (f.dataset) doc["dataset"] = *f.dataset;
    if (f.base) doc["plan"]["base"] = *f.base;
    if (f.inc) doc["plan"]["inc"] = *f.inc;
    if (f.buffer_per_class) doc["buffer"] = {{"kind", "per_class"}, {"capacity", *f.buffer_per_class}};
    if (f.buffer_total) doc["buffer"] = {{"kind", "total"}, {"capacity", *f.buffer_total}};
    if (f.lambda) doc["loss"]["lambda"] = *f.lambda;
    if (f.gamma_pos) doc["loss"]["gamma_pos"] = *f.gamma_pos;
    if (f.gamma_neg) doc["loss"]["gamma_neg"] = *f.gamma_neg;
    if (f.eta0) doc["dpl"]["eta_init"] = *f.eta0;
    if (f.mu) doc["dpl"]["mu"] = *f.mu;
    if (f.epochs) doc["train"]["epochs"] = *f.epochs;
    return doc;
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

int dispatch(std::vector<std::string> args, std::ostream& out) {
    const std::string program = args.empty() ? "krt" : args.front();
    if (!args.empty()) args.erase(args.begin());
    const auto dotted = take_dotted(args);

    CLI::App app{"Multi-label class-incremental experiment runner", program};
    app.require_subcommand(1);
    app.set_version_flag("--version", KRT_VERSION);

    RunFlags run_flags, gen_flags;
    auto* run_cmd = app.add_subcommand("run", "Run one arm end to end and write results");
    add_run_flags(run_cmd, run_flags, true);

    auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset directory");
    add_run_flags(gen_cmd, gen_flags, false);

    std::vector<std::string> compare_paths;
    std::string compare_out;
    auto* cmp_cmd = app.add_subcommand("compare", "Tabulate results against the first entry");
    cmp_cmd->add_option("results", compare_paths, "results.json files or run directories")->required();
    cmp_cmd->add_option("--out", compare_out, "Also write the table to this file");

    std::string scores_path, labels_path, merged_path, current_text;
    std::optional<std::size_t> total_classes;
    std::optional<double> mu_t;
    DplConfig dpl_cfg;
    auto* dpl_cmd = app.add_subcommand("dpl", "Pseudo-label a score matrix and merge with true labels");
    dpl_cmd->add_option("--scores", scores_path, "Score CSV")->required();
    dpl_cmd->add_option("--labels", labels_path, "Label JSON lines")->required();
    dpl_cmd->add_option("--out", merged_path, "Merged label JSON lines")->required();
    dpl_cmd->add_option("--eta0", dpl_cfg.eta_init, "Initial threshold");
    dpl_cmd->add_option("--mu", dpl_cfg.mu, "Dataset-level target");
    dpl_cmd->add_option("--step", dpl_cfg.eta_step, "Threshold step");
    dpl_cmd->add_option("--tolerance", dpl_cfg.tolerance, "Convergence tolerance");
    dpl_cmd->add_option("--max-iters", dpl_cfg.max_iters, "Adjustment cap");
    dpl_cmd->add_option("--total-classes", total_classes, "Classes learned so far including the current session");
    dpl_cmd->add_option("--mu-t", mu_t, "Session target; overrides --mu and --total-classes");
    dpl_cmd->add_option("--current", current_text, "Comma-separated current-session class ids");

    if (!dotted.empty())
        for (const auto& a : args)
            if (a == "compare" || a == "dpl") throw ConfigError("dotted configuration keys apply to run and gen only");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << KRT_VERSION << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        throw ConfigError(one_line(e.what()));
    }

    configure_logging();

    if (run_cmd->parsed()) {
        const RunConfig config = resolve(layered_document(run_flags, dotted));
        if (run_flags.print_config) {
            out << to_json(config).dump(2) << "\n";
            return 0;
        }
        const RunResult result = run(config);
        write_outputs(result, config.out);
        spdlog::info("avg mAP {:.2f} last mAP {:.2f}; wrote {}", result.aggregates.avg_map,
                     result.aggregates.last_map, config.out);
        return 0;
    }

    if (gen_cmd->parsed()) {
        const RunConfig config = resolve(layered_document(gen_flags, dotted));
        if (config.dataset) throw ConfigError("dataset: gen writes a new dataset; leave dataset null");
        const GeneratedData data = materialize_data(config);
        save_dataset_dir(config.out, data);
        spdlog::info("wrote {} train / {} test images to {}", data.train.examples.size(), data.test.examples.size(),
                     config.out);
        return 0;
    }

    if (cmp_cmd->parsed()) {
        std::vector<RunResult> results;
        for (const auto& p : compare_paths) {
            std::filesystem::path path = p;
            if (std::filesystem::is_directory(path)) path /= "results.json";
            results.push_back(load_result(path));
        }
        const std::string table = render_compare(compare(results, compare_paths));
        out << table;
        if (!compare_out.empty()) write_text(compare_out, table);
        return 0;
    }

    if (dpl_cmd->parsed()) {
        dpl_cfg.validate();
        LabelSet current;
        for (const auto& cell : split(current_text, ',')) {
            if (cell.empty()) continue;
            std::uint64_t id = 0;
            if (!parse_u64(cell, id) || id > UINT32_MAX) throw ConfigError("--current: '" + cell + "' is not a class id");
            current.push_back(static_cast<ClassId>(id));
        }
        normalize(current);
        if (!mu_t && !total_classes) throw ConfigError("dpl: --total-classes or --mu-t is required");
        if (mu_t && !(*mu_t >= 0.0)) throw ConfigError("--mu-t: must be >= 0");
        const StandaloneDplInput input = read_dpl_inputs(scores_path, labels_path);
        double target = 0.0;
        if (mu_t) {
            target = *mu_t;
        } else {
            if (*total_classes < input.scores.cols)
                throw ConfigError("--total-classes: smaller than the number of score columns");
            target = session_target(input.scores.cols, *total_classes, dpl_cfg.mu);
        }
        const PseudoLabelReport report = dynamic_threshold_search(input.scores, dpl_cfg, target, input.true_labels);
        write_text(merged_path, merged_jsonl(input, report, current));
        out << report_json(report).dump() << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv, std::ostream& out, std::ostream& err) {
    try {
        return dispatch(std::vector<std::string>(argv, argv + argc), out);
    } catch (const Error& e) {
        err << error_code(e.kind()) << ": " << one_line(e.what()) << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        err << error_code(ErrorKind::runtime) << ": " << one_line(e.what()) << "\n";
        return 4;
    }
}

}  // namespace krt::cli
