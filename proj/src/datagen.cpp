#include "krt/datagen.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>

#include "binio.hpp"
#include "krt/errors.hpp"
#include "krt/rng.hpp"

namespace krt {

namespace {

constexpr char kMagic[4] = {'M', 'L', 'D', 'S'};
constexpr std::uint16_t kVersion = 1;

// Probabilities of 0..max_extra extra labels under a truncated Poisson.
std::vector<double> extra_label_pmf(double rate, std::size_t max_extra) {
    std::vector<double> pmf(max_extra + 1);
    double term = 1.0;
    for (std::size_t k = 0; k <= max_extra; ++k) {
        if (k > 0) term *= rate / static_cast<double>(k);
        pmf[k] = term;
    }
    const double total = std::accumulate(pmf.begin(), pmf.end(), 0.0);
    for (double& p : pmf) p /= total;
    return pmf;
}

double pmf_mean(const std::vector<double>& pmf) {
    double m = 0.0;
    for (std::size_t k = 0; k < pmf.size(); ++k) m += static_cast<double>(k) * pmf[k];
    return m;
}

std::size_t sample_index(const std::vector<double>& weights, Rng& rng) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    double u = rng.uniform() * total;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] <= 0.0) continue;
        last_positive = i;
        if (u < weights[i]) return i;
        u -= weights[i];
    }
    return last_positive;
}

struct World {
    std::vector<std::vector<double>> prototypes;  // [n_classes][c]
    std::vector<double> affinity;                 // [n_classes x n_classes], symmetric
    std::vector<double> count_pmf;                // extra labels beyond the first
};

World build_world(const GenSpec& spec) {
    Rng rng(derive_seed(spec.seed, "datagen"));
    World world;
    world.prototypes.resize(spec.n_classes);
    for (auto& proto : world.prototypes) {
        proto.resize(spec.c);
        for (double& v : proto) v = rng.normal();
    }
    const std::size_t n = spec.n_classes;
    world.affinity.assign(n * n, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double a = std::exp(spec.co_occurrence * rng.normal());
            world.affinity[i * n + j] = a;
            world.affinity[j * n + i] = a;
        }
    // Drawn last so shared_fraction = 0 leaves every other draw unchanged.
    std::vector<double> shared(spec.c);
    if (spec.shared_fraction > 0.0)
        for (double& v : shared) v = rng.normal();
    const double own = std::sqrt(1.0 - spec.shared_fraction), common = std::sqrt(spec.shared_fraction);
    for (auto& proto : world.prototypes) {
        double norm = 0.0;
        for (std::size_t ch = 0; ch < spec.c; ++ch) {
            proto[ch] = own * proto[ch] + common * shared[ch];
            norm += proto[ch] * proto[ch];
        }
        // Unit RMS per channel, then scaled.
        const double s = spec.signal * std::sqrt(static_cast<double>(spec.c) / norm);
        for (double& v : proto) v *= s;
    }
    const std::size_t max_labels = spec.max_labels();
    world.count_pmf = extra_label_pmf(label_count_rate(spec.avg_labels, max_labels), max_labels - 1);
    return world;
}

Example make_example(const GenSpec& spec, const World& world, std::uint64_t id) {
    const std::uint64_t image_seed = derive_seed(spec.seed ^ (id * 0x9E3779B97F4A7C15ULL), "image");
    Rng rng(image_seed);
    const std::size_t n = spec.n_classes;

    const std::size_t count = 1 + sample_index(world.count_pmf, rng);
    std::vector<ClassId> chosen;
    std::vector<bool> taken(n, false);
    chosen.push_back(static_cast<ClassId>(rng.below(n)));
    taken[chosen.back()] = true;
    std::vector<double> weights(n);
    while (chosen.size() < count) {
        for (std::size_t j = 0; j < n; ++j) {
            weights[j] = 0.0;
            if (taken[j]) continue;
            for (ClassId i : chosen) weights[j] += world.affinity[i * n + j];
        }
        const auto next = static_cast<ClassId>(sample_index(weights, rng));
        chosen.push_back(next);
        taken[next] = true;
    }

    std::vector<std::size_t> cells(spec.cells());
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    rng.shuffle(cells.begin(), cells.end());

    Example ex;
    ex.id = id;
    ex.features.assign(spec.cells() * spec.c, 0.0f);
    std::size_t next_cell = 0;
    for (ClassId k : chosen)
        for (std::size_t r = 0; r < spec.cells_per_label; ++r) {
            const std::size_t cell = cells[next_cell++];
            for (std::size_t ch = 0; ch < spec.c; ++ch)
                ex.features[cell * spec.c + ch] = static_cast<float>(world.prototypes[k][ch]);
        }
    for (float& v : ex.features) v += static_cast<float>(spec.noise_sigma * rng.normal());
    ex.labels = std::move(chosen);
    normalize(ex.labels);
    return ex;
}

Dataset empty_like(const GenSpec& spec) {
    Dataset d;
    d.h = spec.h;
    d.w = spec.w;
    d.c = spec.c;
    d.class_names = class_names(spec.n_classes);
    return d;
}

}  // namespace

std::size_t GenSpec::max_labels() const {
    if (cells_per_label == 0) return 0;
    return std::min(n_classes, cells() / cells_per_label);
}

void GenSpec::validate() const {
    if (n_classes < 2) throw ConfigError("data.n_classes: need at least 2 classes");
    if (n_classes > 100000) throw ConfigError("data.n_classes: too many classes");
    if (h == 0 || w == 0 || c == 0) throw ConfigError("data: grid extents must be positive");
    if (cells_per_label == 0) throw ConfigError("data.cells_per_label: must be positive");
    if (!(avg_labels >= 1.0 && avg_labels <= static_cast<double>(n_classes)))
        throw ConfigError("data.avg_labels: must lie in [1, n_classes]");
    if (avg_labels > static_cast<double>(max_labels()))
        throw ConfigError("data.avg_labels: more labels per image than the grid has room for");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("data.noise_sigma: must be >= 0");
    if (!(signal > 0.0) || !std::isfinite(signal)) throw ConfigError("data.signal: must be positive");
    if (!(co_occurrence >= 0.0) || !std::isfinite(co_occurrence))
        throw ConfigError("data.co_occurrence: must be >= 0");
    if (!(shared_fraction >= 0.0 && shared_fraction < 1.0))
        throw ConfigError("data.shared_fraction: must lie in [0, 1)");
    if (n_train == 0 || n_test == 0) throw ConfigError("data: n_train and n_test must be positive");
}

double Dataset::mean_labels() const {
    if (examples.empty()) return 0.0;
    std::size_t total = 0;
    for (const auto& ex : examples) total += ex.labels.size();
    return static_cast<double>(total) / static_cast<double>(examples.size());
}

std::vector<std::string> class_names(std::size_t n_classes) {
    const int width = n_classes <= 1000 ? 3 : static_cast<int>(std::to_string(n_classes - 1).size());
    std::vector<std::string> names(n_classes);
    for (std::size_t k = 0; k < n_classes; ++k) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "class_%0*zu", width, k);
        names[k] = buf;
    }
    return names;
}

double label_count_rate(double avg_labels, std::size_t max_labels) {
    if (max_labels == 0) throw ValueError("label_count_rate: no room for labels");
    const double target = avg_labels - 1.0;
    const std::size_t max_extra = max_labels - 1;
    if (target <= 0.0 || max_extra == 0) return 0.0;
    if (target >= static_cast<double>(max_extra)) throw ValueError("label_count_rate: mean not reachable");
    double lo = 0.0, hi = 1.0;
    while (pmf_mean(extra_label_pmf(hi, max_extra)) < target) hi *= 2.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (pmf_mean(extra_label_pmf(mid, max_extra)) < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

GeneratedData generate(const GenSpec& spec) {
    spec.validate();
    const World world = build_world(spec);
    GeneratedData out{empty_like(spec), empty_like(spec)};
    out.train.examples.reserve(spec.n_train);
    out.test.examples.reserve(spec.n_test);
    for (std::uint64_t id = 0; id < spec.n_train; ++id) out.train.examples.push_back(make_example(spec, world, id));
    for (std::uint64_t id = spec.n_train; id < spec.n_train + spec.n_test; ++id)
        out.test.examples.push_back(make_example(spec, world, id));
    return out;
}

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
    if (data.examples.empty()) throw DataError("save_dataset: refusing to write an empty dataset");
    const std::size_t n_classes = data.n_classes();
    if (n_classes == 0) throw DataError("save_dataset: no classes");
    const std::size_t label_bytes = (n_classes + 7) / 8;
    binio::Writer out;
    out.bytes(kMagic, 4);
    out.uint(kVersion);
    for (std::size_t v : {data.examples.size(), data.h, data.w, data.c, n_classes}) {
        if (v > 0xFFFFFFFFu) throw DataError("save_dataset: header field exceeds 32 bits");
        out.uint(static_cast<std::uint32_t>(v));
    }
    for (const auto& name : data.class_names) out.str(name);
    std::vector<std::uint8_t> bits(label_bytes);
    for (const auto& ex : data.examples) {
        if (ex.features.size() != data.feature_size())
            throw DimensionError("save_dataset: example " + std::to_string(ex.id) + " has wrong feature count");
        out.uint(ex.id);
        std::fill(bits.begin(), bits.end(), 0);
        for (ClassId k : ex.labels) {
            if (k >= n_classes) throw DataError("save_dataset: label out of range on example " + std::to_string(ex.id));
            bits[k / 8] |= static_cast<std::uint8_t>(1u << (k % 8));
        }
        out.bytes(bits.data(), bits.size());
        for (float v : ex.features) out.f32(v);
    }
    auto& buf = out.buffer();
    const auto crc = static_cast<std::uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(buf.size())));
    out.uint(crc);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string what = path.string();
    if (buf.size() < 4 + 2 + 20 + 4) throw DataError(what + ": truncated file");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw DataError(what + ": not an MLDS file");
    binio::Reader in(buf.data() + 4, buf.size() - 4, what);
    const auto version = in.uint<std::uint16_t>();
    if (version != kVersion)
        throw DataError(what + ": unsupported MLDS version " + std::to_string(version));
    const std::size_t body = buf.size() - 4;
    const auto stored = binio::Reader(buf.data() + body, 4, what).uint<std::uint32_t>();
    const auto actual = static_cast<std::uint32_t>(crc32(0L, buf.data(), static_cast<uInt>(body)));
    if (stored != actual) throw DataError(what + ": checksum mismatch");

    Dataset d;
    const std::size_t n = in.uint<std::uint32_t>();
    d.h = in.uint<std::uint32_t>();
    d.w = in.uint<std::uint32_t>();
    d.c = in.uint<std::uint32_t>();
    const std::size_t n_classes = in.uint<std::uint32_t>();
    if (n == 0 || n_classes == 0 || d.feature_size() == 0) throw DataError(what + ": empty header field");
    d.class_names.reserve(n_classes);
    for (std::size_t k = 0; k < n_classes; ++k) d.class_names.push_back(in.str());
    const std::size_t label_bytes = (n_classes + 7) / 8;
    const std::size_t record = 8 + label_bytes + 4 * d.feature_size();
    if (in.remaining() != n * record + 4) throw DataError(what + ": record section has the wrong length");
    d.examples.resize(n);
    std::vector<std::uint8_t> bits(label_bytes);
    for (auto& ex : d.examples) {
        ex.id = in.uint<std::uint64_t>();
        in.bytes(bits.data(), label_bytes);
        for (std::size_t k = 0; k < label_bytes * 8; ++k) {
            if (!(bits[k / 8] >> (k % 8) & 1u)) continue;
            if (k >= n_classes) throw DataError(what + ": label bit beyond class count");
            ex.labels.push_back(static_cast<ClassId>(k));
        }
        ex.features.resize(d.feature_size());
        for (float& v : ex.features) {
            v = in.f32();
            if (!std::isfinite(v)) throw DataError(what + ": non-finite feature");
        }
    }
    return d;
}

void save_dataset_dir(const std::filesystem::path& dir, const GeneratedData& data) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    save_dataset(dir / "train.mlds", data.train);
    save_dataset(dir / "test.mlds", data.test);
}

GeneratedData load_dataset_dir(const std::filesystem::path& dir) {
    GeneratedData d{load_dataset(dir / "train.mlds"), load_dataset(dir / "test.mlds")};
    if (d.train.class_names != d.test.class_names || d.train.h != d.test.h || d.train.w != d.test.w ||
        d.train.c != d.test.c)
        throw DataError(dir.string() + ": train and test headers disagree");
    return d;
}

}  // namespace krt
