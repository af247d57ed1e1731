#pragma once

// Synthetic multi-label "images": h x w grids of c-channel cells. Each class
// owns a prototype vector; an image stamps the prototypes of its classes into
// distinct cells and adds Gaussian noise everywhere.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "krt/labels.hpp"

namespace krt {

struct GenSpec {
    std::size_t n_classes = 20;
    std::size_t h = 8;
    std::size_t w = 8;
    std::size_t c = 8;
    double avg_labels = 2.9;
    double noise_sigma = 0.5;
    double signal = 1.0;             // prototype scale
    double co_occurrence = 1.0;      // log-affinity spread; 0 gives independent labels
    std::size_t cells_per_label = 1;
    double shared_fraction = 0.0;    // variance share of a direction common to all prototypes
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    std::uint64_t seed = 0;

    std::size_t cells() const { return h * w; }
    // Largest label count an image can carry.
    std::size_t max_labels() const;
    // Throws ConfigError when the spec cannot be realized.
    void validate() const;

    bool operator==(const GenSpec&) const = default;
};

struct Example {
    std::uint64_t id = 0;
    LabelSet labels;              // generator ground truth
    std::vector<float> features;  // row-major [h x w x c]

    bool operator==(const Example&) const = default;
};

struct Dataset {
    std::size_t h = 0, w = 0, c = 0;
    std::vector<std::string> class_names;
    std::vector<Example> examples;

    std::size_t n_classes() const { return class_names.size(); }
    std::size_t feature_size() const { return h * w * c; }
    double mean_labels() const;
    bool operator==(const Dataset&) const = default;
};

struct GeneratedData {
    Dataset train;
    Dataset test;
};

// "class_000", "class_001", ...: lexicographic order equals index order.
std::vector<std::string> class_names(std::size_t n_classes);

// Poisson rate whose 1 + Poisson truncated to [1, max_labels] has mean avg.
double label_count_rate(double avg_labels, std::size_t max_labels);

// Train ids are 0..n_train-1, test ids follow. Each image draws from its own
// stream derived from (seed, id), so one image never depends on another.
GeneratedData generate(const GenSpec& spec);

// Binary format "MLDS" v1; the trailing CRC32 covers every preceding byte.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

// A dataset directory holds train.mlds and test.mlds.
void save_dataset_dir(const std::filesystem::path& dir, const GeneratedData& data);
GeneratedData load_dataset_dir(const std::filesystem::path& dir);

}  // namespace krt
