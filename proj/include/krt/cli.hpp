#pragma once

// Experiment runner: layered JSON configuration, full protocol runs,
// result persistence, result comparison and standalone pseudo-labeling.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "krt/protocol.hpp"

namespace krt::cli {

using Json = nlohmann::ordered_json;

struct RunConfig {
    std::optional<std::string> dataset;  // directory holding train.mlds and test.mlds
    GenSpec data;                        // used when dataset is empty; seed follows protocol.seed
    ProtocolConfig protocol;
    std::string out = "krt_out";

    bool operator==(const RunConfig&) const = default;
};

// Every configurable key with its default. "loss.lambda" is null (100 for
// plans with base 0, 300 otherwise) and "buffer.kind" is "auto" (20/class
// for er, 5/class for krt_r, none otherwise) until resolved.
Json default_document();

// Overlays `patch` onto `doc`. Keys absent from `doc` are rejected with
// their dotted path; objects merge recursively, leaves are replaced.
void merge_strict(Json& doc, const Json& patch, const std::string& path = "");

// Sets one dotted key. The value text is parsed as JSON when possible and
// kept as a string otherwise.
void set_key(Json& doc, const std::string& dotted, const std::string& value_text);

// Converts a layered document to a validated config. Throws ConfigError
// naming the offending field path.
RunConfig resolve(const Json& doc);

// Fully resolved echo; resolve(to_json(c)) == c.
Json to_json(const RunConfig& config);

struct RunResult {
    RunConfig config;
    SessionPlan plan;
    std::vector<SessionOutcome> sessions;
    Aggregates aggregates;
    double wall_clock_seconds = 0.0;
    std::string version;

    bool operator==(const RunResult&) const = default;
};

Json to_json(const RunResult& result);
RunResult result_from_json(const Json& doc);
RunResult load_result(const std::filesystem::path& path);

// Loads or generates the dataset the config names.
GeneratedData materialize_data(const RunConfig& config);

RunResult run(const RunConfig& config);

// results.json, summary.csv and curves.tsv under config.out.
void write_outputs(const RunResult& result, const std::filesystem::path& dir);
std::string summary_csv(const RunResult& result);
std::string curves_tsv(const RunResult& result);

struct CompareRow {
    std::string label;
    std::string arm;
    Aggregates aggregates;
    Aggregates delta;  // minus the first row
    std::vector<double> session_maps;
};

// Throws ConfigError when plans or datasets differ.
std::vector<CompareRow> compare(const std::vector<RunResult>& results, const std::vector<std::string>& labels);
std::string render_compare(const std::vector<CompareRow>& rows);

struct StandaloneDplInput {
    ScoreMatrix scores;
    std::vector<std::uint64_t> image_ids;
    std::vector<LabelSet> true_labels;  // aligned with score rows
};

// Score CSV: header of class ids, optionally led by "image_id"; rows of
// probabilities. Label file: one {"image_id", "labels"} object per line.
// Rows without an id column pair with label lines by position.
StandaloneDplInput read_dpl_inputs(const std::filesystem::path& scores, const std::filesystem::path& labels);
std::string merged_jsonl(const StandaloneDplInput& input, const PseudoLabelReport& report,
                         const LabelSet& current_classes);
Json report_json(const PseudoLabelReport& report);

// Entry point behind the krt executable. Returns the process exit code:
// 0 ok, 2 config error, 3 data error, 4 runtime error. Errors are written
// to `err` as one "E_<KIND>: message" line.
int main(int argc, char** argv, std::ostream& out, std::ostream& err);

int exit_code(ErrorKind kind);

// "error", "info" or "debug"; the executable reads it from KRT_LOG.
void set_log_level(const std::string& level);

}  // namespace krt::cli
