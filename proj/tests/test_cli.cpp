#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "krt/cli.hpp"

using namespace krt;
using krt::cli::Json;

namespace {

struct Call {
    int code = 0;
    std::string out, err;
};

Call krt_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "krt");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    Call c;
    c.code = cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
    c.out = out.str();
    c.err = err.str();
    return c;
}

std::filesystem::path scratch(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("krt_cli_" + name);
    std::filesystem::remove_all(p);
    return p;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

const std::vector<std::string> kTiny = {
    "--data.n_classes=6", "--data.h=4",         "--data.w=4",         "--data.c=4",
    "--data.avg_labels=2", "--data.n_train=120", "--data.n_test=40",   "--plan.inc=2",
    "--model.extractor_channels=8", "--model.ica.d=8", "--model.ica.l=8", "--model.ica.heads=2",
    "--epochs", "1"};

std::vector<std::string> tiny_run(const std::string& arm, const std::filesystem::path& out) {
    std::vector<std::string> args{"run", "--arm", arm, "--out", out.string()};
    args.insert(args.end(), kTiny.begin(), kTiny.end());
    return args;
}

// Wall clock and the echoed output directory are the only run-specific fields.
std::string without_wall_clock(const std::string& text) {
    const auto timed =
        std::regex_replace(text, std::regex("\"wall_clock_seconds\": [0-9.eE+-]+"), "\"wall_clock_seconds\": X");
    return std::regex_replace(timed, std::regex("\"out\": \"[^\"]*\""), "\"out\": X");
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config documents resolve and echo losslessly") {
    auto doc = cli::default_document();
    const auto base = cli::resolve(doc);
    CHECK(base.protocol.arm == Arm::krt);
    CHECK(base.protocol.loss.lambda == 100.0);  // auto for base 0
    CHECK(base.protocol.train.epochs == 20);
    CHECK(base.protocol.dpl.eta_init == 0.8);
    CHECK(cli::resolve(cli::to_json(base)) == base);

    cli::set_key(doc, "plan.base", "10");
    CHECK(cli::resolve(doc).protocol.loss.lambda == 300.0);
    cli::set_key(doc, "arm", "krt_r");
    const auto replay = cli::resolve(doc);
    CHECK(replay.protocol.buffer.kind == BufferPolicy::Kind::per_class);
    CHECK(replay.protocol.buffer.capacity == 5);
    cli::set_key(doc, "arm", "er");
    CHECK(cli::resolve(doc).protocol.buffer.capacity == 20);
    CHECK(cli::resolve(cli::to_json(replay)) == replay);
}

TEST_CASE("config errors name the offending path") {
    auto doc = cli::default_document();
    CHECK_THROWS_WITH_AS(cli::merge_strict(doc, Json::parse(R"({"loss": {"lamda": 3}})")),
                         doctest::Contains("loss.lamda"), ConfigError);
    CHECK_THROWS_WITH_AS(cli::set_key(doc, "train.nope", "1"), doctest::Contains("train.nope"), ConfigError);
    cli::set_key(doc, "train.epochs", "\"ten\"");
    CHECK_THROWS_WITH_AS(cli::resolve(doc), doctest::Contains("train.epochs"), ConfigError);
    auto arm = cli::default_document();
    cli::set_key(arm, "arm", "magic");
    CHECK_THROWS_AS(cli::resolve(arm), ConfigError);
}

TEST_CASE("exit codes and one-line errors") {
    CHECK(cli::exit_code(ErrorKind::config) == 2);
    CHECK(cli::exit_code(ErrorKind::value) == 2);
    CHECK(cli::exit_code(ErrorKind::data) == 3);
    CHECK(cli::exit_code(ErrorKind::io) == 3);
    CHECK(cli::exit_code(ErrorKind::runtime) == 4);

    const auto unknown = krt_cli({"run", "--bogus"});
    CHECK(unknown.code == 2);
    CHECK(unknown.err.rfind("E_CONFIG: ", 0) == 0);
    CHECK(std::count(unknown.err.begin(), unknown.err.end(), '\n') == 1);

    CHECK(krt_cli({"run", "--arm", "krt", "--buffer-per-class", "5", "--print-config"}).code == 2);
    CHECK(krt_cli({"run", "--buffer-per-class", "5", "--buffer-total", "9"}).code == 2);
    CHECK(krt_cli({"run", "--loss.nope=1", "--print-config"}).code == 2);
    CHECK(krt_cli({}).code == 2);

    const auto missing = krt_cli({"run", "--dataset", scratch("no_such_dir").string(), "--epochs", "1"});
    CHECK(missing.code == 3);
    CHECK(missing.err.rfind("E_", 0) == 0);
}

TEST_CASE("print-config applies layers in precedence order") {
    const auto file = scratch("layers.json");
    spit(file, R"({"seed": 4, "train": {"epochs": 7, "lr": 0.01}})");
    const auto r = krt_cli({"run", "--config", file.string(), "--train.epochs=9", "--seed", "11", "--print-config"});
    REQUIRE(r.code == 0);
    const auto doc = Json::parse(r.out);
    CHECK(doc["seed"] == 11);
    CHECK(doc["train"]["epochs"] == 9);
    CHECK(doc["train"]["lr"] == 0.01);
    std::filesystem::remove(file);
}

TEST_CASE("runs write results that reload and repeat byte for byte") {
    const auto a = scratch("run_a"), b = scratch("run_b");
    REQUIRE(krt_cli(tiny_run("krt", a)).code == 0);
    REQUIRE(krt_cli(tiny_run("krt", b)).code == 0);
    for (const char* f : {"results.json", "summary.csv", "curves.tsv"}) CHECK(std::filesystem::exists(a / f));
    CHECK(without_wall_clock(slurp(a / "results.json")) == without_wall_clock(slurp(b / "results.json")));
    CHECK(slurp(a / "summary.csv") == slurp(b / "summary.csv"));

    const auto loaded = cli::load_result(a / "results.json");
    CHECK(loaded.sessions.size() == 3);
    CHECK(cli::result_from_json(cli::to_json(loaded)) == loaded);
    CHECK(slurp(a / "summary.csv").rfind("session,map,cf1,of1\n", 0) == 0);
    CHECK(slurp(a / "curves.tsv").rfind("session\tclasses_seen\tmap\n", 0) == 0);
    CHECK(cli::summary_csv(loaded) == slurp(a / "summary.csv"));

    const auto ft = scratch("run_ft");
    REQUIRE(krt_cli(tiny_run("ft", ft)).code == 0);
    const auto other = cli::load_result(ft / "results.json");
    const auto rows = cli::compare({loaded, other}, {"krt", "ft"});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].delta == Aggregates{});
    CHECK(rows[1].delta.last_map == other.aggregates.last_map - loaded.aggregates.last_map);
    CHECK(rows[1].delta.avg_map == other.aggregates.avg_map - loaded.aggregates.avg_map);
    CHECK(rows[1].session_maps.size() == 3);

    const auto table = krt_cli({"compare", a.string(), ft.string()});
    CHECK(table.code == 0);
    CHECK(table.out.find("krt") != std::string::npos);
    CHECK(table.out.find("S3") != std::string::npos);

    auto shifted = other;
    shifted.plan.inc_count = 3;
    CHECK_THROWS_AS(cli::compare({loaded, shifted}, {"a", "b"}), ConfigError);
    auto reseeded = other;
    reseeded.config.protocol.seed = 99;
    reseeded.config.data.seed = 99;
    CHECK_THROWS_AS(cli::compare({loaded, reseeded}, {"a", "b"}), ConfigError);
    CHECK_THROWS_AS(cli::compare({loaded}, {"a"}), ConfigError);
    for (const auto& p : {a, b, ft}) std::filesystem::remove_all(p);
}

TEST_CASE("generated datasets feed later runs") {
    const auto dir = scratch("gen");
    std::vector<std::string> gen{"gen", "--out", dir.string()};
    gen.insert(gen.end(), kTiny.begin(), kTiny.end() - 2);
    REQUIRE(krt_cli(gen).code == 0);
    CHECK(std::filesystem::exists(dir / "train.mlds"));
    const auto out = scratch("gen_run");
    auto run = tiny_run("ft", out);
    run.push_back("--dataset");
    run.push_back(dir.string());
    CHECK(krt_cli(run).code == 0);
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(out);
}

TEST_CASE("standalone pseudo-labeling merges true and pseudo labels") {
    const auto scores = scratch("scores.csv"), labels = scratch("labels.jsonl"), merged = scratch("merged.jsonl");
    spit(scores, "image_id,0,1\n10,0.9,0.3\n11,0.81,0.79\n");
    spit(labels, "{\"image_id\": 10, \"labels\": [3]}\n{\"image_id\": 11, \"labels\": [4]}\n");
    const auto r = krt_cli({"dpl", "--scores", scores.string(), "--labels", labels.string(), "--out", merged.string(),
                            "--mu-t", "1.0", "--current", "3,4"});
    REQUIRE(r.code == 0);
    const auto report = Json::parse(r.out);
    CHECK(report["eta"] == 0.8);
    CHECK(report["beta"] == 1.0);
    CHECK(report["converged"] == true);
    std::istringstream lines(slurp(merged));
    std::string line;
    std::vector<Json> rows;
    while (std::getline(lines, line)) rows.push_back(Json::parse(line));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0]["image_id"] == 10);
    CHECK(rows[0]["labels"] == Json::parse("[0, 3]"));
    CHECK(rows[0]["pseudo"] == Json::parse("[0]"));
    CHECK(rows[1]["labels"] == Json::parse("[0, 4]"));

    const auto target = krt_cli({"dpl", "--scores", scores.string(), "--labels", labels.string(), "--out",
                                 merged.string(), "--total-classes", "4", "--mu", "2"});
    REQUIRE(target.code == 0);
    CHECK(Json::parse(target.out)["mu_t"] == 1.0);

    spit(scores, "image_id,0,1\n10,0.9,1.3\n");
    const auto bad = krt_cli({"dpl", "--scores", scores.string(), "--labels", labels.string(), "--out", merged.string(),
                              "--mu-t", "1"});
    CHECK(bad.code != 0);
    CHECK(bad.err.rfind("E_", 0) == 0);
    spit(scores, "");
    CHECK(krt_cli({"dpl", "--scores", scores.string(), "--labels", labels.string(), "--out", merged.string(),
                   "--mu-t", "1"})
              .code == 3);
    CHECK(krt_cli({"dpl", "--scores", scores.string(), "--labels", labels.string(), "--out", merged.string()}).code ==
          2);
    for (const auto& p : {scores, labels, merged}) std::filesystem::remove(p);
}

TEST_CASE("version and help exit cleanly") {
    const auto v = krt_cli({"--version"});
    CHECK(v.code == 0);
    CHECK(v.out.find("0.1.0") != std::string::npos);
    CHECK(krt_cli({"run", "--help"}).code == 0);
}

}  // TEST_SUITE
