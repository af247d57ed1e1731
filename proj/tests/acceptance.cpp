// Acceptance runner: one PASS/FAIL line per criterion. Exits 0 only when
// every criterion that ran passed.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dpl_oracle.hpp"
#include "gradient_suite.hpp"
#include "krt/cli.hpp"
#include "metrics_oracle.hpp"

using namespace krt;
using krt::testing::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Verdict {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
};

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, format, args...);
    return buf;
}

// 1: finite differences over every op and the composite objective.
Verdict gradient_suite() {
    const auto start = Clock::now();
    Verdict v;
    double worst_op = 0.0, worst_composite = 0.0;
    std::size_t checked = 0;
    const auto cases = krt::testing::op_cases();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (const auto& c : cases) {
            const double e = krt::testing::op_error(c, seed);
            if (!(e < 1e-4)) v.require(false, c.name + fmt(" seed %llu rel err %.3g", (unsigned long long)seed, e));
            worst_op = std::max(worst_op, e);
        }
        const auto g = krt::testing::composite_error(seed);
        if (!(g.max_rel_error < 1e-4))
            v.require(false, fmt("composite seed %llu rel err %.3g at %s", (unsigned long long)seed, g.max_rel_error,
                                 g.worst.c_str()));
        worst_composite = std::max(worst_composite, g.max_rel_error);
        checked += g.checked;
    }
    const double secs = seconds_since(start);
    v.require(secs < 60.0, fmt("runtime %.1f s", secs));
    const std::string summary = fmt("%zu ops + composite (%zu coordinates) x 20 seeds; worst rel err op %.2e, composite %.2e; %.1f s",
                                    cases.size(), checked, worst_op, worst_composite, secs);
    v.detail = v.pass ? summary : summary + "; " + v.detail;
    return v;
}

// 2: exhaustive metric oracle and the AP worked example.
Verdict metric_oracle() {
    Verdict v;
    const double gap = krt::testing::metric_oracle_worst_gap(200, 1234);
    v.require(gap < 1e-9, fmt("oracle gap %.3g", gap));
    const std::vector<double> scores{0.9, 0.8, 0.7, 0.6};
    const double ap = *average_precision(scores, std::vector<std::uint8_t>{1, 0, 1, 0});
    v.require(ap == (1.0 + 2.0 / 3.0) / 2.0 && std::abs(ap - 0.8333) < 5e-5, fmt("AP example %.10f", ap));
    const std::string summary = fmt("200 instances, worst gap %.2e; AP example %.4f", gap, ap);
    v.detail = v.pass ? summary : summary + "; " + v.detail;
    return v;
}

// 3: incremental averages of the published per-session rows.
Verdict paper_arithmetic() {
    Verdict v;
    auto records = [](const std::vector<double>& maps) {
        std::vector<MetricsRecord> out;
        for (double m : maps) {
            MetricsRecord r;
            r.map = m;
            out.push_back(r);
        }
        return out;
    };
    const auto a5 = aggregate(records({82.37, 79.54, 78.27, 75.95, 75.18}));
    const auto a4 = aggregate(records({92.25, 81.30, 77.26, 74.69, 73.22, 72.80, 70.61, 70.17}));
    v.require(std::abs(a5.avg_map - 78.26) <= 0.01 && a5.last_map == 75.18,
              fmt("Table 5 row avg %.4f last %.2f", a5.avg_map, a5.last_map));
    v.require(std::abs(a4.avg_map - 76.54) <= 0.01 && a4.last_map == 70.17,
              fmt("Table 4 row avg %.4f last %.2f", a4.avg_map, a4.last_map));
    const std::string summary = fmt("Table 5 row avg %.4f last %.2f; Table 4 row avg %.4f last %.2f", a5.avg_map,
                                    a5.last_map, a4.avg_map, a4.last_map);
    v.detail = v.pass ? summary : summary + "; " + v.detail;
    return v;
}

// 4: threshold walk against the 1e-2 grid oracle.
Verdict dpl_oracle() {
    const auto start = Clock::now();
    Verdict v;
    Rng rng(2024);
    const DplConfig cfg;
    std::size_t feasible = 0, mismatches = 0, max_iters = 0, monotone_breaks = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const auto s = krt::testing::random_scores(rng, 20 + rng.below(200), 1 + rng.below(6));
        const double mu_t = rng.uniform(0.0, static_cast<double>(s.cols));
        const auto report = dynamic_threshold_search(s, cfg, mu_t);
        const auto oracle = krt::testing::grid_oracle(s, mu_t);
        feasible += oracle.feasible;
        const bool hit = std::abs(report.beta - mu_t) <= cfg.tolerance + 1e-12;
        if (hit != oracle.feasible || std::abs(report.final_eta - oracle.walk_k / 100.0) > 1e-9) ++mismatches;
        max_iters = std::max(max_iters, report.iterations);
        double prev = std::numeric_limits<double>::infinity();
        for (int k = 1; k <= 99; ++k) {
            std::size_t total = 0;
            for (const auto& set : generate_pseudo_labels(s, k / 100.0)) total += set.size();
            const double beta = static_cast<double>(total) / static_cast<double>(s.rows);
            if (beta > prev) ++monotone_breaks;
            prev = beta;
        }
    }
    const double target = session_target(40, 80, 2.9);
    const double secs = seconds_since(start);
    v.require(mismatches == 0, fmt("%zu oracle mismatches", mismatches));
    v.require(monotone_breaks == 0, fmt("%zu monotonicity breaks", monotone_breaks));
    v.require(max_iters < 500, fmt("max iterations %zu", max_iters));
    v.require(target == 1.45, fmt("mu_t(40, 80, 2.9) = %.17g", target));
    v.require(secs < 10.0, fmt("runtime %.1f s", secs));
    const std::string summary = fmt("500 matrices (%zu feasible), 0 mismatches required, got %zu; max iterations %zu; "
                                    "mu_t(40, 80, 2.9) = %.2f; %.2f s",
                                    feasible, mismatches, max_iters, target, secs);
    v.detail = v.pass ? summary : summary + "; " + v.detail;
    return v;
}

double token_value(const std::vector<Tensor<double>>& previous, const std::vector<Tensor<double>>& current) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& c : current) vars.push_back(tape.constant(c));
    return token_loss(previous, vars).value().item();
}

// 5: token-loss identities and bounds.
Verdict token_properties() {
    Verdict v;
    Rng rng(77);
    double worst_same = 0.0, worst_neg = 0.0, lo = 2.0, hi = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t b = 1 + rng.below(8), d = 1 + rng.below(16), t = 1 + rng.below(4);
        std::vector<Tensor<double>> prev, same, neg, other;
        for (std::size_t s = 0; s < t; ++s) {
            prev.push_back(random_tensor({b, d}, rng));
            same.push_back(prev.back());
            neg.push_back(prev.back());
            for (auto& x : neg.back().data()) x = -x;
            other.push_back(random_tensor({b, d}, rng));
        }
        // The current model carries one more embedding than the snapshot.
        for (auto* cur : {&same, &neg, &other}) cur->push_back(random_tensor({b, d}, rng));
        worst_same = std::max(worst_same, std::abs(token_value(prev, same)));
        worst_neg = std::max(worst_neg, std::abs(token_value(prev, neg) - 2.0));
        const double l = token_value(prev, other);
        lo = std::min(lo, l);
        hi = std::max(hi, l);
    }
    v.require(worst_same <= 1e-12, fmt("identical prefixes off by %.3g", worst_same));
    v.require(worst_neg <= 1e-12, fmt("negated prefixes off by %.3g", worst_neg));
    v.require(lo >= 0.0 && hi <= 2.0, fmt("random pairs span [%.6f, %.6f]", lo, hi));
    const std::string summary = fmt("identical |L| <= %.1e, negated |L-2| <= %.1e, 1000 random pairs in [%.4f, %.4f]",
                                    worst_same, worst_neg, lo, hi);
    v.detail = v.pass ? summary : summary + "; " + v.detail;
    return v;
}

// 6: focusing-free collapse to BCE and the gamma_neg = 4 example.
Verdict asl_collapse() {
    Verdict v;
    const LossConfig bce{.gamma_pos = 0.0, .gamma_neg = 0.0};
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(derive_seed(seed, "acceptance.asl"));
        const std::size_t b = 1 + rng.below(8), n = 1 + rng.below(10);
        const auto probs = random_tensor({b, n}, rng, 0.001, 0.999);
        Tensor<double> y({b, n});
        for (auto& x : y.data()) x = rng.uniform() < 0.5 ? 1.0 : 0.0;
        long double expect = 0.0L;
        for (std::size_t i = 0; i < probs.size(); ++i)
            expect -= y[i] == 1.0 ? std::log(static_cast<long double>(probs[i]))
                                  : std::log1p(-static_cast<long double>(probs[i]));
        expect /= static_cast<long double>(probs.size());
        Tape<double> tape;
        const double got = asl_loss(tape.constant(probs), y, bce).value().item();
        worst = std::max(worst, std::abs(got - static_cast<double>(expect)));
    }
    Tape<double> tape;
    const double scalar =
        asl_loss(tape.constant(Tensor<double>({1, 1}, {0.5})), Tensor<double>({1, 1}, {0.0}), LossConfig{})
            .value()
            .item();
    // p^4 log(1/(1-p)) at p = 0.5 in extended precision.
    const long double reference = std::pow(0.5L, 4) * -std::log1p(-0.5L);
    v.require(worst <= 1e-9, fmt("BCE collapse off by %.3g", worst));
    v.require(std::abs(scalar - static_cast<double>(reference)) <= 1e-5 && std::abs(scalar - 0.04332) <= 1e-5,
              fmt("scalar example %.8f vs reference %.8Lf", scalar, reference));
    const std::string summary =
        fmt("200 random batches within %.1e of mean BCE; example %.6f vs extended-precision %.6Lf", worst, scalar, reference);
    v.detail = v.pass ? summary : summary + "; " + v.detail;
    return v;
}

GenSpec small_data() {
    return GenSpec{.n_classes = 6, .h = 4, .w = 4, .c = 4, .avg_labels = 2.0, .noise_sigma = 0.2,
                   .n_train = 150, .n_test = 60, .seed = 5};
}

ProtocolConfig small_config(Arm arm) {
    ProtocolConfig c;
    c.arm = arm;
    c.base = 0;
    c.inc = 2;
    c.model.extractor_channels = 8;
    c.model.ica = IcaConfig{.d = 8, .l = 8, .heads = 2, .mlp_hidden = 16};
    c.train.epochs = 2;
    c.seed = 3;
    if (arm_traits(arm).needs_buffer) c.buffer = {BufferPolicy::Kind::per_class, 3};
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::string without_wall_clock(const std::string& text) {
    return std::regex_replace(text, std::regex("\"wall_clock_seconds\": [0-9.eE+-]+"), "\"wall_clock_seconds\": X");
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "krt");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    std::ostringstream out, err;
    return cli::main(static_cast<int>(argv.size()), argv.data(), out, err);
}

// 7: expansion, frozen tokens, snapshot immutability and reproducible output.
Verdict structural_invariants() {
    Verdict v;
    const auto data = generate(small_data());
    Tensor<Real> images({8, data.test.h, data.test.w, data.test.c});
    for (std::size_t i = 0; i < 8; ++i)
        std::copy(data.test.examples[i].features.begin(), data.test.examples[i].features.end(),
                  images.data().begin() + static_cast<std::ptrdiff_t>(i * data.test.feature_size()));
    std::size_t logit_checks = 0, token_checks = 0, snapshot_checks = 0;
    for (Arm arm : {Arm::krt, Arm::krt_r, Arm::krt_no_dpl}) {
        std::optional<ModelState<Real>> at_start, snapshot_copy;
        ProtocolHooks hooks;
        hooks.before_training = [&](std::size_t t, const ModelState<Real>& model, const ModelState<Real>* snap) {
            at_start = model;
            if (t == 1) return;
            snapshot_copy = *snap;
            Tape<Real> a, b;
            const auto old_logits = forward_logits(a, *snap, images).logits.value();
            const auto new_logits = forward_logits(b, model, images).logits.value();
            for (std::size_t i = 0; i < old_logits.dim(0); ++i)
                for (std::size_t j = 0; j < old_logits.dim(1); ++j)
                    if (new_logits.at(i, j) != old_logits.at(i, j)) v.require(false, arm_name(arm) + ": old logit moved");
            ++logit_checks;
        };
        hooks.after_training = [&](std::size_t t, const ModelState<Real>& model, const ModelState<Real>* snap) {
            for (std::size_t s = 0; s + 1 < t; ++s) {
                const auto& tok = model.ica->kr_tokens[s];
                if (tok.trainable || !(tok.value == at_start->ica->kr_tokens[s].value))
                    v.require(false, arm_name(arm) + ": frozen KR token changed");
                ++token_checks;
            }
            if (t > 1) {
                if (!identical(*snap, *snapshot_copy)) v.require(false, arm_name(arm) + ": snapshot mutated");
                ++snapshot_checks;
            }
        };
        run_protocol(data, small_config(arm), &hooks);
    }
    v.require(logit_checks > 0 && token_checks > 0 && snapshot_checks > 0, "hooks did not fire");

    const auto dir = std::filesystem::temp_directory_path() / "krt_acceptance_repeat";
    std::filesystem::remove_all(dir);
    const std::vector<std::string> args{"run",
                                        "--arm=krt",
                                        "--out=" + dir.string(),
                                        "--seed=9",
                                        "--data.n_classes=6",
                                        "--data.h=4",
                                        "--data.w=4",
                                        "--data.c=4",
                                        "--data.avg_labels=2",
                                        "--data.n_train=120",
                                        "--data.n_test=40",
                                        "--plan.inc=2",
                                        "--model.extractor_channels=8",
                                        "--model.ica.d=8",
                                        "--model.ica.l=8",
                                        "--model.ica.heads=2",
                                        "--train.epochs=2"};
    const int first_code = run_cli(args);
    const std::string first = slurp(dir / "results.json");
    const int second_code = run_cli(args);
    const std::string second = slurp(dir / "results.json");
    std::filesystem::remove_all(dir);
    v.require(first_code == 0 && second_code == 0 && !first.empty(), "CLI run failed");
    const bool same = without_wall_clock(first) == without_wall_clock(second);
    v.require(same, "results.json differs between identical runs");
    const std::string summary =
        fmt("%zu expansions with bit-identical old logits, %zu frozen-token checks, %zu snapshot checks; "
            "results.json repeat %s",
            logit_checks, token_checks, snapshot_checks, same ? "identical" : "differs");
    v.detail = v.pass ? summary : summary + "; " + v.detail;
    return v;
}

struct ReferenceRuns {
    std::map<Arm, std::vector<cli::RunResult>> by_arm;  // index = seed position
    std::vector<std::uint64_t> seeds;
    std::vector<double> seconds_per_seed;
};

cli::RunConfig reference_config(const std::filesystem::path& file, Arm arm, std::uint64_t seed,
                                const std::filesystem::path& out) {
    auto doc = cli::default_document();
    std::ifstream in(file);
    if (!in) throw IoError("cannot open " + file.string());
    cli::merge_strict(doc, cli::Json::parse(in));
    doc["arm"] = arm_name(arm);
    doc["seed"] = seed;
    doc["out"] = out.string();
    return cli::resolve(doc);
}

ReferenceRuns reference_runs(const std::filesystem::path& file, const std::filesystem::path& out_root) {
    ReferenceRuns r;
    r.seeds = {1, 2, 3};
    for (std::uint64_t seed : r.seeds) {
        double total = 0.0;
        for (Arm arm : all_arms()) {
            if (arm == Arm::er) continue;
            const auto dir = out_root / (arm_name(arm) + "_seed" + std::to_string(seed));
            const auto cfg = reference_config(file, arm, seed, dir);
            auto result = cli::run(cfg);
            cli::write_outputs(result, dir);
            total += result.wall_clock_seconds;
            std::fprintf(stderr, "  %-12s seed %llu  last mAP %6.2f  avg mAP %6.2f  (%.1f s)\n", arm_name(arm).c_str(),
                         (unsigned long long)seed, result.aggregates.last_map, result.aggregates.avg_map,
                         result.wall_clock_seconds);
            r.by_arm[arm].push_back(std::move(result));
        }
        r.seconds_per_seed.push_back(total);
    }
    return r;
}

double mean_last(const ReferenceRuns& r, Arm arm) {
    double s = 0.0;
    for (const auto& x : r.by_arm.at(arm)) s += x.aggregates.last_map;
    return s / static_cast<double>(r.by_arm.at(arm).size());
}

// 8: directional end-to-end comparison on the reference configuration.
Verdict end_to_end(const ReferenceRuns& r) {
    Verdict v;
    std::string parts;
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
        const double ub = r.by_arm.at(Arm::upper_bound)[i].aggregates.last_map;
        const double ft = r.by_arm.at(Arm::ft)[i].aggregates.last_map;
        const double krt = r.by_arm.at(Arm::krt)[i].aggregates.last_map;
        const auto seed = (unsigned long long)r.seeds[i];
        v.require(ub >= 95.0, fmt("(a) seed %llu upper bound %.2f < 95", seed, ub));
        v.require(ft <= ub - 25.0, fmt("(b) seed %llu FT %.2f not 25 below upper bound %.2f", seed, ft, ub));
        v.require(krt >= ft + 15.0, fmt("(c) seed %llu KRT %.2f < FT %.2f + 15", seed, krt, ft));
        v.require(r.seconds_per_seed[i] < 900.0, fmt("seed %llu took %.0f s", seed, r.seconds_per_seed[i]));
        parts += fmt("%sseed %llu UB %.2f FT %.2f KRT %.2f", parts.empty() ? "" : ", ", seed, ub, ft, krt);
    }
    const double krt = mean_last(r, Arm::krt), no_dpl = mean_last(r, Arm::krt_no_dpl),
                 no_ica = mean_last(r, Arm::krt_no_ica), kd = mean_last(r, Arm::kd_baseline),
                 ft = mean_last(r, Arm::ft), replay = mean_last(r, Arm::krt_r);
    v.require(krt >= no_dpl, fmt("(d) KRT %.2f < w/o DPL %.2f", krt, no_dpl));
    v.require(krt >= no_ica, fmt("(d) KRT %.2f < w/o ICA %.2f", krt, no_ica));
    v.require(no_dpl >= kd && no_ica >= kd, fmt("(d) ablations %.2f / %.2f below KD baseline %.2f", no_dpl, no_ica, kd));
    v.require(kd >= ft, fmt("(d) KD baseline %.2f < FT %.2f", kd, ft));
    v.require(replay >= krt, fmt("(e) KRT-R %.2f < KRT %.2f", replay, krt));
    const double slowest = *std::max_element(r.seconds_per_seed.begin(), r.seconds_per_seed.end());
    const std::string summary =
        fmt("%s; means KRT %.2f, w/o DPL %.2f, w/o ICA %.2f, KD %.2f, FT %.2f, KRT-R %.2f; slowest seed %.0f s",
            parts.c_str(), krt, no_dpl, no_ica, kd, ft, replay, slowest);
    v.detail = v.pass ? summary : summary + "; " + v.detail;
    return v;
}

// 9: share of ground-truth old-class signals that received a pseudo label.
Verdict old_class_restoration(const ReferenceRuns& r) {
    Verdict v;
    std::size_t signals = 0, restored = 0;
    std::string parts;
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
        std::size_t s = 0, k = 0;
        for (const auto& session : r.by_arm.at(Arm::krt)[i].sessions)
            if (session.dpl) {
                s += session.dpl->old_signal_pairs;
                k += session.dpl->restored_pairs;
            }
        signals += s;
        restored += k;
        parts += fmt("%sseed %llu %.3f", parts.empty() ? "" : ", ", (unsigned long long)r.seeds[i],
                     s ? static_cast<double>(k) / static_cast<double>(s) : 0.0);
    }
    const double rate = signals ? static_cast<double>(restored) / static_cast<double>(signals) : 0.0;
    v.require(signals > 0, "no old-class signals observed");
    v.require(rate >= 0.6, fmt("restored %.3f < 0.60", rate));
    const std::string summary = fmt("%zu of %zu old-class signals restored (%.3f; %s)", restored, signals, rate, parts.c_str());
    v.detail = v.pass ? summary : summary + "; " + v.detail;
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string reference = KRT_REFERENCE_CONFIG;
    std::string out_root = "acceptance_runs";
    bool skip_e2e = false, e2e_only = false;
    app.add_option("--reference", reference, "Reference configuration overlay")->capture_default_str();
    app.add_option("--out", out_root, "Directory for reference run outputs")->capture_default_str();
    app.add_flag("--skip-e2e", skip_e2e, "Skip the reference runs behind criteria 8 and 9");
    app.add_flag("--e2e-only", e2e_only, "Run only criteria 8 and 9")->excludes("--skip-e2e");
    CLI11_PARSE(app, argc, argv);
    cli::set_log_level("error");
    ::setenv("KRT_LOG", "error", 1);

    bool all = true;
    auto report = [&](int id, const char* name, const std::function<Verdict()>& check) {
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v.pass = false;
            v.detail = std::string("exception: ") + e.what();
        }
        all = all && v.pass;
        std::printf("[%s] %d %s: %s\n", v.pass ? "PASS" : "FAIL", id, name, v.detail.c_str());
        std::fflush(stdout);
    };
    if (!e2e_only) {
        report(1, "gradient suite", gradient_suite);
        report(2, "metric oracle", metric_oracle);
        report(3, "published averages", paper_arithmetic);
        report(4, "threshold search", dpl_oracle);
        report(5, "token loss", token_properties);
        report(6, "asymmetric loss", asl_collapse);
        report(7, "structural invariants", structural_invariants);
    }

    if (skip_e2e) {
        std::printf("[SKIP] 8 end-to-end ordering\n[SKIP] 9 old-class restoration\n");
        return all ? 0 : 1;
    }
    std::optional<ReferenceRuns> runs;
    std::string failure;
    try {
        runs = reference_runs(reference, out_root);
    } catch (const std::exception& e) {
        failure = std::string("reference runs failed: ") + e.what();
    }
    auto guarded = [&](auto fn) {
        return [&, fn]() {
            if (!runs) return Verdict{false, failure};
            return fn(*runs);
        };
    };
    report(8, "end-to-end ordering", guarded(end_to_end));
    report(9, "old-class restoration", guarded(old_class_restoration));
    return all ? 0 : 1;
}
