#include <doctest.h>

#include <cmath>
#include <string>

#include "gradient_suite.hpp"
#include "krt/ops.hpp"

using namespace krt;
using krt::testing::random_tensor;

namespace {

constexpr std::uint64_t kSeeds = 20;
constexpr double kTol = 1e-4;

}  // namespace

TEST_SUITE("ops") {

TEST_CASE("every op matches central differences") {
    for (const auto& c : krt::testing::op_cases()) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < kSeeds; ++seed) worst = std::max(worst, krt::testing::op_error(c, seed));
        INFO(c.name << " worst rel err " << worst);
        CHECK(worst < kTol);
    }
}

TEST_CASE("composite objective through the ICA block matches central differences") {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
        const auto r = krt::testing::composite_error(seed);
        INFO("seed " << seed << " worst " << r.worst << " rel err " << r.max_rel_error);
        CHECK(r.checked > 600);
        CHECK(r.max_rel_error < kTol);
    }
}

TEST_CASE("ops compose without tape leaks") {
    Tape<double> tape;
    Rng rng(3);
    auto x = tape.constant(random_tensor({2, 3}, rng));
    auto y = softmax_rows(x);
    for (std::size_t r = 0; r < 2; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < 3; ++c) total += y.value().at(r, c);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("shape mismatches raise dimension errors") {
    Tape<double> tape;
    auto a = tape.constant(Tensor<double>({2, 3}));
    auto b = tape.constant(Tensor<double>({3, 2}));
    CHECK_THROWS_AS(add(a, b), DimensionError);
    CHECK_THROWS_AS(matmul(a, a), DimensionError);
    CHECK_THROWS_AS(mul(a, b), DimensionError);
}

TEST_CASE("sigmoid clamps to the probability range") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>({3}, {-100.0, 0.0, 100.0}));
    auto p = sigmoid(x);
    CHECK(p.value()[0] == doctest::Approx(kProbEps));
    CHECK(p.value()[1] == doctest::Approx(0.5));
    CHECK(p.value()[2] == doctest::Approx(1.0 - kProbEps));
}

TEST_CASE("gelu uses the exact erf form") {
    Tape<double> tape;
    auto y = gelu(tape.constant(Tensor<double>::vector({1.0, -0.5})));
    CHECK(y.value()[0] == doctest::Approx(0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0)))).epsilon(1e-14));
    CHECK(y.value()[1] == doctest::Approx(-0.25 * (1.0 + std::erf(-0.5 / std::sqrt(2.0)))).epsilon(1e-14));
}

TEST_CASE("backward visits ops in exact reverse order") {
    Tape<double> tape;
    Parameter<double> p("p", Tensor<double>({2}, {0.3, 0.4}));
    auto x = tape.leaf(p);
    auto y = sum(mul(gelu(x), x));
    tape.backward(y);
    const auto& order = tape.last_backward_order();
    // The shared leaf is reached last, after both of its consumers.
    REQUIRE(order.size() == 4);
    CHECK(std::string(order[0]) == "sum");
    CHECK(std::string(order[1]) == "mul");
    CHECK(std::string(order[2]) == "gelu");
    CHECK(std::string(order[3]) == "leaf");
}

TEST_CASE("frozen parameters receive no gradient") {
    Tape<double> tape;
    Parameter<double> a("a", Tensor<double>({2}, {1.0, 2.0}));
    Parameter<double> b("b", Tensor<double>({2}, {3.0, 4.0}));
    b.trainable = false;
    tape.backward(sum(mul(tape.leaf(a), tape.leaf(b))));
    CHECK(a.grad[0] == 3.0);
    CHECK(a.grad[1] == 4.0);
    CHECK(b.grad[0] == 0.0);
    CHECK(b.grad[1] == 0.0);
}

TEST_CASE("log rejects non-positive input") {
    Tape<double> tape;
    auto x = tape.constant(Tensor<double>::vector({-1.0}));
    CHECK_THROWS_AS(log(x), ValueError);
}

}  // TEST_SUITE
