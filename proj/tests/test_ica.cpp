#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "krt/ica.hpp"
#include "krt/optim.hpp"
#include "support.hpp"

using namespace krt;
using krt::testing::random_tensor;

namespace {

// Textbook attention with explicit loops: one query vector q, keys and
// values from [kr; patch rows], per-head softmax, concat, output projection.
std::vector<double> naive_attention(const IcaState<double>& s, const std::vector<double>& query,
                                    const std::vector<double>& kr, const std::vector<std::vector<double>>& rows) {
    const std::size_t d = s.config.d, l = s.config.l, heads = s.config.heads, dh = l / heads;
    std::vector<std::vector<double>> seq{kr};
    seq.insert(seq.end(), rows.begin(), rows.end());
    auto project = [&](const std::vector<double>& x, const Tensor<double>& w) {
        std::vector<double> y(l, 0.0);
        for (std::size_t j = 0; j < l; ++j)
            for (std::size_t i = 0; i < d; ++i) y[j] += x[i] * w.at(i, j);
        return y;
    };
    const auto q = project(query, s.w_q.value);
    std::vector<std::vector<double>> k, v;
    for (const auto& x : seq) {
        k.push_back(project(x, s.w_k.value));
        v.push_back(project(x, s.w_v.value));
    }
    std::vector<double> merged(l, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
        std::vector<double> logits(seq.size());
        for (std::size_t j = 0; j < seq.size(); ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < dh; ++c) dot += q[h * dh + c] * k[j][h * dh + c];
            logits[j] = dot / std::sqrt(static_cast<double>(l) / static_cast<double>(heads));
        }
        double mx = logits[0];
        for (double z : logits) mx = std::max(mx, z);
        double denom = 0.0;
        for (double& z : logits) denom += (z = std::exp(z - mx));
        for (std::size_t j = 0; j < seq.size(); ++j)
            for (std::size_t c = 0; c < dh; ++c) merged[h * dh + c] += logits[j] / denom * v[j][h * dh + c];
    }
    std::vector<double> out(d);
    for (std::size_t j = 0; j < d; ++j) {
        out[j] = s.b_o.value[j];
        for (std::size_t i = 0; i < l; ++i) out[j] += merged[i] * s.w_o.value.at(i, j);
    }
    return out;
}

double oracle_gap(const IcaConfig& config, std::uint64_t seed, std::size_t batch, std::size_t length) {
    Rng rng(seed);
    auto s = IcaState<double>::create(config, rng);
    const auto q = random_tensor({1, config.d}, rng);
    const auto kr = random_tensor({1, config.d}, rng);
    const auto patches = random_tensor({batch, length, config.d}, rng);
    Tape<double> tape;
    const auto w = bind(tape, static_cast<const IcaState<double>&>(s));
    const auto out = cross_attention(w, tape.constant(q), tape.constant(kr), tape.constant(patches));
    REQUIRE(out.shape() == Shape{batch, config.d});
    double worst = 0.0;
    const std::vector<double> qv(q.data().begin(), q.data().end()), krv(kr.data().begin(), kr.data().end());
    for (std::size_t b = 0; b < batch; ++b) {
        std::vector<std::vector<double>> rows;
        for (std::size_t r = 0; r < length; ++r) {
            const auto* p = patches.data().data() + (b * length + r) * config.d;
            rows.emplace_back(p, p + config.d);
        }
        const auto expect = naive_attention(s, qv, krv, rows);
        for (std::size_t j = 0; j < config.d; ++j) worst = std::max(worst, std::abs(expect[j] - out.value().at(b, j)));
    }
    return worst;
}

IcaConfig desk(std::size_t d, std::size_t heads) {
    return IcaConfig{.d = d, .l = d, .heads = heads, .mlp_hidden = 2 * d};
}

}  // namespace

TEST_SUITE("ica") {

TEST_CASE("cross-attention matches the naive oracle at d=16, L=4, h=2") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) CHECK(oracle_gap(desk(16, 2), seed, 3, 4) < 1e-10);
}

TEST_CASE("head split equals the per-head oracle for every config with l <= 32") {
    for (std::size_t d : {4, 8, 16, 32})
        for (std::size_t h = 1; h <= d; h *= 2) {
            INFO("d=" << d << " heads=" << h);
            CHECK(oracle_gap(desk(d, h), 100 + d + h, 2, 5) < 1e-10);
        }
}

TEST_CASE("paper-scale attention uses the sqrt(l/h) divisor") {
    IcaConfig big;
    CHECK(big.head_dim() == 48);
    CHECK(std::sqrt(static_cast<double>(big.l) / static_cast<double>(big.heads)) == doctest::Approx(6.9282).epsilon(1e-5));
    CHECK(oracle_gap(big, 5, 1, 2) < 1e-10);
}

TEST_CASE("identical keys split attention evenly") {
    Rng rng(9);
    auto s = IcaState<double>::create(desk(8, 2), rng);
    const auto q = random_tensor({1, 8}, rng);
    const auto kr = random_tensor({1, 8}, rng);
    Tape<double> tape;
    const auto w = bind(tape, static_cast<const IcaState<double>&>(s));
    AttentionMaps<double> maps;
    cross_attention(w, tape.constant(q), tape.constant(kr), tape.constant(kr.reshaped({1, 1, 8})), &maps);
    REQUIRE(maps.size() == 2);
    for (const auto& m : maps) {
        CHECK(m.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(m.at(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
    }
}

TEST_CASE("zeroed output projections reduce the block to the KT token") {
    Rng rng(4);
    auto s = IcaState<double>::create(desk(16, 2), rng);
    s.add_session(rng);
    s.w_o.value.fill(0.0);
    s.b_o.value.fill(0.0);
    s.mlp_w2.value.fill(0.0);
    s.mlp_b2.value.fill(0.0);
    for (std::size_t length : {1, 3, 7}) {
        Tape<double> tape;
        const auto w = bind(tape, static_cast<const IcaState<double>&>(s));
        const auto e = ica_forward(w, 1, tape.constant(random_tensor({2, length, 16}, rng)));
        REQUIRE(e.shape() == Shape{2, 16});
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t j = 0; j < 16; ++j) CHECK(e.value().at(b, j) == s.kt_token.value[j]);
    }
}

TEST_CASE("session embeddings: base case, prefix stability, non-degeneracy") {
    Rng rng(12);
    auto s = IcaState<double>::create(desk(16, 4), rng);
    s.add_session(rng);
    const auto patches = random_tensor({2, 5, 16}, rng);
    auto embed = [&] {
        Tape<double> tape;
        const auto w = bind(tape, static_cast<const IcaState<double>&>(s));
        std::vector<Tensor<double>> out;
        for (const auto& e : forward_all_sessions(w, tape.constant(patches))) out.push_back(e.value());
        return out;
    };
    const auto one = embed();
    REQUIRE(one.size() == 1);
    {
        Tape<double> tape;
        const auto w = bind(tape, static_cast<const IcaState<double>&>(s));
        CHECK(ica_forward(w, 1, tape.constant(patches)).value() == one[0]);
        CHECK_THROWS_AS(ica_forward(w, 2, tape.constant(patches)), ValueError);
        CHECK_THROWS_AS(ica_forward(w, 0, tape.constant(patches)), ValueError);
    }
    s.add_session(rng);
    s.add_session(rng);
    const auto three = embed();
    REQUIRE(three.size() == 3);
    CHECK(three[0] == one[0]);
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = a + 1; b < 3; ++b) {
            double dist = 0.0;
            for (std::size_t i = 0; i < three[a].size(); ++i) dist += std::pow(three[a][i] - three[b][i], 2);
            CHECK(dist > 0.0);
        }
}

TEST_CASE("add_session freezes older tokens and leaves weights untouched") {
    Rng rng(2);
    auto s = IcaState<double>::create(desk(8, 2), rng);
    s.add_session(rng);
    const auto before = s;
    s.add_session(rng);
    s.add_session(rng);
    CHECK(s.session_count() == 3);
    CHECK_FALSE(s.kr_tokens[0].trainable);
    CHECK_FALSE(s.kr_tokens[1].trainable);
    CHECK(s.kr_tokens[2].trainable);
    CHECK(s.kt_token.trainable);
    CHECK(s.w_q.value == before.w_q.value);
    CHECK(s.w_k.value == before.w_k.value);
    CHECK(s.w_v.value == before.w_v.value);
    CHECK(s.w_o.value == before.w_o.value);
    CHECK(s.kr_tokens[0].value == before.kr_tokens[0].value);
}

TEST_CASE("frozen KR tokens survive optimizer steps bit-identically") {
    Rng rng(6);
    auto s = IcaState<double>::create(desk(8, 2), rng);
    s.add_session(rng);
    s.add_session(rng);
    const auto frozen = s.kr_tokens[0].value;
    const auto live = s.kr_tokens[1].value;
    const auto patches = random_tensor({4, 3, 8}, rng);
    Adam<double> adam(s.parameters(), AdamConfig{.lr = 1e-2});
    for (int step = 0; step < 25; ++step) {
        adam.zero_grad();
        Tape<double> tape;
        const auto w = bind(tape, s);
        const auto es = forward_all_sessions(w, tape.constant(patches));
        tape.backward(add(sum(mul(es[0], es[0])), sum(es[1])));
        CHECK(s.kr_tokens[0].grad == Tensor<double>({8}));
        adam.step();
    }
    CHECK(s.kr_tokens[0].value == frozen);
    CHECK_FALSE(s.kr_tokens[1].value == live);
}

TEST_CASE("zero learning rate keeps embeddings bit-identical") {
    Rng rng(8);
    auto s = IcaState<double>::create(desk(8, 2), rng);
    s.add_session(rng);
    const auto patches = random_tensor({2, 3, 8}, rng);
    auto embed = [&] {
        Tape<double> tape;
        const auto w = bind(tape, static_cast<const IcaState<double>&>(s));
        return forward_all_sessions(w, tape.constant(patches))[0].value();
    };
    const auto before = embed();
    Adam<double> adam(s.parameters(), AdamConfig{.lr = 0.0});
    for (int step = 0; step < 5; ++step) {
        adam.zero_grad();
        Tape<double> tape;
        tape.backward(sum(forward_all_sessions(bind(tape, s), tape.constant(patches))[0]));
        adam.step();
    }
    CHECK(embed() == before);
}

TEST_CASE("configuration validation") {
    CHECK_THROWS_AS(IcaConfig({.d = 16, .l = 16, .heads = 3}).validate(), ConfigError);
    CHECK_THROWS_AS(IcaConfig({.d = 16, .l = 32, .heads = 2}).validate(), ConfigError);
    CHECK_THROWS_AS(IcaConfig({.d = 0, .l = 0, .heads = 1}).validate(), ConfigError);
    CHECK_NOTHROW(IcaConfig({.d = 16, .l = 16, .heads = 2}).validate());
    CHECK(IcaConfig{.d = 16, .l = 16, .heads = 2}.hidden() == 64);
}

TEST_CASE("mismatched patch width is a dimension error") {
    Rng rng(1);
    auto s = IcaState<double>::create(desk(8, 2), rng);
    s.add_session(rng);
    Tape<double> tape;
    const auto w = bind(tape, static_cast<const IcaState<double>&>(s));
    CHECK_THROWS_AS(ica_forward(w, 1, tape.constant(Tensor<double>({2, 3, 7}))), DimensionError);
}

TEST_CASE("attention export writes a header and little-endian floats") {
    Rng rng(3);
    auto s = IcaState<double>::create(desk(8, 2), rng);
    s.add_session(rng);
    Tape<double> tape;
    const auto w = bind(tape, static_cast<const IcaState<double>&>(s));
    AttentionMaps<double> maps;
    ica_forward(w, 1, tape.constant(random_tensor({2, 3, 8}, rng)), &maps);
    const auto path = std::filesystem::temp_directory_path() / "krt_attention_test.bin";
    export_attention(path, maps, 1);
    std::ifstream in(path, std::ios::binary);
    std::string header;
    std::getline(in, header);
    CHECK(header == "2 4");
    for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t j = 0; j < 4; ++j) {
            unsigned char bytes[4];
            in.read(reinterpret_cast<char*>(bytes), 4);
            const std::uint32_t bits = bytes[0] | (bytes[1] << 8) | (bytes[2] << 16) | (std::uint32_t(bytes[3]) << 24);
            float v;
            std::memcpy(&v, &bits, 4);
            CHECK(v == static_cast<float>(maps[h].at(1, j)));
        }
    CHECK(in.peek() == std::char_traits<char>::eof());
    std::filesystem::remove(path);
    CHECK_THROWS_AS(export_attention(path, maps, 2), ValueError);
}

}  // TEST_SUITE
