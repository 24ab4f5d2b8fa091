#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pcac/coder.hpp"
#include "pcac/gaussian.hpp"

#include <cmath>
#include <random>

using namespace pcac;
using namespace pcac::coder;

namespace {

std::vector<SymbolModel> random_models(size_t n, std::mt19937_64& rng, double sigma_lo = 0.04,
                                       double sigma_hi = 4.0) {
    std::uniform_real_distribution<double> mu(-40.0, 40.0);
    std::uniform_real_distribution<double> ls(std::log(sigma_lo), std::log(sigma_hi));
    std::vector<SymbolModel> models(n);
    for (auto& m : models) {
        m.mu = static_cast<float>(mu(rng));
        m.sigma = static_cast<float>(std::exp(ls(rng)));
    }
    return models;
}

std::vector<int32_t> sample_symbols(const std::vector<SymbolModel>& models, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<int32_t> out(models.size());
    for (size_t i = 0; i < models.size(); ++i)
        out[i] = static_cast<int32_t>(std::lround(models[i].mu + models[i].sigma * n(rng)));
    return out;
}

}  // namespace

TEST_CASE("discretized probabilities") {
    // collapsed Gaussian concentrates on the mean bucket
    CHECK(discretize(0.0, 0.04, 0) == doctest::Approx(1.0).epsilon(1e-9));
    // unit Gaussian center bucket
    CHECK(discretize(0.0, 1.0, 0) == doctest::Approx(0.3829).epsilon(1e-3));
    // symmetry
    for (int k = 1; k <= 5; ++k)
        CHECK(discretize(0.0, 1.3, k) == doctest::Approx(discretize(0.0, 1.3, -k)).epsilon(1e-12));
}

TEST_CASE("cdf tables are valid and deterministic") {
    std::mt19937_64 rng(1);
    auto models = random_models(2000, rng, 0.04, 64.0);
    for (const auto& m : models) {
        CdfTable t = build_cdf(m.mu, m.sigma);
        REQUIRE(t.hi >= t.lo);
        REQUIRE(t.cum.front() == 0);
        REQUIRE(t.cum.back() == kProbTotal);
        for (int b = 0; b < t.bucket_count(); ++b) CHECK(t.freq(b) >= 1);
        CdfTable t2 = build_cdf(m.mu, m.sigma);
        CHECK(t.cum == t2.cum);
    }
}

TEST_CASE("empty symbol list produces only flush bytes") {
    auto bytes = range_encode({}, {});
    CHECK(bytes.size() == 5);
    auto back = range_decode(bytes, {});
    CHECK(back.empty());
}

TEST_CASE("round trip on 100k random symbols") {
    std::mt19937_64 rng(2);
    auto models = random_models(100000, rng);
    auto symbols = sample_symbols(models, rng);
    auto bytes = range_encode(symbols, models);
    auto back = range_decode(bytes, models);
    REQUIRE(back.size() == symbols.size());
    CHECK(back == symbols);

    double est = estimate_rate_bits(symbols, models);
    CHECK(static_cast<double>(bytes.size() * 8) <= est * 1.02 + 64.0);
}

TEST_CASE("escape path round trips extreme symbols") {
    std::vector<SymbolModel> models(6, {0.0f, 0.5f});
    std::vector<int32_t> symbols = {0, 1000, -70000, 255, -256, 2147483647};
    auto bytes = range_encode(symbols, models);
    CHECK(range_decode(bytes, models) == symbols);
}

TEST_CASE("encode requires one model per symbol") {
    CHECK_THROWS(range_encode({1, 2}, {{0.0f, 1.0f}}));
}

TEST_CASE("estimate is bounded for tail symbols") {
    std::vector<SymbolModel> m = {{0.0f, 0.04f}};
    double near = estimate_rate_bits(std::vector<int32_t>{0}, m);
    CHECK(near <= 1e-6);
    double far = estimate_rate_bits(std::vector<int32_t>{100}, m);
    CHECK(far == 48.0);
}

TEST_CASE("coded length tracks the estimate across sigma regimes") {
    std::mt19937_64 rng(3);
    for (double hi : {0.3, 2.0, 16.0}) {
        auto models = random_models(20000, rng, 0.04, hi);
        auto symbols = sample_symbols(models, rng);
        auto bytes = range_encode(symbols, models);
        double est = estimate_rate_bits(symbols, models);
        double coded = static_cast<double>(bytes.size() * 8);
        CHECK(coded <= est * 1.02 + 64.0);
        // the coder should not beat its own model either
        CHECK(coded >= est * 0.97 - 64.0);
    }
}

TEST_CASE("bitstream container round trip") {
    std::mt19937_64 rng(4);
    BitstreamHeader h;
    h.context_enabled = true;
    h.bit_depth = 10;
    h.slice_count = 3;
    h.lambda = 4000.0f;
    h.config_digest = 0x1234abcd5678ef00ull;
    h.point_count = 777;
    h.latent_count = 55;
    h.hyper_count = 9;
    std::uniform_int_distribution<int> byte(0, 255);
    auto blob = [&](size_t n) {
        std::vector<uint8_t> b(n);
        for (auto& x : b) x = static_cast<uint8_t>(byte(rng));
        return b;
    };
    auto z = blob(40);
    std::vector<std::vector<uint8_t>> slices = {blob(10), blob(0), blob(33)};
    auto packed = pack_bitstream(h, z, slices);
    auto u = unpack_bitstream(packed);
    CHECK(u.header.context_enabled == h.context_enabled);
    CHECK(u.header.bit_depth == h.bit_depth);
    CHECK(u.header.slice_count == h.slice_count);
    CHECK(u.header.lambda == h.lambda);
    CHECK(u.header.config_digest == h.config_digest);
    CHECK(u.header.point_count == h.point_count);
    CHECK(u.header.latent_count == h.latent_count);
    CHECK(u.header.hyper_count == h.hyper_count);
    CHECK(u.z == z);
    REQUIRE(u.slices.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(u.slices[i] == slices[i]);
}

TEST_CASE("container corruption in slice j leaves slice i unpacked bytes alone") {
    std::mt19937_64 rng(5);
    BitstreamHeader h;
    h.slice_count = 4;
    std::uniform_int_distribution<int> byte(0, 255);
    std::vector<std::vector<uint8_t>> slices;
    for (int i = 0; i < 4; ++i) {
        std::vector<uint8_t> b(20 + i);
        for (auto& x : b) x = static_cast<uint8_t>(byte(rng));
        slices.push_back(b);
    }
    auto packed = pack_bitstream(h, {}, slices);
    auto clean = unpack_bitstream(packed);
    // flip every byte of slice 2's payload in place
    auto corrupted = packed;
    size_t start = packed.size() - slices[3].size() - slices[2].size();
    for (size_t i = 0; i < slices[2].size(); ++i) corrupted[start + i] ^= 0xFF;
    auto dirty = unpack_bitstream(corrupted);
    CHECK(dirty.slices[0] == clean.slices[0]);
    CHECK(dirty.slices[1] == clean.slices[1]);
    CHECK(dirty.slices[2] != clean.slices[2]);
    CHECK(dirty.slices[3] == clean.slices[3]);
}

TEST_CASE("container error paths") {
    BitstreamHeader h;
    h.slice_count = 1;
    auto packed = pack_bitstream(h, {1, 2, 3}, {{4, 5}});

    SUBCASE("zero slices rejected at pack time") {
        CHECK_THROWS_AS(pack_bitstream(h, {}, {}), BitstreamError);
    }
    SUBCASE("magic mismatch") {
        auto bad = packed;
        bad[0] ^= 0xFF;
        CHECK_THROWS_AS(unpack_bitstream(bad), BitstreamError);
    }
    SUBCASE("version bump") {
        auto bad = packed;
        bad[4] += 1;
        CHECK_THROWS_AS(unpack_bitstream(bad), BitstreamError);
    }
    SUBCASE("truncation") {
        auto bad = packed;
        bad.pop_back();
        CHECK_THROWS_AS(unpack_bitstream(bad), BitstreamError);
    }
    SUBCASE("trailing garbage") {
        auto bad = packed;
        bad.push_back(0);
        CHECK_THROWS_AS(unpack_bitstream(bad), BitstreamError);
    }
}

TEST_CASE("decoder survives corrupt payloads without crashing") {
    std::mt19937_64 rng(6);
    auto models = random_models(500, rng);
    auto symbols = sample_symbols(models, rng);
    auto bytes = range_encode(symbols, models);
    for (size_t flip = 0; flip < bytes.size(); flip += 7) {
        auto bad = bytes;
        bad[flip] ^= 0x5A;
        auto out = range_decode(bad, models);  // garbage is fine, crashing is not
        CHECK(out.size() == models.size());
    }
    // truncated stream also decodes (to garbage) without reading out of bounds
    auto short_bytes = std::vector<uint8_t>(bytes.begin(), bytes.begin() + bytes.size() / 2);
    CHECK(range_decode(short_bytes, models).size() == models.size());
}

TEST_CASE("non-finite model parameters fall back to a neutral table") {
    float nan = std::numeric_limits<float>::quiet_NaN();
    float inf = std::numeric_limits<float>::infinity();
    for (auto m : {SymbolModel{nan, 1.0f}, SymbolModel{0.0f, nan}, SymbolModel{inf, inf},
                   SymbolModel{-inf, 0.5f}, SymbolModel{0.0f, 1e30f}}) {
        CdfTable t = build_cdf(m.mu, m.sigma);
        REQUIRE(t.hi >= t.lo);
        CHECK(t.cum.back() == kProbTotal);
        // and symbols still round trip under the fallback model
        std::vector<SymbolModel> ms = {m};
        auto bytes = range_encode({42}, ms);
        CHECK(range_decode(bytes, ms) == std::vector<int32_t>{42});
    }
}
