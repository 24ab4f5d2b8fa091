#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "pcac/network.hpp"
#include "pcac/weights.hpp"
#include "testutil.hpp"

#include <cstring>

using namespace pcac;
using namespace pcac::ad;
using namespace pcac::net;

namespace {

CodecConfig tiny_config(int slices = 4) {
    CodecConfig cfg;
    cfg.feature_channels = 8;
    cfg.latent_channels = 8;
    cfg.hyper_channels = 4;
    cfg.context_channels = 4;
    cfg.slice_count = slices;
    cfg.window_side = 2;
    cfg.head_count = 2;
    return cfg;
}

pcio::PointCloud tiny_cloud(int n, std::mt19937_64& rng, int bit_depth = 6) {
    return pcio::voxelize(testutil::sphere_cloud(n, (1 << (bit_depth - 1)) * 0.8, rng), bit_depth);
}

void zero_model(Model& m) {
    visit_model(m, [](const std::string&, Mat<float>& v) {
        for (size_t i = 0; i < v.size(); ++i) v.data()[i] = 0.0f;
    });
}

bool bytes_equal(const Mat<float>& a, const Mat<float>& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("uploaded leaves follow manifest order exactly") {
    std::mt19937_64 rng(1);
    Model m = make_model(tiny_config(), 99);
    // randomize every tensor so an ordering bug cannot hide
    visit_model(m, [&](const std::string&, Mat<float>& v) {
        v = random_uniform<float>(v.rows(), v.cols(), -1.0f, 1.0f, rng);
    });
    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);
    auto params = weights::collect_params(m);
    for (size_t i = 0; i < params.size(); ++i) {
        CAPTURE(params[i].name);
        CHECK(bytes_equal(t.val(n.first + static_cast<NodeId>(i)), *params[i].value));
    }
}

TEST_CASE("config validation") {
    CodecConfig cfg = tiny_config();
    cfg.slice_count = 3;  // 8 % 3 != 0
    CHECK_THROWS(cfg.validate());
    cfg = tiny_config();
    cfg.head_count = 3;
    CHECK_THROWS(cfg.validate());
    cfg = tiny_config();
    cfg.kernel = 2;
    CHECK_THROWS(cfg.validate());
}

TEST_CASE("plan requires canonical sorted unique coords") {
    CodecConfig cfg = tiny_config();
    CHECK_THROWS(build_plan({}, cfg));
    CHECK_THROWS(build_plan({{1, 0, 0}, {0, 0, 0}}, cfg));  // unsorted
    CHECK_THROWS(build_plan({{0, 0, 0}, {0, 0, 0}}, cfg));  // duplicate
}

TEST_CASE("analysis shape contract and stride-8 occupancy") {
    std::mt19937_64 rng(2);
    CodecConfig cfg = tiny_config();
    Model m = make_model(cfg, 7);
    pcio::PointCloud pc = tiny_cloud(500, rng);
    GeometryPlan plan = build_plan(pc.coords, cfg);
    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);
    NodeId y = analysis_fwd(t, t.input(pc.attrs), n, m, plan);
    auto want = sparse::downsample_coords(
        sparse::downsample_coords(sparse::downsample_coords(pc.coords, 1), 2), 4);
    CHECK(t.val(y).rows() == static_cast<int>(want.size()));
    CHECK(t.val(y).cols() == cfg.latent_channels);
    CHECK(plan.levels[3].coords == want);
}

TEST_CASE("a dense 8-cube collapses to one latent voxel") {
    std::vector<sparse::Coord> coords;
    for (int x = 0; x < 8; ++x)
        for (int y = 0; y < 8; ++y)
            for (int z = 0; z < 8; ++z) coords.push_back({x, y, z});
    std::sort(coords.begin(), coords.end());
    GeometryPlan plan = build_plan(coords, tiny_config());
    CHECK(plan.levels[3].coords.size() == 1);
    CHECK(plan.levels[3].coords[0] == sparse::Coord{0, 0, 0});
}

TEST_CASE("zero weights produce zero latents and bias-only reconstruction") {
    std::mt19937_64 rng(3);
    CodecConfig cfg = tiny_config();
    Model m = make_model(cfg, 7);
    zero_model(m);
    pcio::PointCloud pc = tiny_cloud(300, rng);
    GeometryPlan plan = build_plan(pc.coords, cfg);
    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);
    NodeId y = analysis_fwd(t, t.input(pc.attrs), n, m, plan);
    for (size_t i = 0; i < t.val(y).size(); ++i) CHECK(t.val(y).data()[i] == 0.0f);
    NodeId recon = synthesis_fwd(t, y, n, m, plan);
    CHECK(t.val(recon).rows() == static_cast<int>(pc.size()));
    CHECK(t.val(recon).cols() == 3);
    for (size_t i = 0; i < t.val(recon).size(); ++i) CHECK(t.val(recon).data()[i] == 0.0f);
}

TEST_CASE("hyper path shapes and sigma floor") {
    std::mt19937_64 rng(4);
    CodecConfig cfg = tiny_config();
    Model m = make_model(cfg, 11);
    pcio::PointCloud pc = tiny_cloud(400, rng);
    GeometryPlan plan = build_plan(pc.coords, cfg);
    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);
    NodeId y = analysis_fwd(t, t.input(pc.attrs), n, m, plan);
    NodeId z = hyper_enc_fwd(t, y, n, m, plan);
    CHECK(t.val(z).rows() == plan.levels[4].ctx.rows);
    CHECK(t.val(z).cols() == cfg.hyper_channels);
    NodeId z_hat = round_ste(t, z);
    auto [mu_p, sigma_p] = hyper_dec_fwd(t, z_hat, n, m, plan);
    CHECK(t.val(mu_p).rows() == plan.levels[3].ctx.rows);
    CHECK(t.val(mu_p).cols() == cfg.latent_channels);
    CHECK(t.val(sigma_p).same_shape(t.val(mu_p)));
    for (size_t i = 0; i < t.val(sigma_p).size(); ++i)
        CHECK(t.val(sigma_p).data()[i] >= kSigmaMin);
}

TEST_CASE("zero-weight hyper decoder yields unit-ish sigma") {
    std::mt19937_64 rng(5);
    CodecConfig cfg = tiny_config();
    Model m = make_model(cfg, 11);
    zero_model(m);
    pcio::PointCloud pc = tiny_cloud(200, rng);
    GeometryPlan plan = build_plan(pc.coords, cfg);
    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);
    NodeId zeros = t.input(Mat<float>::zeros(plan.levels[4].ctx.rows, cfg.hyper_channels));
    auto [mu_p, sigma_p] = hyper_dec_fwd(t, zeros, n, m, plan);
    for (size_t i = 0; i < t.val(mu_p).size(); ++i) CHECK(t.val(mu_p).data()[i] == 0.0f);
    for (size_t i = 0; i < t.val(sigma_p).size(); ++i)
        CHECK(t.val(sigma_p).data()[i] == doctest::Approx(1.0f));
}

TEST_CASE("sigma floor holds under many random weight draws") {
    std::mt19937_64 rng(6);
    CodecConfig cfg = tiny_config();
    pcio::PointCloud pc = tiny_cloud(150, rng);
    GeometryPlan plan = build_plan(pc.coords, cfg);
    int checked = 0;
    for (int trial = 0; trial < 40; ++trial) {
        Model m = make_model(cfg, 1000 + trial);
        // exaggerate weights to push the raw log-sigma around
        visit_model(m, [&](const std::string&, Mat<float>& v) {
            for (size_t i = 0; i < v.size(); ++i) v.data()[i] *= 20.0f;
        });
        Tape<float> t(false);
        ModelNodes n = upload_model(t, m);
        Mat<float> z = random_uniform<float>(plan.levels[4].ctx.rows, cfg.hyper_channels, -30.0f,
                                             30.0f, rng);
        auto [mu_p, sigma_p] = hyper_dec_fwd(t, t.input(z), n, m, plan);
        for (size_t i = 0; i < t.val(sigma_p).size(); ++i, ++checked)
            REQUIRE(t.val(sigma_p).data()[i] >= kSigmaMin);
    }
    CHECK(checked >= 10000);
}

TEST_CASE("quantize rounds within half a step") {
    std::mt19937_64 rng(7);
    Tape<float> t;
    Mat<float> y = random_uniform<float>(400, 250, -20.0f, 20.0f, rng);
    NodeId q = round_ste(t, t.input(y));
    for (size_t i = 0; i < y.size(); ++i)
        CHECK(std::abs(t.val(q).data()[i] - y.data()[i]) <= 0.5f);
}

TEST_CASE("context slice params are causal") {
    std::mt19937_64 rng(8);
    CodecConfig cfg = tiny_config(4);
    Model m = make_model(cfg, 21);
    pcio::PointCloud pc = tiny_cloud(400, rng);
    GeometryPlan plan = build_plan(pc.coords, cfg);
    const int ny = plan.levels[3].ctx.rows;
    const int s = cfg.slice_width();

    Mat<float> y_hat(ny, cfg.latent_channels);
    for (size_t i = 0; i < y_hat.size(); ++i)
        y_hat.data()[i] = static_cast<float>(std::lround(3.0 * std::sin(0.7 * i)));
    Mat<float> mu_p = random_uniform<float>(ny, cfg.latent_channels, -1.0f, 1.0f, rng);
    Mat<float> sigma_p = random_uniform<float>(ny, cfg.latent_channels, 0.5f, 2.0f, rng);

    auto eval = [&](const Mat<float>& yh) {
        Tape<float> t(false);
        ModelNodes n = upload_model(t, m);
        ContextOut ctx = context_fwd(t, t.input(yh), t.input(mu_p), t.input(sigma_p), n, m, plan);
        std::vector<Mat<float>> mu, sigma, ye;
        for (int i = 0; i < cfg.slice_count; ++i) {
            mu.push_back(t.val(ctx.mu[i]));
            sigma.push_back(t.val(ctx.sigma[i]));
            Mat<float> e = t.val(ctx.ybar[i]);
            const Mat<float>& yh_i = t.val(ctx.yhat[i]);
            for (size_t k = 0; k < e.size(); ++k) e.data()[k] -= yh_i.data()[k];
            ye.push_back(std::move(e));
        }
        return std::tuple(mu, sigma, ye);
    };

    auto [mu0, sigma0, ye0] = eval(y_hat);
    for (int i = 0; i < cfg.slice_count; ++i)
        for (size_t k = 0; k < sigma0[i].size(); ++k) CHECK(sigma0[i].data()[k] >= kSigmaMin);

    // perturbing slice j must not change (mu_i, sigma_i) for i <= j, and
    // must not change y_e for i < j
    for (int j = 0; j < cfg.slice_count; ++j) {
        Mat<float> bumped = y_hat;
        for (int r = 0; r < ny; ++r) bumped(r, j * s) += 2.0f;
        auto [mu1, sigma1, ye1] = eval(bumped);
        for (int i = 0; i <= j; ++i) {
            CHECK(bytes_equal(mu0[i], mu1[i]));
            CHECK(bytes_equal(sigma0[i], sigma1[i]));
        }
        for (int i = 0; i < j; ++i) CHECK(bytes_equal(ye0[i], ye1[i]));
        // the perturbed slice's own refinement is allowed to move
        CHECK_FALSE(bytes_equal(ye0[j], ye1[j]));
    }
}

TEST_CASE("context slice wiring matches a manual per-slice evaluation") {
    std::mt19937_64 rng(9);
    CodecConfig cfg = tiny_config(2);
    Model m = make_model(cfg, 31);
    pcio::PointCloud pc = tiny_cloud(200, rng);
    GeometryPlan plan = build_plan(pc.coords, cfg);
    const int ny = plan.levels[3].ctx.rows;
    const int s = cfg.slice_width();

    Mat<float> y_hat(ny, cfg.latent_channels);
    for (size_t i = 0; i < y_hat.size(); ++i)
        y_hat.data()[i] = static_cast<float>((static_cast<int>(i) % 5) - 2);
    Mat<float> mu_p = random_uniform<float>(ny, cfg.latent_channels, -1.0f, 1.0f, rng);
    Mat<float> sigma_p = random_uniform<float>(ny, cfg.latent_channels, 0.5f, 2.0f, rng);

    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);
    ContextOut ctx = context_fwd(t, t.input(y_hat), t.input(mu_p), t.input(sigma_p), n, m, plan);

    // manual slice walk: inputs are (mu_p) / (sigma_p) / (yhat_0, mu_p)
    Tape<float> t2(false);
    ModelNodes n2 = upload_model(t2, m);
    NodeId mu_p2 = t2.input(mu_p);
    NodeId sigma_p2 = t2.input(sigma_p);
    Mat<float> yhat0(ny, s), yhat1(ny, s);
    for (int r = 0; r < ny; ++r)
        for (int c = 0; c < s; ++c) {
            yhat0(r, c) = y_hat(r, c);
            yhat1(r, c) = y_hat(r, s + c);
        }
    const auto& lvl = plan.levels[3].ctx;
    NodeId mu0 = blocks::ctx_transform_fwd(t2, {mu_p2}, n2.ctx_mu[0], lvl);
    NodeId sg0 = shift(t2, relu(t2, blocks::ctx_transform_fwd(t2, {sigma_p2}, n2.ctx_sigma[0], lvl)),
                       kSigmaMin);
    NodeId ye0 = blocks::ctx_transform_fwd(t2, {t2.input(yhat0), mu_p2}, n2.ctx_ye[0], lvl);
    NodeId ybar0 = add(t2, t2.input(yhat0), ye0);
    NodeId mu1 = blocks::ctx_transform_fwd(t2, {mu_p2, ybar0}, n2.ctx_mu[1], lvl);
    NodeId sg1 = shift(
        t2, relu(t2, blocks::ctx_transform_fwd(t2, {sigma_p2, ybar0}, n2.ctx_sigma[1], lvl)),
        kSigmaMin);
    NodeId ye1 = blocks::ctx_transform_fwd(t2, {t2.input(yhat1), mu_p2, ybar0}, n2.ctx_ye[1], lvl);
    NodeId ybar1 = add(t2, t2.input(yhat1), ye1);

    CHECK(testutil::max_abs_diff(t.val(ctx.mu[0]), t2.val(mu0)) <= 1e-6);
    CHECK(testutil::max_abs_diff(t.val(ctx.sigma[0]), t2.val(sg0)) <= 1e-6);
    CHECK(testutil::max_abs_diff(t.val(ctx.ybar[0]), t2.val(ybar0)) <= 1e-6);
    CHECK(testutil::max_abs_diff(t.val(ctx.mu[1]), t2.val(mu1)) <= 1e-6);
    CHECK(testutil::max_abs_diff(t.val(ctx.sigma[1]), t2.val(sg1)) <= 1e-6);
    CHECK(testutil::max_abs_diff(t.val(ctx.ybar[1]), t2.val(ybar1)) <= 1e-6);
}

TEST_CASE("zero context weights keep the sigma init and pass yhat through") {
    std::mt19937_64 rng(10);
    CodecConfig cfg = tiny_config(2);
    Model m = make_model(cfg, 41);
    zero_model(m);
    // restore the documented sigma output bias
    for (auto& tr : m.ctx_sigma)
        for (int c = 0; c < cfg.slice_width(); ++c) tr.out.b(0, c) = 1.0f - kSigmaMin;
    pcio::PointCloud pc = tiny_cloud(150, rng);
    GeometryPlan plan = build_plan(pc.coords, cfg);
    const int ny = plan.levels[3].ctx.rows;
    Mat<float> y_hat = Mat<float>::full(ny, cfg.latent_channels, 2.0f);
    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);
    Mat<float> hp = Mat<float>::zeros(ny, cfg.latent_channels);
    ContextOut ctx = context_fwd(t, t.input(y_hat), t.input(hp), t.input(hp), n, m, plan);
    for (int i = 0; i < cfg.slice_count; ++i) {
        for (size_t k = 0; k < t.val(ctx.mu[i]).size(); ++k) {
            CHECK(t.val(ctx.mu[i]).data()[k] == 0.0f);
            CHECK(t.val(ctx.sigma[i]).data()[k] == doctest::Approx(1.0f));
            CHECK(t.val(ctx.ybar[i]).data()[k] == 2.0f);
        }
    }
}

TEST_CASE("forward codec rates are non-negative and match coded lengths") {
    std::mt19937_64 rng(11);
    CodecConfig cfg = tiny_config(4);
    Model m = make_model(cfg, 51);
    pcio::PointCloud pc = tiny_cloud(800, rng);
    GeometryPlan plan = build_plan(pc.coords, cfg);
    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);
    CodecNodes c = forward_codec(t, t.input(pc.attrs), n, m, plan);
    CHECK(t.val(c.rate_y_bits)(0, 0) >= 0.0f);
    CHECK(t.val(c.rate_z_bits)(0, 0) >= 0.0f);

    EncodeResult res = encode_cloud(pc, m, 0x1234, 400.0f);
    CHECK(res.est_y_bits == doctest::Approx(t.val(c.rate_y_bits)(0, 0)).epsilon(1e-4));
    CHECK(res.est_z_bits == doctest::Approx(t.val(c.rate_z_bits)(0, 0)).epsilon(1e-4));
    // per-stream agreement between model estimate and actual coded length
    CHECK(res.coded_y_bits <= res.est_y_bits * 1.02 + 64.0 * cfg.slice_count);
    CHECK(res.coded_z_bits <= res.est_z_bits * 1.02 + 64.0);
}

TEST_CASE("encode decode round trip is bit exact") {
    std::mt19937_64 rng(12);
    CodecConfig cfg = tiny_config(4);
    Model m = make_model(cfg, 61);
    pcio::PointCloud pc = tiny_cloud(700, rng);
    const uint64_t digest = 0xfeedface;

    EncodeResult enc1 = encode_cloud(pc, m, digest, 1000.0f);
    EncodeResult enc2 = encode_cloud(pc, m, digest, 1000.0f);
    CHECK(enc1.bitstream == enc2.bitstream);  // encoding is deterministic

    DecodeResult dec = decode_cloud(enc1.bitstream, pc, m, digest);
    REQUIRE(dec.recon.size() == pc.size());
    CHECK(bytes_equal(dec.recon.attrs, enc1.recon.attrs));
    CHECK(dec.recon.coords == pc.coords);
}

TEST_CASE("latent geometry depends only on coordinates, not attributes") {
    std::mt19937_64 rng(13);
    CodecConfig cfg = tiny_config(2);
    Model m = make_model(cfg, 71);
    pcio::PointCloud pc = tiny_cloud(300, rng);
    pcio::PointCloud other = pc;
    other.attrs = random_uniform<float>(static_cast<int>(pc.size()), 3, 0.0f, 1.0f, rng);
    EncodeResult a = encode_cloud(pc, m, 1, 0.0f);
    EncodeResult b = encode_cloud(other, m, 1, 0.0f);
    auto ua = coder::unpack_bitstream(a.bitstream);
    auto ub = coder::unpack_bitstream(b.bitstream);
    CHECK(ua.header.latent_count == ub.header.latent_count);
    CHECK(ua.header.hyper_count == ub.header.hyper_count);
}

TEST_CASE("decode validates header against geometry and weights") {
    std::mt19937_64 rng(14);
    CodecConfig cfg = tiny_config(2);
    Model m = make_model(cfg, 81);
    pcio::PointCloud pc = tiny_cloud(300, rng);
    EncodeResult enc = encode_cloud(pc, m, 7, 0.0f);

    SUBCASE("digest mismatch") {
        CHECK_THROWS_AS(decode_cloud(enc.bitstream, pc, m, 8), CodecError);
    }
    SUBCASE("point count mismatch") {
        pcio::PointCloud fewer = pc;
        fewer.coords.pop_back();
        fewer.attrs = Mat<float>(static_cast<int>(fewer.coords.size()), 3);
        CHECK_THROWS_AS(decode_cloud(enc.bitstream, fewer, m, 7), CodecError);
    }
    SUBCASE("bit depth mismatch") {
        pcio::PointCloud other = pc;
        other.bit_depth = 8;
        CHECK_THROWS_AS(decode_cloud(enc.bitstream, other, m, 7), CodecError);
    }
    SUBCASE("corrupt magic") {
        auto bad = enc.bitstream;
        bad[1] ^= 0xFF;
        CHECK_THROWS_AS(decode_cloud(bad, pc, m, 7), coder::BitstreamError);
    }
}

TEST_CASE("flipping a byte of slice j leaves decoded slices before j byte-identical") {
    std::mt19937_64 rng(15);
    CodecConfig cfg = tiny_config(4);
    Model m = make_model(cfg, 91);
    pcio::PointCloud pc = tiny_cloud(500, rng);
    EncodeResult enc = encode_cloud(pc, m, 5, 0.0f);
    DecodeResult clean = decode_cloud(enc.bitstream, pc, m, 5);

    auto u = coder::unpack_bitstream(enc.bitstream);
    size_t payload_start = enc.bitstream.size();
    for (const auto& s : u.slices) payload_start -= s.size();
    for (int j = 1; j < cfg.slice_count; ++j) {
        if (u.slices[j].empty()) continue;
        size_t offset = payload_start;
        for (int i = 0; i < j; ++i) offset += u.slices[i].size();
        auto corrupt = enc.bitstream;
        corrupt[offset + u.slices[j].size() / 2] ^= 0xA5;
        DecodeResult dirty = decode_cloud(corrupt, pc, m, 5);
        for (int i = 0; i < j; ++i) {
            CAPTURE(j);
            CAPTURE(i);
            CHECK(bytes_equal(dirty.yhat_slices[i], clean.yhat_slices[i]));
        }
    }
}

TEST_CASE("weights save load round trip preserves behavior") {
    std::mt19937_64 rng(16);
    CodecConfig cfg = tiny_config(2);
    Model m = make_model(cfg, 101);
    pcio::PointCloud pc = tiny_cloud(250, rng);
    std::string path = "tmp_weights_roundtrip.pcw";
    weights::save_model(m, path);
    weights::LoadedModel lm = weights::load_model(path);
    CHECK(lm.digest == weights::model_digest(m));
    EncodeResult a = encode_cloud(pc, m, lm.digest, 0.0f);
    EncodeResult b = encode_cloud(pc, lm.model, lm.digest, 0.0f);
    CHECK(a.bitstream == b.bitstream);
    std::remove(path.c_str());
}

TEST_CASE("phase-1 style weights (context disabled) still decode") {
    std::mt19937_64 rng(17);
    CodecConfig cfg = tiny_config(2);
    Model m = make_model(cfg, 111);
    m.context_enabled = false;
    pcio::PointCloud pc = tiny_cloud(300, rng);
    EncodeResult enc = encode_cloud(pc, m, 3, 0.0f);
    auto u = coder::unpack_bitstream(enc.bitstream);
    CHECK_FALSE(u.header.context_enabled);
    DecodeResult dec = decode_cloud(enc.bitstream, pc, m, 3);
    CHECK(bytes_equal(dec.recon.attrs, enc.recon.attrs));

    // context flag mismatch between stream and weights is rejected
    Model m2 = m;
    m2.context_enabled = true;
    CHECK_THROWS_AS(decode_cloud(enc.bitstream, pc, m2, 3), CodecError);
}

TEST_CASE("weights container rejects tampered manifests") {
    std::mt19937_64 rng(18);
    Model m = make_model(tiny_config(2), 121);
    auto bytes = weights::serialize_model(m);

    SUBCASE("not a weights file") {
        auto bad = bytes;
        bad[0] ^= 0xFF;
        CHECK_THROWS_AS(weights::parse_model(bad), weights::WeightsError);
    }
    SUBCASE("format version bump") {
        std::string needle = "\"format_version\":1";
        std::string replacement = "\"format_version\":9";
        auto it = std::search(bytes.begin(), bytes.end(), needle.begin(), needle.end());
        REQUIRE(it != bytes.end());
        std::copy(replacement.begin(), replacement.end(), it);
        CHECK_THROWS_AS(weights::parse_model(bytes), weights::WeightsError);
    }
    SUBCASE("truncated blob") {
        auto bad = bytes;
        bad.resize(bad.size() - 8);
        CHECK_THROWS_AS(weights::parse_model(bad), weights::WeightsError);
    }
}
