#include "pcac/network.hpp"

#include <algorithm>
#include <cmath>

namespace pcac::net {

using blocks::LevelCtx;

void CodecConfig::validate() const {
    if (latent_channels % slice_count != 0)
        throw std::invalid_argument("latent_channels must be divisible by slice_count");
    if (feature_channels % 2 != 0 || latent_channels % 2 != 0 || hyper_channels % 2 != 0 ||
        context_channels % 2 != 0)
        throw std::invalid_argument("channel widths must be even");
    if ((feature_channels / 2) % head_count != 0 || (hyper_channels / 2) % head_count != 0 ||
        (context_channels / 2) % head_count != 0)
        throw std::invalid_argument("head_count must divide attention widths");
    if (encoder_stages < 1 || hyper_stages < 1)
        throw std::invalid_argument("stage counts must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("kernel must be odd");
    if (window_side < 1) throw std::invalid_argument("window_side must be >= 1");
    if (slice_count < 1) throw std::invalid_argument("slice_count must be >= 1");
}

Model make_model(const CodecConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Model m;
    m.cfg = cfg;
    const int f = cfg.feature_channels;
    const int l = cfg.latent_channels;
    const int h = cfg.hyper_channels;
    const int cc = cfg.context_channels;
    const int s = cfg.slice_width();
    const int k = cfg.kernel;

    for (int i = 0; i < cfg.encoder_stages; ++i) {
        int c_in = i == 0 ? 3 : f;
        int c_out = i == cfg.encoder_stages - 1 ? l : f;
        m.enc_down.push_back(blocks::make_conv<float>(k, c_in, c_out, rng));
        if (i != cfg.encoder_stages - 1)
            m.enc_tscm.push_back(blocks::make_tscm<float>(f, cfg.head_count, rng));
    }
    m.henc_down = blocks::make_conv<float>(k, l, h, rng);
    m.henc_tscm = blocks::make_tscm<float>(h, cfg.head_count, rng);
    m.hdec_tscm = blocks::make_tscm<float>(h, cfg.head_count, rng);
    // small-gain head keeps the initial mu near zero and sigma near one
    m.hdec_up = blocks::make_conv<float>(k, h, 2 * l, rng, 0.1);

    for (int i = 0; i < cfg.slice_count; ++i) {
        int prev = i * s;
        m.ctx_mu.push_back(blocks::make_ctx_transform<float>(l + prev, cc, s, cfg.head_count, rng));
        m.ctx_sigma.push_back(
            blocks::make_ctx_transform<float>(l + prev, cc, s, cfg.head_count, rng));
        m.ctx_ye.push_back(
            blocks::make_ctx_transform<float>(l + prev + s, cc, s, cfg.head_count, rng));
        // sigma transforms start near 1 so the rate term is well-scaled
        for (int c = 0; c < s; ++c) m.ctx_sigma[i].out.b(0, c) = 1.0f - kSigmaMin;
    }

    for (int i = 0; i < cfg.encoder_stages; ++i) {
        int c_in = i == 0 ? l : f;
        int c_out = i == cfg.encoder_stages - 1 ? 3 : f;
        m.dec_up.push_back(blocks::make_conv<float>(k, c_in, c_out, rng));
        if (i != cfg.encoder_stages - 1)
            m.dec_tscm.push_back(blocks::make_tscm<float>(f, cfg.head_count, rng));
    }
    // mid-range output before the final clamp
    for (int c = 0; c < 3; ++c) m.dec_up.back().b(0, c) = 0.5f;

    m.prior_mu = Mat<float>::zeros(1, h);
    m.prior_logsigma = Mat<float>::zeros(1, h);
    return m;
}

GeometryPlan build_plan(const std::vector<Coord>& coords, const CodecConfig& cfg) {
    cfg.validate();
    if (coords.empty()) throw std::invalid_argument("build_plan: empty cloud");
    if (!std::is_sorted(coords.begin(), coords.end()))
        throw std::invalid_argument("build_plan: coordinates must be sorted");

    const int n_levels = cfg.level_count();
    GeometryPlan plan;
    plan.levels.resize(n_levels);
    plan.levels[0].coords = coords;
    plan.levels[0].stride = 1;
    plan.levels[0].index = sparse::CoordIndex(coords);
    for (int l = 1; l < n_levels; ++l) {
        plan.levels[l].stride = plan.levels[l - 1].stride * 2;
        plan.levels[l].coords =
            sparse::downsample_coords(plan.levels[l - 1].coords, plan.levels[l - 1].stride);
        plan.levels[l].index = sparse::CoordIndex(plan.levels[l].coords);
    }
    plan.down.resize(n_levels - 1);
    plan.up.resize(n_levels - 1);
    for (int l = 0; l + 1 < n_levels; ++l) {
        plan.down[l] = sparse::build_kernel_map(plan.levels[l].coords, plan.levels[l].index,
                                                plan.levels[l].stride, plan.levels[l + 1].coords,
                                                cfg.kernel);
        plan.up[l] = sparse::build_transpose_map(plan.levels[l + 1].index, plan.levels[l].coords,
                                                 plan.levels[l].stride, cfg.kernel);
    }
    for (int l = 0; l < n_levels; ++l) {
        auto& lv = plan.levels[l];
        if (l >= 1)
            lv.same = sparse::build_kernel_map(lv.coords, lv.index, lv.stride, lv.coords, cfg.kernel);
        lv.ctx = blocks::make_level_ctx(lv.coords, lv.stride, l >= 1 ? &lv.same : nullptr,
                                        cfg.window_side);
    }
    return plan;
}

ModelNodes upload_model(Tape<float>& t, const Model& m) {
    ModelNodes n;
    n.first = static_cast<NodeId>(t.size());
    for (const auto& p : m.enc_down) n.enc_down.push_back(blocks::upload(t, p));
    for (const auto& p : m.enc_tscm) n.enc_tscm.push_back(blocks::upload(t, p));
    n.henc_down = blocks::upload(t, m.henc_down);
    n.henc_tscm = blocks::upload(t, m.henc_tscm);
    n.hdec_tscm = blocks::upload(t, m.hdec_tscm);
    n.hdec_up = blocks::upload(t, m.hdec_up);
    for (int i = 0; i < m.cfg.slice_count; ++i) {
        n.ctx_mu.push_back(blocks::upload(t, m.ctx_mu[i]));
        n.ctx_sigma.push_back(blocks::upload(t, m.ctx_sigma[i]));
        n.ctx_ye.push_back(blocks::upload(t, m.ctx_ye[i]));
    }
    for (const auto& p : m.dec_up) n.dec_up.push_back(blocks::upload(t, p));
    for (const auto& p : m.dec_tscm) n.dec_tscm.push_back(blocks::upload(t, p));
    n.prior_mu = t.param(m.prior_mu);
    n.prior_logsigma = t.param(m.prior_logsigma);

    size_t expected = 0;
    visit_model(const_cast<Model&>(m), [&](const std::string&, Mat<float>&) { ++expected; });
    if (t.size() - static_cast<size_t>(n.first) != expected)
        throw std::logic_error("upload_model: leaf count does not match visit order");
    return n;
}

NodeId analysis_fwd(Tape<float>& t, NodeId attrs, const ModelNodes& n, const Model& m,
                    const GeometryPlan& plan) {
    const auto& cfg = m.cfg;
    NodeId x = attrs;
    for (int i = 0; i < cfg.encoder_stages; ++i) {
        const auto& lv_out = plan.levels[i + 1];
        x = blocks::conv_fwd(t, x, n.enc_down[i], &plan.down[i], lv_out.ctx.rows,
                             m.enc_down[i].c_in);
        if (i != cfg.encoder_stages - 1) x = blocks::tscm_fwd(t, x, n.enc_tscm[i], lv_out.ctx);
    }
    return x;
}

NodeId synthesis_fwd(Tape<float>& t, NodeId y_bar, const ModelNodes& n, const Model& m,
                     const GeometryPlan& plan) {
    const auto& cfg = m.cfg;
    NodeId x = y_bar;
    for (int i = 0; i < cfg.encoder_stages; ++i) {
        int level_in = cfg.encoder_stages - i;  // stride level before this upsampling
        const auto& lv_out = plan.levels[level_in - 1];
        x = blocks::conv_fwd(t, x, n.dec_up[i], &plan.up[level_in - 1], lv_out.ctx.rows,
                             m.dec_up[i].c_in);
        if (i != cfg.encoder_stages - 1) x = blocks::tscm_fwd(t, x, n.dec_tscm[i], lv_out.ctx);
    }
    return clamp(t, x, 0.0f, 1.0f);
}

NodeId hyper_enc_fwd(Tape<float>& t, NodeId y, const ModelNodes& n, const Model& m,
                     const GeometryPlan& plan) {
    const int lbase = m.cfg.encoder_stages;
    NodeId x = y;
    for (int i = 0; i < m.cfg.hyper_stages; ++i) {
        const auto& lv_out = plan.levels[lbase + i + 1];
        x = blocks::conv_fwd(t, x, n.henc_down, &plan.down[lbase + i], lv_out.ctx.rows,
                             m.henc_down.c_in);
        x = blocks::tscm_fwd(t, x, n.henc_tscm, lv_out.ctx);
    }
    return x;
}

std::pair<NodeId, NodeId> hyper_dec_fwd(Tape<float>& t, NodeId z_hat, const ModelNodes& n,
                                        const Model& m, const GeometryPlan& plan) {
    const int lbase = m.cfg.encoder_stages;
    const int ltop = lbase + m.cfg.hyper_stages;
    NodeId x = blocks::tscm_fwd(t, z_hat, n.hdec_tscm, plan.levels[ltop].ctx);
    x = blocks::conv_fwd(t, x, n.hdec_up, &plan.up[ltop - 1], plan.levels[ltop - 1].ctx.rows,
                         m.hdec_up.c_in);
    const int l = m.cfg.latent_channels;
    NodeId mu_p = slice_cols(t, x, 0, l);
    NodeId raw = slice_cols(t, x, l, 2 * l);
    NodeId sigma_p = clamp_min(t, exp_op(t, clamp(t, raw, -10.0f, 8.0f)), kSigmaMin);
    return {mu_p, sigma_p};
}

std::pair<NodeId, NodeId> prior_fwd(Tape<float>& t, const ModelNodes& n, int n_rows) {
    NodeId mu = repeat_rows(t, n.prior_mu, n_rows);
    NodeId sigma = clamp_min(
        t, exp_op(t, clamp(t, repeat_rows(t, n.prior_logsigma, n_rows), -10.0f, 8.0f)), kSigmaMin);
    return {mu, sigma};
}

namespace {

std::vector<NodeId> with_prev(const std::vector<NodeId>& ybar_prev, NodeId head) {
    std::vector<NodeId> inputs;
    inputs.reserve(ybar_prev.size() + 1);
    inputs.push_back(head);
    for (NodeId p : ybar_prev) inputs.push_back(p);
    return inputs;
}

}  // namespace

std::pair<NodeId, NodeId> slice_params_fwd(Tape<float>& t, int i,
                                           const std::vector<NodeId>& ybar_prev, NodeId mu_p,
                                           NodeId sigma_p, const ModelNodes& n, const Model& m,
                                           const GeometryPlan& plan) {
    const int s = m.cfg.slice_width();
    const auto& lvl = plan.levels[m.cfg.encoder_stages].ctx;
    if (!m.context_enabled) {
        return {slice_cols(t, mu_p, i * s, (i + 1) * s), slice_cols(t, sigma_p, i * s, (i + 1) * s)};
    }
    NodeId mu_i = blocks::ctx_transform_fwd(t, with_prev(ybar_prev, mu_p), n.ctx_mu[i], lvl);
    NodeId raw = blocks::ctx_transform_fwd(t, with_prev(ybar_prev, sigma_p), n.ctx_sigma[i], lvl);
    NodeId sigma_i = shift(t, relu(t, raw), kSigmaMin);
    return {mu_i, sigma_i};
}

NodeId slice_refine_fwd(Tape<float>& t, int i, const std::vector<NodeId>& ybar_prev, NodeId yhat_i,
                        NodeId mu_p, const ModelNodes& n, const Model& m,
                        const GeometryPlan& plan) {
    const auto& lvl = plan.levels[m.cfg.encoder_stages].ctx;
    std::vector<NodeId> inputs = with_prev(ybar_prev, yhat_i);
    inputs.insert(inputs.begin() + 1, mu_p);
    return blocks::ctx_transform_fwd(t, inputs, n.ctx_ye[i], lvl);
}

ContextOut context_fwd(Tape<float>& t, NodeId y_hat, NodeId mu_p, NodeId sigma_p,
                       const ModelNodes& n, const Model& m, const GeometryPlan& plan) {
    const int s = m.cfg.slice_width();
    ContextOut out;
    for (int i = 0; i < m.cfg.slice_count; ++i) {
        auto [mu_i, sigma_i] = slice_params_fwd(t, i, out.ybar, mu_p, sigma_p, n, m, plan);
        NodeId yhat_i = slice_cols(t, y_hat, i * s, (i + 1) * s);
        NodeId ybar_i = yhat_i;
        if (m.context_enabled) {
            NodeId ye = slice_refine_fwd(t, i, out.ybar, yhat_i, mu_p, n, m, plan);
            ybar_i = add(t, yhat_i, ye);
        }
        out.mu.push_back(mu_i);
        out.sigma.push_back(sigma_i);
        out.yhat.push_back(yhat_i);
        out.ybar.push_back(ybar_i);
    }
    return out;
}

CodecNodes forward_codec(Tape<float>& t, NodeId attrs, const ModelNodes& n, const Model& m,
                         const GeometryPlan& plan) {
    CodecNodes c;
    c.y = analysis_fwd(t, attrs, n, m, plan);
    c.y_hat = round_ste(t, c.y);
    c.z = hyper_enc_fwd(t, c.y, n, m, plan);
    c.z_hat = round_ste(t, c.z);
    std::tie(c.mu_p, c.sigma_p) = hyper_dec_fwd(t, c.z_hat, n, m, plan);
    c.ctx = context_fwd(t, c.y_hat, c.mu_p, c.sigma_p, n, m, plan);

    NodeId rate_y = -1;
    for (int i = 0; i < m.cfg.slice_count; ++i) {
        NodeId bits = gaussian_bits(t, c.ctx.yhat[i], c.ctx.mu[i], c.ctx.sigma[i]);
        rate_y = rate_y < 0 ? bits : add(t, rate_y, bits);
    }
    c.rate_y_bits = rate_y;

    const int nz = plan.levels[m.cfg.encoder_stages + m.cfg.hyper_stages].ctx.rows;
    auto [pz_mu, pz_sigma] = prior_fwd(t, n, nz);
    c.rate_z_bits = gaussian_bits(t, c.z_hat, pz_mu, pz_sigma);

    c.y_bar = m.cfg.slice_count == 1 ? c.ctx.ybar[0] : concat_cols(t, c.ctx.ybar);
    c.recon = synthesis_fwd(t, c.y_bar, n, m, plan);
    return c;
}

std::vector<coder::SymbolModel> to_models(const Mat<float>& mu, const Mat<float>& sigma) {
    if (!mu.same_shape(sigma)) throw std::invalid_argument("to_models: shape mismatch");
    std::vector<coder::SymbolModel> models(mu.size());
    for (size_t i = 0; i < mu.size(); ++i) models[i] = {mu.data()[i], sigma.data()[i]};
    return models;
}

std::vector<int32_t> to_symbols(const Mat<float>& values) {
    std::vector<int32_t> out(values.size());
    for (size_t i = 0; i < values.size(); ++i)
        out[i] = static_cast<int32_t>(std::lround(values.data()[i]));
    return out;
}

namespace {

Mat<float> symbols_to_mat(const std::vector<int32_t>& symbols, int rows, int cols) {
    if (static_cast<size_t>(rows) * cols != symbols.size())
        throw CodecError("decoded symbol count mismatch");
    Mat<float> m(rows, cols);
    for (size_t i = 0; i < symbols.size(); ++i) m.data()[i] = static_cast<float>(symbols[i]);
    return m;
}

}  // namespace

EncodeResult encode_cloud(const pcio::PointCloud& pc, const Model& m, uint64_t digest,
                          float lambda) {
    if (pc.size() == 0) throw CodecError("encode: empty cloud");
    GeometryPlan plan = build_plan(pc.coords, m.cfg);
    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);
    NodeId attrs = t.input(pc.attrs);
    CodecNodes c = forward_codec(t, attrs, n, m, plan);

    const int nz = plan.levels[m.cfg.encoder_stages + m.cfg.hyper_stages].ctx.rows;
    auto [pz_mu, pz_sigma] = prior_fwd(t, n, nz);

    EncodeResult res;
    auto z_models = to_models(t.val(pz_mu), t.val(pz_sigma));
    auto z_syms = to_symbols(t.val(c.z_hat));
    std::vector<uint8_t> z_payload = coder::range_encode(z_syms, z_models);
    res.est_z_bits = coder::estimate_rate_bits(z_syms, z_models);
    res.coded_z_bits = z_payload.size() * 8;

    std::vector<std::vector<uint8_t>> slice_payloads;
    for (int i = 0; i < m.cfg.slice_count; ++i) {
        auto models = to_models(t.val(c.ctx.mu[i]), t.val(c.ctx.sigma[i]));
        auto syms = to_symbols(t.val(c.ctx.yhat[i]));
        slice_payloads.push_back(coder::range_encode(syms, models));
        res.est_y_bits += coder::estimate_rate_bits(syms, models);
        res.coded_y_bits += slice_payloads.back().size() * 8;
    }

    res.recon.coords = pc.coords;
    res.recon.attrs = t.val(c.recon);
    res.recon.bit_depth = pc.bit_depth;

    coder::BitstreamHeader header;
    header.context_enabled = m.context_enabled;
    header.bit_depth = static_cast<uint8_t>(pc.bit_depth);
    header.slice_count = static_cast<uint8_t>(m.cfg.slice_count);
    header.lambda = lambda;
    header.config_digest = digest;
    header.point_count = static_cast<uint32_t>(pc.size());
    header.latent_count = static_cast<uint32_t>(plan.levels[m.cfg.encoder_stages].ctx.rows);
    header.hyper_count = static_cast<uint32_t>(nz);
    res.bitstream = coder::pack_bitstream(header, z_payload, slice_payloads);
    return res;
}

DecodeResult decode_cloud(const std::vector<uint8_t>& bitstream, const pcio::PointCloud& geometry,
                          const Model& m, uint64_t digest) {
    coder::UnpackedBitstream u = coder::unpack_bitstream(bitstream);
    if (u.header.config_digest != digest) throw CodecError("weights digest mismatch");
    if (u.header.point_count != geometry.size()) throw CodecError("geometry point count mismatch");
    if (u.header.bit_depth != geometry.bit_depth) throw CodecError("geometry bit depth mismatch");
    if (u.header.slice_count != m.cfg.slice_count) throw CodecError("slice count mismatch");
    if (u.header.context_enabled != m.context_enabled)
        throw CodecError("context flag mismatch between stream and weights");

    GeometryPlan plan = build_plan(geometry.coords, m.cfg);
    const int ny = plan.levels[m.cfg.encoder_stages].ctx.rows;
    const int nz = plan.levels[m.cfg.encoder_stages + m.cfg.hyper_stages].ctx.rows;
    if (u.header.latent_count != static_cast<uint32_t>(ny) ||
        u.header.hyper_count != static_cast<uint32_t>(nz))
        throw CodecError("geometry occupancy mismatch");

    Tape<float> t(false);
    ModelNodes n = upload_model(t, m);

    auto [pz_mu, pz_sigma] = prior_fwd(t, n, nz);
    auto z_models = to_models(t.val(pz_mu), t.val(pz_sigma));
    auto z_syms = coder::range_decode(u.z, z_models);
    DecodeResult res;
    res.z_hat = symbols_to_mat(z_syms, nz, m.cfg.hyper_channels);
    NodeId z_hat = t.input(res.z_hat);

    auto [mu_p, sigma_p] = hyper_dec_fwd(t, z_hat, n, m, plan);

    const int s = m.cfg.slice_width();
    std::vector<NodeId> ybar;
    for (int i = 0; i < m.cfg.slice_count; ++i) {
        auto [mu_i, sigma_i] = slice_params_fwd(t, i, ybar, mu_p, sigma_p, n, m, plan);
        auto models = to_models(t.val(mu_i), t.val(sigma_i));
        auto syms = coder::range_decode(u.slices[i], models);
        res.yhat_slices.push_back(symbols_to_mat(syms, ny, s));
        NodeId yhat_i = t.input(res.yhat_slices.back());
        NodeId ybar_i = yhat_i;
        if (m.context_enabled) {
            NodeId ye = slice_refine_fwd(t, i, ybar, yhat_i, mu_p, n, m, plan);
            ybar_i = add(t, yhat_i, ye);
        }
        ybar.push_back(ybar_i);
    }

    NodeId y_bar = m.cfg.slice_count == 1 ? ybar[0] : concat_cols(t, ybar);
    NodeId recon = synthesis_fwd(t, y_bar, n, m, plan);
    res.recon.coords = geometry.coords;
    res.recon.attrs = t.val(recon);
    res.recon.bit_depth = geometry.bit_depth;
    return res;
}

}  // namespace pcac::net
