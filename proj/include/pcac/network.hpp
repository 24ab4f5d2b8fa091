#pragma once

#include "pcac/autodiff.hpp"
#include "pcac/blocks.hpp"
#include "pcac/coder.hpp"
#include "pcac/pcio.hpp"
#include "pcac/sparse.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace pcac::net {

using ad::NodeId;
using ad::Tape;
using sparse::Coord;

struct CodecConfig {
    int feature_channels = 128;
    int latent_channels = 128;
    int hyper_channels = 64;
    int context_channels = 32;
    int slice_count = 8;
    int encoder_stages = 3;  // stride doublings before the latent
    int hyper_stages = 1;
    int kernel = 3;
    int window_side = 8;
    int head_count = 4;

    int slice_width() const { return latent_channels / slice_count; }
    int level_count() const { return encoder_stages + hyper_stages + 1; }
    void validate() const;
};

inline constexpr float kSigmaMin = 0.04f;

// All trainable state. Weights are float32 end to end.
struct Model {
    CodecConfig cfg;
    bool context_enabled = true;

    std::vector<blocks::ConvP<Mat<float>>> enc_down;
    std::vector<blocks::TscmP<Mat<float>>> enc_tscm;
    blocks::ConvP<Mat<float>> henc_down;
    blocks::TscmP<Mat<float>> henc_tscm;
    blocks::TscmP<Mat<float>> hdec_tscm;
    blocks::ConvP<Mat<float>> hdec_up;
    std::vector<blocks::CtxTransformP<Mat<float>>> ctx_mu, ctx_sigma, ctx_ye;
    std::vector<blocks::ConvP<Mat<float>>> dec_up;
    std::vector<blocks::TscmP<Mat<float>>> dec_tscm;
    Mat<float> prior_mu;        // 1 x hyper_channels
    Mat<float> prior_logsigma;  // 1 x hyper_channels
};

Model make_model(const CodecConfig& cfg, uint64_t seed);

// Deterministic walk over every parameter tensor; the order defines the
// weights-file layout.
template <typename F>
void visit_model(Model& m, F&& f) {
    for (size_t i = 0; i < m.enc_down.size(); ++i)
        blocks::visit(m.enc_down[i], "enc.down" + std::to_string(i), f);
    for (size_t i = 0; i < m.enc_tscm.size(); ++i)
        blocks::visit(m.enc_tscm[i], "enc.tscm" + std::to_string(i), f);
    blocks::visit(m.henc_down, "hyper.enc.down", f);
    blocks::visit(m.henc_tscm, "hyper.enc.tscm", f);
    blocks::visit(m.hdec_tscm, "hyper.dec.tscm", f);
    blocks::visit(m.hdec_up, "hyper.dec.up", f);
    for (size_t i = 0; i < m.ctx_mu.size(); ++i) {
        blocks::visit(m.ctx_mu[i], "ctx.mu" + std::to_string(i), f);
        blocks::visit(m.ctx_sigma[i], "ctx.sigma" + std::to_string(i), f);
        blocks::visit(m.ctx_ye[i], "ctx.ye" + std::to_string(i), f);
    }
    for (size_t i = 0; i < m.dec_up.size(); ++i)
        blocks::visit(m.dec_up[i], "dec.up" + std::to_string(i), f);
    for (size_t i = 0; i < m.dec_tscm.size(); ++i)
        blocks::visit(m.dec_tscm[i], "dec.tscm" + std::to_string(i), f);
    f(std::string("prior.mu"), m.prior_mu);
    f(std::string("prior.logsigma"), m.prior_logsigma);
}

// Geometry-only structure shared by every pass over one cloud: per-level
// coordinates, kernel maps and attention windows. Must outlive any tape
// built against it.
struct GeometryLevel {
    std::vector<Coord> coords;
    sparse::CoordIndex index;
    int32_t stride = 1;
    sparse::KernelMap same;  // K x K x K stride-preserving (levels >= 1)
    blocks::LevelCtx ctx;
};

struct GeometryPlan {
    std::vector<GeometryLevel> levels;
    std::vector<sparse::KernelMap> down;  // [l]: level l -> l+1
    std::vector<sparse::KernelMap> up;    // [l]: level l+1 -> l
};

GeometryPlan build_plan(const std::vector<Coord>& coords, const CodecConfig& cfg);

// Mirror of Model with tape leaf ids; leaf creation order equals
// visit_model order.
struct ModelNodes {
    std::vector<blocks::ConvP<NodeId>> enc_down;
    std::vector<blocks::TscmP<NodeId>> enc_tscm;
    blocks::ConvP<NodeId> henc_down;
    blocks::TscmP<NodeId> henc_tscm;
    blocks::TscmP<NodeId> hdec_tscm;
    blocks::ConvP<NodeId> hdec_up;
    std::vector<blocks::CtxTransformP<NodeId>> ctx_mu, ctx_sigma, ctx_ye;
    std::vector<blocks::ConvP<NodeId>> dec_up;
    std::vector<blocks::TscmP<NodeId>> dec_tscm;
    NodeId prior_mu = -1;
    NodeId prior_logsigma = -1;
    NodeId first = -1;  // id of the first uploaded leaf
};

ModelNodes upload_model(Tape<float>& t, const Model& m);

// ---- forward passes (shared by training, encode and decode) ----

NodeId analysis_fwd(Tape<float>& t, NodeId attrs, const ModelNodes& n, const Model& m,
                    const GeometryPlan& plan);
NodeId synthesis_fwd(Tape<float>& t, NodeId y_bar, const ModelNodes& n, const Model& m,
                     const GeometryPlan& plan);
NodeId hyper_enc_fwd(Tape<float>& t, NodeId y, const ModelNodes& n, const Model& m,
                     const GeometryPlan& plan);
// (mu', sigma'), each N_latent x latent_channels; sigma' >= kSigmaMin.
std::pair<NodeId, NodeId> hyper_dec_fwd(Tape<float>& t, NodeId z_hat, const ModelNodes& n,
                                        const Model& m, const GeometryPlan& plan);
// z prior broadcast to n_rows, sigma floored.
std::pair<NodeId, NodeId> prior_fwd(Tape<float>& t, const ModelNodes& n, int n_rows);

// Per-slice refinement pieces; slice indices are 0-based.
std::pair<NodeId, NodeId> slice_params_fwd(Tape<float>& t, int i,
                                           const std::vector<NodeId>& ybar_prev, NodeId mu_p,
                                           NodeId sigma_p, const ModelNodes& n, const Model& m,
                                           const GeometryPlan& plan);
NodeId slice_refine_fwd(Tape<float>& t, int i, const std::vector<NodeId>& ybar_prev, NodeId yhat_i,
                        NodeId mu_p, const ModelNodes& n, const Model& m, const GeometryPlan& plan);

struct ContextOut {
    std::vector<NodeId> mu, sigma, ybar, yhat;
};

// Sequential refinement over all slices of y_hat. With the context module
// disabled, (mu_i, sigma_i) are slices of the hyper outputs and ybar = yhat.
ContextOut context_fwd(Tape<float>& t, NodeId y_hat, NodeId mu_p, NodeId sigma_p,
                       const ModelNodes& n, const Model& m, const GeometryPlan& plan);

struct CodecNodes {
    NodeId y = -1, y_hat = -1, z = -1, z_hat = -1;
    NodeId mu_p = -1, sigma_p = -1;
    ContextOut ctx;
    NodeId y_bar = -1;
    NodeId recon = -1;
    NodeId rate_y_bits = -1, rate_z_bits = -1;
};

// Full training/evaluation graph: analysis, quantization, hyper path,
// context, rates from the discretized Gaussian model, synthesis.
CodecNodes forward_codec(Tape<float>& t, NodeId attrs, const ModelNodes& n, const Model& m,
                         const GeometryPlan& plan);

// ---- stream codec ----

struct EncodeResult {
    std::vector<uint8_t> bitstream;
    pcio::PointCloud recon;  // encoder-side reconstruction (same path as decode)
    double est_y_bits = 0, est_z_bits = 0;
    size_t coded_y_bits = 0, coded_z_bits = 0;
};

EncodeResult encode_cloud(const pcio::PointCloud& pc, const Model& m, uint64_t digest,
                          float lambda);

struct DecodeResult {
    pcio::PointCloud recon;
    std::vector<Mat<float>> yhat_slices;  // decoded symbols per slice
    Mat<float> z_hat;
};

class CodecError : public std::runtime_error {
public:
    explicit CodecError(const std::string& msg) : std::runtime_error(msg) {}
};

DecodeResult decode_cloud(const std::vector<uint8_t>& bitstream, const pcio::PointCloud& geometry,
                          const Model& m, uint64_t digest);

// Row-major symbol/model flattening shared by encoder and decoder.
std::vector<coder::SymbolModel> to_models(const Mat<float>& mu, const Mat<float>& sigma);
std::vector<int32_t> to_symbols(const Mat<float>& values);

}  // namespace pcac::net
