#pragma once

#include "pcac/network.hpp"
#include "pcac/pcio.hpp"
#include "pcac/weights.hpp"

#include <string>
#include <vector>

namespace pcac::train {

struct TrainConfig {
    float lambda = 16000.0f;
    float lr = 1e-4f;
    int phase1_steps = 0;  // encoder/decoder/hyper with the context bypassed
    int phase2_steps = 0;  // joint
    uint64_t seed = 1;
    std::string checkpoint_prefix;  // when set, phase checkpoints are written
};

// (rate_y + rate_z) / n_points + lambda * mean squared YUV error.
double rd_loss(const Mat<float>& target, const Mat<float>& recon, double rate_y_bits,
               double rate_z_bits, double lambda, int n_points);

struct Adam {
    float lr = 1e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    int64_t step_count = 0;
    std::vector<Mat<float>> m1, m2;

    void init(const std::vector<weights::ParamRef>& params);
    // null gradient entries leave the parameter and its moments untouched
    void apply(const std::vector<weights::ParamRef>& params,
               const std::vector<const Mat<float>*>& grads);
};

struct StepResult {
    double loss = 0;
    double rate_y_bits = 0;
    double rate_z_bits = 0;
    double mse = 0;
};

// One forward/backward/update on a single block. Throws on non-finite loss.
StepResult train_step(net::Model& model, const pcio::PointCloud& block,
                      const net::GeometryPlan& plan, Adam& opt, float lambda);

struct FitResult {
    std::vector<double> losses;  // per step, phase 1 then phase 2
};

// Phase 1 trains with the context module bypassed, phase 2 jointly; the
// model's context flag reflects the last phase trained.
FitResult fit(net::Model& model, const std::vector<pcio::PointCloud>& blocks,
              const TrainConfig& cfg);

}  // namespace pcac::train
