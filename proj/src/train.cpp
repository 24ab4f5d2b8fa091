#include "pcac/train.hpp"

#include <cmath>
#include <sstream>

namespace pcac::train {

using ad::NodeId;
using ad::Tape;

double rd_loss(const Mat<float>& target, const Mat<float>& recon, double rate_y_bits,
               double rate_z_bits, double lambda, int n_points) {
    if (!target.same_shape(recon)) throw std::invalid_argument("rd_loss: shape mismatch");
    if (n_points <= 0) throw std::invalid_argument("rd_loss: n_points must be positive");
    double se = 0.0;
    for (size_t i = 0; i < target.size(); ++i) {
        double d = static_cast<double>(target.data()[i]) - recon.data()[i];
        se += d * d;
    }
    double mse = se / static_cast<double>(target.size());
    return (rate_y_bits + rate_z_bits) / n_points + lambda * mse;
}

void Adam::init(const std::vector<weights::ParamRef>& params) {
    m1.clear();
    m2.clear();
    step_count = 0;
    for (const auto& p : params) {
        m1.push_back(Mat<float>::zeros(p.value->rows(), p.value->cols()));
        m2.push_back(Mat<float>::zeros(p.value->rows(), p.value->cols()));
    }
}

void Adam::apply(const std::vector<weights::ParamRef>& params,
                 const std::vector<const Mat<float>*>& grads) {
    if (params.size() != m1.size() || params.size() != grads.size())
        throw std::invalid_argument("Adam: size mismatch");
    ++step_count;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(step_count));
    for (size_t i = 0; i < params.size(); ++i) {
        if (!grads[i]) continue;
        Mat<float>& p = *params[i].value;
        const Mat<float>& g = *grads[i];
        for (size_t e = 0; e < p.size(); ++e) {
            float ge = g.data()[e];
            float& m = m1[i].data()[e];
            float& v = m2[i].data()[e];
            m = beta1 * m + (1.0f - beta1) * ge;
            v = beta2 * v + (1.0f - beta2) * ge * ge;
            double mhat = m / bc1;
            double vhat = v / bc2;
            p.data()[e] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

StepResult train_step(net::Model& model, const pcio::PointCloud& block,
                      const net::GeometryPlan& plan, Adam& opt, float lambda) {
    const int n_points = static_cast<int>(block.size());
    Tape<float> t(true);
    net::ModelNodes nodes = net::upload_model(t, model);
    NodeId attrs = t.input(block.attrs);
    net::CodecNodes c = net::forward_codec(t, attrs, nodes, model, plan);

    NodeId diff = sub(t, c.recon, attrs);
    NodeId mse = scale(t, sum_all(t, mul(t, diff, diff)),
                       1.0f / static_cast<float>(block.attrs.size()));
    NodeId rate = scale(t, add(t, c.rate_y_bits, c.rate_z_bits), 1.0f / n_points);
    NodeId loss = add(t, rate, scale(t, mse, lambda));

    StepResult res;
    res.loss = t.val(loss)(0, 0);
    res.rate_y_bits = t.val(c.rate_y_bits)(0, 0);
    res.rate_z_bits = t.val(c.rate_z_bits)(0, 0);
    res.mse = t.val(mse)(0, 0);
    if (!std::isfinite(res.loss)) {
        std::ostringstream msg;
        msg << "train_step: non-finite loss (rate_y=" << res.rate_y_bits
            << " rate_z=" << res.rate_z_bits << " mse=" << res.mse << ")";
        throw std::runtime_error(msg.str());
    }

    t.backward(loss);

    auto params = weights::collect_params(model);
    std::vector<const Mat<float>*> grads(params.size(), nullptr);
    for (size_t i = 0; i < params.size(); ++i) {
        NodeId id = nodes.first + static_cast<NodeId>(i);
        // untouched grads mean the parameter was not in this phase's graph
        if (t.requires_grad(id) && t.grad_touched(id)) grads[i] = &t.grad(id);
    }
    opt.apply(params, grads);
    return res;
}

FitResult fit(net::Model& model, const std::vector<pcio::PointCloud>& blocks,
              const TrainConfig& cfg) {
    if (blocks.empty()) throw std::invalid_argument("fit: empty dataset");
    std::vector<net::GeometryPlan> plans;
    plans.reserve(blocks.size());
    for (const auto& b : blocks) plans.push_back(net::build_plan(b.coords, model.cfg));

    auto params = weights::collect_params(model);
    Adam opt;
    opt.lr = cfg.lr;
    opt.init(params);

    FitResult out;
    auto run_phase = [&](int steps, bool context_on, const std::string& tag) {
        if (steps <= 0) return;
        model.context_enabled = context_on;
        for (int s = 0; s < steps; ++s) {
            size_t b = static_cast<size_t>(s) % blocks.size();
            StepResult r = train_step(model, blocks[b], plans[b], opt, cfg.lambda);
            out.losses.push_back(r.loss);
        }
        if (!cfg.checkpoint_prefix.empty()) {
            weights::save_model(model, cfg.checkpoint_prefix + "_" + tag + ".pcw");
            weights::TrainState st;
            st.step = opt.step_count;
            st.m1 = opt.m1;
            st.m2 = opt.m2;
            weights::save_state(st, params, cfg.checkpoint_prefix + "_" + tag + ".pcw.state");
        }
    };
    run_phase(cfg.phase1_steps, false, "phase1");
    run_phase(cfg.phase2_steps, true, "phase2");
    return out;
}

}  // namespace pcac::train
