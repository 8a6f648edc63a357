#include "metavd/vd.hpp"

#include <cmath>

namespace metavd {

DropoutVector make_dropout_vector(std::vector<size_t> shape, double log_alpha_value) {
    DropoutVector dv{Tensor::full(std::move(shape), log_alpha_value)};
    clamp(dv);
    return dv;
}

void clamp_log_alpha(Tensor& log_alpha) {
    for (double& x : log_alpha.v) {
        if (x < kLogAlphaMin) x = kLogAlphaMin;
        if (x > kLogAlphaMax) x = kLogAlphaMax;
    }
}

double kl_term(const DropoutVector& dv) {
    double total = 0.0;
    for (double la : dv.log_alpha.v) total += 0.5 * std::log1p(std::exp(-la));
    return total;
}

Tensor kl_gradient(const DropoutVector& dv) {
    Tensor g = Tensor::zeros(dv.log_alpha.shape);
    for (size_t k = 0; k < g.v.size(); ++k) {
        // d/dx 0.5 ln(1 + e^-x) = -0.5 sigmoid(-x)
        double la = dv.log_alpha.v[k];
        g.v[k] = -0.5 / (1.0 + std::exp(la));
    }
    return g;
}

Tensor dropout_rate(const DropoutVector& dv) {
    Tensor p = Tensor::zeros(dv.log_alpha.shape);
    for (size_t k = 0; k < p.v.size(); ++k) {
        double a = std::exp(dv.log_alpha.v[k]);
        p.v[k] = a / (1.0 + a);
    }
    return p;
}

ElboResult elbo_loss_and_grads(const MlpSpec& spec, const ModelParams& params, const DropoutVector& dv,
                               const Batch& batch, const ElboConfig& cfg) {
    if (batch.x.rows() == 0) throw KernelError("elbo_loss_and_grads: empty batch");
    if (cfg.beta < 0.0) throw KernelError("elbo_loss_and_grads: beta must be >= 0");

    ElboResult res;
    if (dv.empty()) {
        auto [logits, cache] = forward(spec, params, batch.x);
        auto xent = softmax_cross_entropy(logits, batch.y);
        auto back = backward(spec, params, cache, xent.logit_cotangent);
        res.loss = xent.mean_loss;
        res.grads_theta = std::move(back.params);
        return res;
    }

    VdForward vd{&dv.log_alpha, cfg.noise_seed, cfg.fixed_noise};
    auto [logits, cache] = forward(spec, params, batch.x, vd);
    auto xent = softmax_cross_entropy(logits, batch.y);
    auto back = backward(spec, params, cache, xent.logit_cotangent);

    double denom = cfg.kl_over_dataset ? static_cast<double>(cfg.dataset_size) : 1.0;
    res.loss = xent.mean_loss + cfg.beta * kl_term(dv) / denom;
    res.grads_theta = std::move(back.params);
    res.grads_log_alpha = std::move(back.log_alpha);
    Tensor klg = kl_gradient(dv);
    axpy(res.grads_log_alpha, cfg.beta / denom, klg);
    return res;
}

BoolMask compression_mask(const DropoutVector& dv, double p_threshold) {
    if (!(p_threshold > 0.0 && p_threshold < 1.0)) {
        throw KernelError("compression_mask: threshold must lie in (0, 1)");
    }
    Tensor p = dropout_rate(dv);
    BoolMask mask;
    mask.shape = p.shape;
    mask.keep.resize(p.size());
    for (size_t k = 0; k < p.size(); ++k) mask.keep[k] = p.v[k] <= p_threshold ? 1 : 0;
    return mask;
}

void apply_mask(Tensor& w, const BoolMask& mask) {
    if (w.shape != mask.shape) throw KernelError("apply_mask: shape mismatch");
    for (size_t k = 0; k < w.v.size(); ++k) {
        if (!mask.keep[k]) w.v[k] = 0.0;
    }
}

} // namespace metavd
