#ifndef METAVD_VD_HPP
#define METAVD_VD_HPP

#include <cstdint>
#include <vector>

#include "metavd/nn.hpp"
#include "metavd/tensor.hpp"

namespace metavd {

// Working range of the dropout logit. alpha = exp(log_alpha), so this bounds
// alpha to [e^-8, e^8] and keeps the aggregation denominator away from zero.
constexpr double kLogAlphaMin = -8.0;
constexpr double kLogAlphaMax = 8.0;

// Per-weight log dropout variables for the VD layer (biases carry none).
struct DropoutVector {
    Tensor log_alpha;

    bool empty() const { return log_alpha.empty(); }
};

DropoutVector make_dropout_vector(std::vector<size_t> shape, double log_alpha_value);

void clamp_log_alpha(Tensor& log_alpha);
inline void clamp(DropoutVector& dv) { clamp_log_alpha(dv.log_alpha); }

// KL(q || p) under the hierarchical prior: sum_k 0.5 ln(1 + 1/alpha_k).
double kl_term(const DropoutVector& dv);

// d kl_term / d log_alpha, elementwise. Negative everywhere.
Tensor kl_gradient(const DropoutVector& dv);

// Dropout rate p = alpha / (1 + alpha), elementwise in [0, 1].
Tensor dropout_rate(const DropoutVector& dv);

struct Batch {
    Tensor x;
    std::vector<int> y;
};

struct ElboConfig {
    double beta = 5.0;           // KL weight
    uint64_t noise_seed = 0;     // fixes the reparameterization noise
    size_t dataset_size = 1;     // |D^m| of the owning client
    bool kl_over_dataset = true; // divide the KL term by dataset_size
    const Tensor* fixed_noise = nullptr;
};

struct ElboResult {
    double loss;
    GradBundle grads_theta;
    Tensor grads_log_alpha; // empty when dv is empty / spec has no VD layer
};

// Negative ELBO and its gradients: mean NLL over the batch with the
// reparameterized VD layer, plus the weighted KL term. Passing an empty dv
// degenerates to the plain network loss.
ElboResult elbo_loss_and_grads(const MlpSpec& spec, const ModelParams& params, const DropoutVector& dv,
                               const Batch& batch, const ElboConfig& cfg);

struct BoolMask {
    std::vector<size_t> shape;
    std::vector<uint8_t> keep; // 1 = keep, 0 = drop

    size_t size() const { return keep.size(); }
};

// Keep a weight iff its dropout rate is at most p_threshold.
BoolMask compression_mask(const DropoutVector& dv, double p_threshold);

// Zero out dropped weights of the VD layer in place.
void apply_mask(Tensor& w, const BoolMask& mask);

} // namespace metavd

#endif
