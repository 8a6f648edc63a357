#ifndef METAVD_NN_HPP
#define METAVD_NN_HPP

#include <optional>
#include <utility>
#include <vector>

#include "metavd/rng.hpp"
#include "metavd/tensor.hpp"

namespace metavd {

enum class Activation { leaky_relu, relu, identity };

// Architecture of the dense backbone. layer_sizes = {input, hidden..., output};
// dense layer l maps layer_sizes[l] -> layer_sizes[l+1]. At most one layer
// (the one feeding the pre-logit activation) carries multiplicative weight
// noise; its index is vd_layer when set.
struct MlpSpec {
    std::vector<size_t> layer_sizes;
    Activation activation = Activation::leaky_relu;
    double leaky_slope = 0.01;
    std::optional<size_t> vd_layer;

    size_t dense_count() const { return layer_sizes.empty() ? 0 : layer_sizes.size() - 1; }

    // Shape of the noisy layer's weight matrix (in x out).
    std::pair<size_t, size_t> vd_shape() const {
        size_t l = *vd_layer;
        return {layer_sizes[l], layer_sizes[l + 1]};
    }

    size_t vd_weight_count() const {
        auto [r, c] = vd_shape();
        return r * c;
    }

    void validate() const;
};

struct DenseParams {
    Tensor w; // in x out
    Tensor b; // out
};

struct ModelParams {
    std::vector<DenseParams> layers;
};

// Gradients with the same layout as the parameters they differentiate.
struct GradBundle {
    std::vector<DenseParams> layers;
};

GradBundle zeros_like(const ModelParams& p);

// Per-weight noise request for the VD layer: log_alpha matches the layer's
// weight shape, seed fixes the sampled epsilon. A fixed_noise tensor, when
// given, is used verbatim instead of sampling.
struct VdForward {
    const Tensor* log_alpha;
    uint64_t noise_seed;
    const Tensor* fixed_noise = nullptr;
};

struct ForwardCache {
    std::vector<Tensor> activations; // input, post-activation per hidden layer, logits
    Tensor vd_noise;                 // epsilon for the VD layer (empty when unused)
    Tensor vd_sqrt_alpha;            // sqrt(alpha) per VD weight
    Tensor vd_weight;                // effective weight used for the VD layer
    std::vector<size_t> layer_sizes; // fingerprint for stale-cache detection
    size_t batch = 0;
};

// Forward pass. Returns logits (batch x output) and a cache for backward.
std::pair<Tensor, ForwardCache> forward(const MlpSpec& spec, const ModelParams& params, const Tensor& input,
                                        const std::optional<VdForward>& vd = std::nullopt);

struct BackwardResult {
    GradBundle params;
    Tensor log_alpha; // gradient of the noise path; empty when no VD layer was active
    Tensor input;     // gradient with respect to the network input
};

BackwardResult backward(const MlpSpec& spec, const ModelParams& params, const ForwardCache& cache,
                        const Tensor& loss_cotangent);

struct XentResult {
    double mean_loss;
    Tensor logit_cotangent; // (softmax - onehot) / batch
};

XentResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

ModelParams sgd_step(const ModelParams& params, const GradBundle& grads, double lr);
Tensor sgd_step(const Tensor& param, const Tensor& grad, double lr);

// He-uniform weights, zero biases.
ModelParams init_mlp(const MlpSpec& spec, Rng& rng);

// Standard-normal tensor of the given shape from a fixed seed.
Tensor sample_normal(std::vector<size_t> shape, uint64_t seed);

} // namespace metavd

#endif
