#include "metavd/nn.hpp"

#include <cmath>
#include <string>

namespace metavd {

namespace {

double act_forward(double z, Activation a, double slope) {
    switch (a) {
    case Activation::leaky_relu: return z >= 0.0 ? z : slope * z;
    case Activation::relu: return z >= 0.0 ? z : 0.0;
    case Activation::identity: return z;
    }
    return z;
}

// Derivative recovered from the post-activation value; valid because both
// relu variants preserve sign.
double act_backward(double post, Activation a, double slope) {
    switch (a) {
    case Activation::leaky_relu: return post >= 0.0 ? 1.0 : slope;
    case Activation::relu: return post > 0.0 ? 1.0 : 0.0;
    case Activation::identity: return 1.0;
    }
    return 1.0;
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) throw KernelError(what + ": non-finite values");
}

// out = x (batch x in) * w (in x out) + b
Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    size_t batch = x.rows(), in = x.cols(), out = w.cols();
    Tensor y = Tensor::zeros({batch, out});
    for (size_t i = 0; i < batch; ++i) {
        const double* xi = &x.v[i * in];
        double* yi = &y.v[i * out];
        for (size_t j = 0; j < out; ++j) yi[j] = b.v[j];
        for (size_t k = 0; k < in; ++k) {
            double xv = xi[k];
            if (xv == 0.0) continue;
            const double* wk = &w.v[k * out];
            for (size_t j = 0; j < out; ++j) yi[j] += xv * wk[j];
        }
    }
    return y;
}

} // namespace

void MlpSpec::validate() const {
    if (layer_sizes.size() < 2) throw KernelError("MlpSpec: need at least input and output sizes");
    for (size_t s : layer_sizes) {
        if (s == 0) throw KernelError("MlpSpec: zero layer size");
    }
    if (vd_layer) {
        if (dense_count() < 2) throw KernelError("MlpSpec: vd layer requires at least two dense layers");
        if (*vd_layer != dense_count() - 2) {
            throw KernelError("MlpSpec: vd layer must be the dense layer feeding the pre-logit activation");
        }
    }
}

GradBundle zeros_like(const ModelParams& p) {
    GradBundle g;
    g.layers.reserve(p.layers.size());
    for (const auto& l : p.layers) {
        g.layers.push_back({Tensor::zeros(l.w.shape), Tensor::zeros(l.b.shape)});
    }
    return g;
}

Tensor sample_normal(std::vector<size_t> shape, uint64_t seed) {
    Tensor t = Tensor::zeros(std::move(shape));
    Rng rng(seed);
    for (double& x : t.v) x = rng.normal();
    return t;
}

std::pair<Tensor, ForwardCache> forward(const MlpSpec& spec, const ModelParams& params, const Tensor& input,
                                        const std::optional<VdForward>& vd) {
    spec.validate();
    if (params.layers.size() != spec.dense_count()) throw KernelError("forward: parameter/spec layer count mismatch");
    if (input.shape.size() != 2 || input.cols() != spec.layer_sizes[0]) {
        throw KernelError("forward: input shape " + shape_str(input) + " does not match input size " +
                          std::to_string(spec.layer_sizes[0]));
    }
    if (vd && !spec.vd_layer) throw KernelError("forward: noise requested but spec has no VD layer");
    require_finite(input, "forward input");

    ForwardCache cache;
    cache.layer_sizes = spec.layer_sizes;
    cache.batch = input.rows();
    cache.activations.reserve(spec.dense_count() + 1);
    cache.activations.push_back(input);

    Tensor x = input;
    for (size_t l = 0; l < spec.dense_count(); ++l) {
        const DenseParams& layer = params.layers[l];
        if (layer.w.rows() != spec.layer_sizes[l] || layer.w.cols() != spec.layer_sizes[l + 1]) {
            throw KernelError("forward: layer " + std::to_string(l) + " weight shape " + shape_str(layer.w) +
                              " does not match spec");
        }
        require_finite(layer.w, "forward: layer " + std::to_string(l) + " weights");
        require_finite(layer.b, "forward: layer " + std::to_string(l) + " bias");

        const Tensor* w = &layer.w;
        Tensor w_eff;
        if (vd && *spec.vd_layer == l) {
            const Tensor& la = *vd->log_alpha;
            require_same_shape(la, layer.w, "forward vd log_alpha");
            if (vd->fixed_noise) {
                require_same_shape(*vd->fixed_noise, layer.w, "forward vd fixed noise");
                cache.vd_noise = *vd->fixed_noise;
            } else {
                cache.vd_noise = sample_normal(layer.w.shape, vd->noise_seed);
            }
            cache.vd_sqrt_alpha = Tensor::zeros(layer.w.shape);
            w_eff = Tensor::zeros(layer.w.shape);
            for (size_t k = 0; k < w_eff.v.size(); ++k) {
                double theta = layer.w.v[k];
                double sa = std::exp(0.5 * la.v[k]);
                cache.vd_sqrt_alpha.v[k] = sa;
                w_eff.v[k] = theta + sa * theta * cache.vd_noise.v[k];
            }
            cache.vd_weight = w_eff;
            w = &cache.vd_weight;
        }

        Tensor z = dense_forward(x, *w, layer.b);
        if (l + 1 < spec.dense_count()) {
            for (double& val : z.v) val = act_forward(val, spec.activation, spec.leaky_slope);
        }
        cache.activations.push_back(z);
        x = std::move(z);
    }

    Tensor logits = cache.activations.back();
    require_finite(logits, "forward logits");
    return {std::move(logits), std::move(cache)};
}

BackwardResult backward(const MlpSpec& spec, const ModelParams& params, const ForwardCache& cache,
                        const Tensor& loss_cotangent) {
    spec.validate();
    if (cache.layer_sizes != spec.layer_sizes || cache.activations.size() != spec.dense_count() + 1 ||
        cache.batch != cache.activations[0].rows()) {
        throw KernelError("backward: cache does not match spec (stale or mismatched)");
    }
    if (loss_cotangent.rows() != cache.batch || loss_cotangent.cols() != spec.layer_sizes.back()) {
        throw KernelError("backward: cotangent shape " + shape_str(loss_cotangent) + " mismatch");
    }
    bool vd_active = !cache.vd_noise.empty();
    if (vd_active && !spec.vd_layer) throw KernelError("backward: cache carries noise but spec has no VD layer");

    BackwardResult out;
    out.params = zeros_like(params);

    Tensor dz = loss_cotangent; // gradient flowing into layer l's output
    for (size_t l = spec.dense_count(); l-- > 0;) {
        const Tensor& x = cache.activations[l];
        size_t in = x.cols(), outw = dz.cols(), batch = x.rows();
        bool noisy = vd_active && *spec.vd_layer == l;
        const Tensor& w_used = noisy ? cache.vd_weight : params.layers[l].w;

        // Activation derivative (output layer is linear).
        if (l + 1 < spec.dense_count()) {
            const Tensor& post = cache.activations[l + 1];
            for (size_t i = 0; i < dz.v.size(); ++i) {
                dz.v[i] *= act_backward(post.v[i], spec.activation, spec.leaky_slope);
            }
        }

        DenseParams& g = out.params.layers[l];
        // dW = x^T dz, db = colsum(dz)
        for (size_t i = 0; i < batch; ++i) {
            const double* xi = &x.v[i * in];
            const double* di = &dz.v[i * outw];
            for (size_t j = 0; j < outw; ++j) g.b.v[j] += di[j];
            for (size_t k = 0; k < in; ++k) {
                double xv = xi[k];
                if (xv == 0.0) continue;
                double* gk = &g.w.v[k * outw];
                for (size_t j = 0; j < outw; ++j) gk[j] += xv * di[j];
            }
        }

        // dx = dz W^T (using the effective weight when the layer was noisy)
        Tensor dx = Tensor::zeros({batch, in});
        for (size_t i = 0; i < batch; ++i) {
            const double* di = &dz.v[i * outw];
            double* dxi = &dx.v[i * in];
            for (size_t k = 0; k < in; ++k) {
                const double* wk = &w_used.v[k * outw];
                double acc = 0.0;
                for (size_t j = 0; j < outw; ++j) acc += di[j] * wk[j];
                dxi[k] = acc;
            }
        }

        if (noisy) {
            // The weight gradient above is with respect to the effective
            // weight w = theta + sqrt(alpha) theta eps; route it to theta and
            // to log alpha through the reparameterization.
            const Tensor& theta = params.layers[l].w;
            out.log_alpha = Tensor::zeros(theta.shape);
            for (size_t k = 0; k < theta.v.size(); ++k) {
                double gw = g.w.v[k];
                double eps = cache.vd_noise.v[k];
                double sa = cache.vd_sqrt_alpha.v[k];
                g.w.v[k] = gw * (1.0 + sa * eps);
                out.log_alpha.v[k] = gw * 0.5 * sa * theta.v[k] * eps;
            }
        }

        dz = std::move(dx);
    }

    out.input = std::move(dz);
    return out;
}

XentResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    size_t batch = logits.rows(), classes = logits.cols();
    if (labels.size() != batch) throw KernelError("softmax_cross_entropy: label count mismatch");
    XentResult res;
    res.logit_cotangent = Tensor::zeros(logits.shape);
    double total = 0.0;
    for (size_t i = 0; i < batch; ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<size_t>(y) >= classes) {
            throw KernelError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
        }
        const double* zi = &logits.v[i * classes];
        double zmax = zi[0];
        for (size_t j = 1; j < classes; ++j) zmax = std::max(zmax, zi[j]);
        double sum = 0.0;
        for (size_t j = 0; j < classes; ++j) sum += std::exp(zi[j] - zmax);
        double lse = zmax + std::log(sum);
        total += lse - zi[y];
        double* ci = &res.logit_cotangent.v[i * classes];
        for (size_t j = 0; j < classes; ++j) {
            double p = std::exp(zi[j] - lse);
            ci[j] = (p - (static_cast<size_t>(y) == j ? 1.0 : 0.0)) / static_cast<double>(batch);
        }
    }
    res.mean_loss = total / static_cast<double>(batch);
    return res;
}

ModelParams sgd_step(const ModelParams& params, const GradBundle& grads, double lr) {
    if (params.layers.size() != grads.layers.size()) throw KernelError("sgd_step: layer count mismatch");
    ModelParams next = params;
    for (size_t l = 0; l < next.layers.size(); ++l) {
        require_same_shape(next.layers[l].w, grads.layers[l].w, "sgd_step w");
        require_same_shape(next.layers[l].b, grads.layers[l].b, "sgd_step b");
        axpy(next.layers[l].w, -lr, grads.layers[l].w);
        axpy(next.layers[l].b, -lr, grads.layers[l].b);
    }
    return next;
}

Tensor sgd_step(const Tensor& param, const Tensor& grad, double lr) {
    Tensor next = param;
    axpy(next, -lr, grad);
    return next;
}

ModelParams init_mlp(const MlpSpec& spec, Rng& rng) {
    spec.validate();
    ModelParams p;
    p.layers.reserve(spec.dense_count());
    for (size_t l = 0; l < spec.dense_count(); ++l) {
        size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
        DenseParams layer{Tensor::zeros({in, out}), Tensor::zeros({out})};
        double limit = std::sqrt(6.0 / static_cast<double>(in));
        for (double& w : layer.w.v) w = rng.uniform(-limit, limit);
        p.layers.push_back(std::move(layer));
    }
    return p;
}

} // namespace metavd
