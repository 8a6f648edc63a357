#include "metavd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "metavd/hypernet.hpp"
#include "metavd/nn.hpp"
#include "metavd/vd.hpp"

namespace metavd {

double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                          size_t i, double h) {
    double orig = x[i];
    x[i] = orig + h;
    double fp = f(x);
    x[i] = orig - h;
    double fm = f(x);
    return (fp - fm) / (2.0 * h);
}

double grad_rel_error(double analytic, double numeric, double floor_value) {
    double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor_value});
    return std::fabs(analytic - numeric) / denom;
}

namespace {

// Flatten (theta, log_alpha) into one coordinate vector for FD probing.
struct FlatElbo {
    MlpSpec spec;
    Batch batch;
    ElboConfig cfg;
    size_t theta_count = 0;

    std::pair<ModelParams, DropoutVector> unflatten(const std::vector<double>& x) const {
        ModelParams p;
        size_t pos = 0;
        for (size_t l = 0; l < spec.dense_count(); ++l) {
            size_t in = spec.layer_sizes[l], out = spec.layer_sizes[l + 1];
            DenseParams layer{Tensor::zeros({in, out}), Tensor::zeros({out})};
            for (double& w : layer.w.v) w = x[pos++];
            for (double& b : layer.b.v) b = x[pos++];
            p.layers.push_back(std::move(layer));
        }
        DropoutVector dv;
        if (spec.vd_layer) {
            auto [r, c] = spec.vd_shape();
            dv.log_alpha = Tensor::zeros({r, c});
            for (double& la : dv.log_alpha.v) la = x[pos++];
        }
        return {std::move(p), std::move(dv)};
    }

    double loss(const std::vector<double>& x) const {
        auto [p, dv] = unflatten(x);
        return elbo_loss_and_grads(spec, p, dv, batch, cfg).loss;
    }
};

// A random configuration is rejected if any hidden activation sits too close
// to the LeakyReLU kink; finite differences are meaningless across it.
bool near_activation_kink(const MlpSpec& spec, const ModelParams& p, const DropoutVector& dv,
                          const ElboConfig& cfg, const Tensor& x, double margin) {
    std::optional<VdForward> vd;
    if (spec.vd_layer) vd = VdForward{&dv.log_alpha, cfg.noise_seed};
    auto [logits, cache] = forward(spec, p, x, vd);
    for (size_t l = 1; l + 1 < cache.activations.size(); ++l) {
        for (double a : cache.activations[l].v) {
            if (std::fabs(a) < margin) return true;
        }
    }
    return false;
}

} // namespace

GradCheckResult check_elbo_gradients(uint64_t seed, size_t configs, double tolerance) {
    GradCheckResult res{"elbo_gradients", 0.0, 0, tolerance, false};
    Rng rng(seed);
    const double h = 1e-5;
    const double floor_value = 1e-3;

    size_t accepted = 0;
    while (accepted < configs) {
        MlpSpec spec;
        size_t in = 2 + rng.index(3), hidden = 2 + rng.index(3), out = 2 + rng.index(3);
        spec.layer_sizes = {in, hidden, out};
        if (rng.index(2)) spec.layer_sizes = {in, hidden, 2 + rng.index(2), out};
        spec.activation = Activation::leaky_relu;
        spec.leaky_slope = 0.01;
        spec.vd_layer = spec.dense_count() - 2;

        ModelParams params;
        for (size_t l = 0; l < spec.dense_count(); ++l) {
            size_t li = spec.layer_sizes[l], lo = spec.layer_sizes[l + 1];
            DenseParams layer{Tensor::zeros({li, lo}), Tensor::zeros({lo})};
            for (double& w : layer.w.v) w = rng.uniform(-1.0, 1.0);
            for (double& b : layer.b.v) b = rng.uniform(-0.3, 0.3);
            params.layers.push_back(std::move(layer));
        }
        DropoutVector dv;
        auto [vr, vc] = spec.vd_shape();
        dv.log_alpha = Tensor::zeros({vr, vc});
        for (double& la : dv.log_alpha.v) la = rng.uniform(-2.0, 2.0);

        size_t batch = 2 + rng.index(4);
        Batch data;
        data.x = Tensor::zeros({batch, in});
        for (double& x : data.x.v) x = rng.uniform(-1.5, 1.5);
        data.y.resize(batch);
        for (int& y : data.y) y = static_cast<int>(rng.index(out));

        ElboConfig cfg;
        cfg.beta = rng.uniform(0.0, 6.0);
        cfg.noise_seed = rng.next_u64();
        cfg.dataset_size = 10 + rng.index(50);
        cfg.kl_over_dataset = true;

        if (near_activation_kink(spec, params, dv, cfg, data.x, 1e-3)) continue;
        ++accepted;

        ElboResult analytic = elbo_loss_and_grads(spec, params, dv, data, cfg);

        FlatElbo flat{spec, data, cfg, 0};
        std::vector<double> x0;
        for (const auto& l : params.layers) {
            x0.insert(x0.end(), l.w.v.begin(), l.w.v.end());
            x0.insert(x0.end(), l.b.v.begin(), l.b.v.end());
        }
        flat.theta_count = x0.size();
        x0.insert(x0.end(), dv.log_alpha.v.begin(), dv.log_alpha.v.end());

        std::vector<double> analytic_flat;
        for (const auto& l : analytic.grads_theta.layers) {
            analytic_flat.insert(analytic_flat.end(), l.w.v.begin(), l.w.v.end());
            analytic_flat.insert(analytic_flat.end(), l.b.v.begin(), l.b.v.end());
        }
        analytic_flat.insert(analytic_flat.end(), analytic.grads_log_alpha.v.begin(),
                             analytic.grads_log_alpha.v.end());

        auto loss = [&flat](const std::vector<double>& x) { return flat.loss(x); };
        for (size_t i = 0; i < x0.size(); ++i) {
            double numeric = central_difference(loss, x0, i, h);
            double err = grad_rel_error(analytic_flat[i], numeric, floor_value);
            res.max_rel_err = std::max(res.max_rel_err, err);
            ++res.coords_checked;
        }
    }
    res.pass = res.max_rel_err < tolerance;
    return res;
}

GradCheckResult check_kl_gradient(uint64_t seed, size_t points, double tolerance) {
    GradCheckResult res{"kl_gradient", 0.0, 0, tolerance, false};
    Rng rng(seed);
    const double h = 3e-5;
    for (size_t i = 0; i < points; ++i) {
        DropoutVector dv;
        dv.log_alpha = Tensor::zeros({1, 1});
        dv.log_alpha.v[0] = rng.uniform(-6.0, 6.0);
        double analytic = kl_gradient(dv).v[0];
        auto f = [](const std::vector<double>& x) {
            DropoutVector d;
            d.log_alpha = Tensor::zeros({1, 1});
            d.log_alpha.v[0] = x[0];
            return kl_term(d);
        };
        double numeric = central_difference(f, {dv.log_alpha.v[0]}, 0, h);
        double err = std::fabs(analytic - numeric) / std::fabs(analytic);
        res.max_rel_err = std::max(res.max_rel_err, err);
        ++res.coords_checked;
    }
    res.pass = res.max_rel_err < tolerance;
    return res;
}

GradCheckResult check_hypernet_updates(uint64_t seed, double tolerance) {
    GradCheckResult res{"hypernet_updates", 0.0, 0, tolerance, false};
    Rng rng(seed);
    const double h = 1e-5;
    const double floor_value = 1e-3;

    size_t num_clients = 8;
    std::pair<size_t, size_t> vd_shape{3, 4};
    size_t client = 2;
    HypernetState state = init_hypernet(num_clients, vd_shape, rng);
    for (int attempt = 0;; ++attempt) {
        if (attempt > 64) throw KernelError("check_hypernet_updates: could not sample a kink-free state");
        // Randomize away from the zero final layer so all paths carry gradient.
        for (auto& layer : state.psi.layers) {
            for (double& w : layer.w.v) w = rng.uniform(-0.2, 0.2);
            for (double& b : layer.b.v) b = rng.uniform(-0.2, 0.2);
        }
        for (double& e : state.embeddings.v) e = rng.uniform(-0.5, 0.5);
        // Probing a coordinate shifts hidden pre-activations by O(h); a unit
        // sitting on the LeakyReLU kink would corrupt the finite difference.
        Tensor row = Tensor::zeros({1, state.embedding_dim()});
        for (size_t j = 0; j < state.embedding_dim(); ++j) row.v[j] = state.embeddings(client, j);
        auto [out, cache] = forward(state.net, state.psi, row);
        bool clean = true;
        for (size_t l = 1; l + 1 < cache.activations.size() && clean; ++l) {
            for (double post : cache.activations[l].v) {
                double pre = post >= 0.0 ? post : post / state.net.leaky_slope;
                if (std::fabs(pre) < 1e-4) {
                    clean = false;
                    break;
                }
            }
        }
        if (clean) break;
    }

    Tensor delta = Tensor::zeros({state.output_dim()});
    for (double& d : delta.v) d = rng.uniform(-1.0, 1.0);

    // The scalar both updates ascend: S = <h_psi(e_client), delta>.
    auto scalar_of = [&](const HypernetState& s) {
        Tensor row = Tensor::zeros({1, s.embedding_dim()});
        for (size_t j = 0; j < s.embedding_dim(); ++j) row.v[j] = s.embeddings(client, j);
        Tensor out = hypernet_raw_output(s, row);
        double acc = 0.0;
        for (size_t k = 0; k < out.v.size(); ++k) acc += out.v[k] * delta.v[k];
        return acc;
    };

    // update_psi with one unit-weight contribution and eta=1 leaves exactly
    // the gradient of S in the parameter delta.
    HypernetState stepped = state;
    update_psi(stepped, {{client, delta, 1.0}}, 1.0, std::numeric_limits<double>::infinity());
    HypernetState probe = state; // mutated in place coordinate by coordinate
    auto probe_coord = [&](double& coord, double analytic) {
        double orig = coord;
        coord = orig + h;
        double fp = scalar_of(probe);
        coord = orig - h;
        double fm = scalar_of(probe);
        coord = orig;
        double numeric = (fp - fm) / (2.0 * h);
        double err = grad_rel_error(analytic, numeric, floor_value);
        res.max_rel_err = std::max(res.max_rel_err, err);
        ++res.coords_checked;
    };
    for (size_t l = 0; l < state.psi.layers.size(); ++l) {
        for (size_t k = 0; k < state.psi.layers[l].w.v.size(); ++k) {
            probe_coord(probe.psi.layers[l].w.v[k],
                        stepped.psi.layers[l].w.v[k] - state.psi.layers[l].w.v[k]);
        }
        for (size_t k = 0; k < state.psi.layers[l].b.v.size(); ++k) {
            probe_coord(probe.psi.layers[l].b.v[k],
                        stepped.psi.layers[l].b.v[k] - state.psi.layers[l].b.v[k]);
        }
    }

    // update_embedding with eta=1: the embedding row moves by grad_e S.
    HypernetState estepped = state;
    update_embedding(estepped, client, delta, 1.0, std::numeric_limits<double>::infinity());
    for (size_t j = 0; j < state.embedding_dim(); ++j) {
        probe_coord(probe.embeddings.v[client * state.embedding_dim() + j],
                    estepped.embeddings(client, j) - state.embeddings(client, j));
    }

    res.pass = res.max_rel_err < tolerance;
    return res;
}

std::vector<GradCheckResult> run_all_gradchecks(uint64_t seed) {
    std::vector<GradCheckResult> out;
    out.push_back(check_elbo_gradients(derive_seed(seed, 1), 100, 1e-5));
    out.push_back(check_kl_gradient(derive_seed(seed, 2), 100, 1e-8));
    out.push_back(check_hypernet_updates(derive_seed(seed, 3), 1e-6));
    return out;
}

} // namespace metavd
