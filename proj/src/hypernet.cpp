#include "metavd/hypernet.hpp"

#include <cmath>
#include <string>

namespace metavd {

namespace {

Tensor embedding_row(const HypernetState& state, size_t client_id) {
    if (client_id >= state.num_clients()) {
        throw KernelError("hypernet: unknown client id " + std::to_string(client_id));
    }
    Tensor row = Tensor::zeros({1, state.embedding_dim()});
    for (size_t j = 0; j < state.embedding_dim(); ++j) row.v[j] = state.embeddings(client_id, j);
    return row;
}

DropoutVector to_dropout_vector(const HypernetState& state, Tensor raw) {
    DropoutVector dv;
    dv.log_alpha = std::move(raw);
    dv.log_alpha.shape = {state.vd_rows, state.vd_cols};
    clamp(dv);
    return dv;
}

} // namespace

size_t embedding_dim_for(size_t num_clients) {
    return static_cast<size_t>(std::ceil(1.0 + static_cast<double>(num_clients) / 4.0));
}

HypernetState init_hypernet(size_t num_clients, std::pair<size_t, size_t> vd_shape, Rng& rng) {
    if (num_clients == 0) throw KernelError("init_hypernet: need at least one client");
    size_t k = vd_shape.first * vd_shape.second;
    if (k == 0) throw KernelError("init_hypernet: empty VD layer");

    HypernetState state;
    state.vd_rows = vd_shape.first;
    state.vd_cols = vd_shape.second;
    size_t dim = embedding_dim_for(num_clients);
    state.net.layer_sizes = {dim, kHypernetHidden, kHypernetHidden, k};
    state.net.activation = Activation::leaky_relu;
    state.net.leaky_slope = 0.01;

    state.psi = init_mlp(state.net, rng);
    // Zeroing the final layer pins every prediction at the bias, so all
    // clients start from the same near-deterministic dropout.
    DenseParams& last = state.psi.layers.back();
    for (double& w : last.w.v) w = 0.0;
    for (double& b : last.b.v) b = -4.0;

    state.embeddings = Tensor::zeros({num_clients, dim});
    for (double& e : state.embeddings.v) e = 0.1 * rng.normal();
    return state;
}

Tensor hypernet_raw_output(const HypernetState& state, const Tensor& embedding_row) {
    auto [out, cache] = forward(state.net, state.psi, embedding_row);
    return out;
}

DropoutVector predict_log_alpha(const HypernetState& state, size_t client_id) {
    Tensor row = embedding_row(state, client_id);
    return to_dropout_vector(state, hypernet_raw_output(state, row));
}

DropoutVector predict_log_alpha_mean(const HypernetState& state, const std::vector<size_t>& clients) {
    if (clients.empty()) throw KernelError("predict_log_alpha_mean: empty client list");
    Tensor mean = Tensor::zeros({1, state.embedding_dim()});
    for (size_t id : clients) {
        if (id >= state.num_clients()) throw KernelError("predict_log_alpha_mean: unknown client");
        for (size_t j = 0; j < state.embedding_dim(); ++j) mean.v[j] += state.embeddings(id, j);
    }
    for (double& x : mean.v) x /= static_cast<double>(clients.size());
    return to_dropout_vector(state, hypernet_raw_output(state, mean));
}

void update_psi(HypernetState& state, const std::vector<HypernetContribution>& contributions, double eta,
                double step_cap) {
    if (contributions.empty()) return;
    GradBundle acc = zeros_like(state.psi);
    for (const auto& c : contributions) {
        if (c.delta_log_alpha.size() != state.output_dim()) {
            throw KernelError("update_psi: delta shape mismatch");
        }
        Tensor row = embedding_row(state, c.client_id);
        auto [out, cache] = forward(state.net, state.psi, row);
        Tensor cot = c.delta_log_alpha;
        cot.shape = {1, state.output_dim()};
        auto back = backward(state.net, state.psi, cache, cot);
        for (size_t l = 0; l < acc.layers.size(); ++l) {
            axpy(acc.layers[l].w, c.weight, back.params.layers[l].w);
            axpy(acc.layers[l].b, c.weight, back.params.layers[l].b);
        }
    }
    double scale = eta / static_cast<double>(contributions.size());
    // Global-norm cap on the applied step. The ascent direction is kept
    // exactly; only runaway magnitudes are scaled back.
    double sq = 0.0;
    for (const auto& l : acc.layers) {
        for (double g : l.w.v) sq += scale * g * scale * g;
        for (double g : l.b.v) sq += scale * g * scale * g;
    }
    double norm = std::sqrt(sq);
    if (norm > step_cap) scale *= step_cap / norm;
    for (size_t l = 0; l < state.psi.layers.size(); ++l) {
        axpy(state.psi.layers[l].w, scale, acc.layers[l].w);
        axpy(state.psi.layers[l].b, scale, acc.layers[l].b);
    }
}

void update_embedding(HypernetState& state, size_t client_id, const Tensor& delta_log_alpha, double eta,
                      double step_cap) {
    if (delta_log_alpha.size() != state.output_dim()) {
        throw KernelError("update_embedding: delta shape mismatch");
    }
    Tensor row = embedding_row(state, client_id);
    auto [out, cache] = forward(state.net, state.psi, row);
    Tensor cot = delta_log_alpha;
    cot.shape = {1, state.output_dim()};
    auto back = backward(state.net, state.psi, cache, cot);
    double sq = 0.0;
    for (size_t j = 0; j < state.embedding_dim(); ++j) {
        double step = eta * back.input.v[j];
        sq += step * step;
    }
    double scale = eta;
    double norm = std::sqrt(sq);
    if (norm > step_cap) scale *= step_cap / norm;
    for (size_t j = 0; j < state.embedding_dim(); ++j) {
        state.embeddings(client_id, j) += scale * back.input.v[j];
    }
}

} // namespace metavd
