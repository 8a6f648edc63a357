#ifndef METAVD_HYPERNET_HPP
#define METAVD_HYPERNET_HPP

#include <cstdint>
#include <utility>
#include <vector>

#include "metavd/nn.hpp"
#include "metavd/rng.hpp"
#include "metavd/vd.hpp"

namespace metavd {

constexpr size_t kHypernetHidden = 200;

// Largest parameter-space step a single ascent call may apply; larger steps
// are scaled down to this norm with their direction intact.
constexpr double kHypernetStepCap = 0.02;

// Server-side hypernetwork: a 3-dense-layer MLP from a learned per-client
// embedding to one dropout logit per VD-layer weight, plus the embedding
// table itself. The raw output of the final layer is the log dropout
// variable; predictions clamp it into the working range.
struct HypernetState {
    MlpSpec net;        // embedding_dim -> 200 -> 200 -> K
    ModelParams psi;
    Tensor embeddings;  // num_clients x embedding_dim
    size_t vd_rows = 0; // shape of the VD layer the output maps onto
    size_t vd_cols = 0;

    size_t num_clients() const { return embeddings.rows(); }
    size_t embedding_dim() const { return embeddings.cols(); }
    size_t output_dim() const { return vd_rows * vd_cols; }
};

// ceil(1 + n/4)
size_t embedding_dim_for(size_t num_clients);

// Hidden layers He-uniform, final layer zero with bias -4, embeddings drawn
// from N(0, 0.1^2): every client starts at log alpha = -4 until evidence
// accumulates.
HypernetState init_hypernet(size_t num_clients, std::pair<size_t, size_t> vd_shape, Rng& rng);

// Unclamped network output for an arbitrary embedding row (1 x embedding_dim).
Tensor hypernet_raw_output(const HypernetState& state, const Tensor& embedding_row);

DropoutVector predict_log_alpha(const HypernetState& state, size_t client_id);

// Prediction from the mean embedding over the given clients; used for clients
// without a trained embedding of their own.
DropoutVector predict_log_alpha_mean(const HypernetState& state, const std::vector<size_t>& clients);

struct HypernetContribution {
    size_t client_id;
    Tensor delta_log_alpha; // K entries, log-alpha space
    double weight;          // g^m
};

// psi += eta * (1/M) * sum_m g_m * (d h / d psi)^T delta_alpha_m.
void update_psi(HypernetState& state, const std::vector<HypernetContribution>& contributions, double eta,
                double step_cap = kHypernetStepCap);

// e_m += eta * gradient of <h(e_m), delta_alpha> with respect to e_m.
void update_embedding(HypernetState& state, size_t client_id, const Tensor& delta_log_alpha, double eta,
                      double step_cap = kHypernetStepCap);

} // namespace metavd

#endif
