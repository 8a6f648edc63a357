#ifndef METAVD_ENGINE_HPP
#define METAVD_ENGINE_HPP

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "metavd/data.hpp"
#include "metavd/hypernet.hpp"
#include "metavd/metrics.hpp"
#include "metavd/nn.hpp"
#include "metavd/vd.hpp"

namespace metavd {

struct EngineError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Method { fedavg, reptile, maml, perfedavg };
enum class VdMode { off, metavd, global_vd, ensemble_vd };
enum class AggregationScale { normalized, one_over_m };

struct AlgoConfig {
    Method method = Method::reptile;
    VdMode metavd = VdMode::metavd;
    size_t rounds = 200;          // R
    size_t clients_per_round = 0; // 0 means full participation
    size_t local_steps = 5;       // E
    size_t inner_steps = 1;       // I
    double eta = 1.0;             // server learning rate
    double hyper_lr = -1.0;       // psi/embedding ascent rate; negative means "use eta"
    double hyper_step_cap = 0.02; // norm cap per hypernetwork ascent step
    double gamma = 0.02;          // client learning rate
    double inner_lr = 0.05;       // l
    double beta = 5.0;            // KL weight
    double hf_delta = 1e-3;       // Hessian-free probe step
    size_t batch_size = 64;
    AggregationScale aggregation_scale = AggregationScale::normalized;
    bool kl_over_dataset = true;
    size_t threads = 1;

    void validate() const;
};

// Per-client data materialized from a dataset and a partition plan.
class ClientRegistry {
public:
    ClientRegistry(const Dataset& ds, const PartitionPlan& plan);

    size_t num_clients() const { return clients_.size(); }
    const Batch& train(size_t client) const { return clients_[client].train; }
    const Batch& test(size_t client) const { return clients_[client].test; }
    const std::vector<size_t>& pool() const { return pool_; } // non-OOD clients
    const std::vector<size_t>& ood() const { return ood_; }
    int num_classes() const { return num_classes_; }
    size_t input_dim() const { return input_dim_; }

private:
    struct ClientData {
        Batch train;
        Batch test;
    };
    std::vector<ClientData> clients_;
    std::vector<size_t> pool_;
    std::vector<size_t> ood_;
    int num_classes_ = 0;
    size_t input_dim_ = 0;
};

struct ServerState {
    MlpSpec spec;
    ModelParams theta;
    HypernetState hyper;               // engaged for VdMode::metavd
    DropoutVector global_dv;           // engaged for VdMode::global_vd
    std::vector<DropoutVector> ensemble; // engaged for VdMode::ensemble_vd
    size_t round = 0;
    uint64_t seed = 0;
};

ServerState init_server(const MlpSpec& spec, const AlgoConfig& cfg, size_t num_clients, uint64_t seed);

struct ClientUpdate {
    size_t client_id;
    ModelParams theta_star;
    DropoutVector log_alpha_star; // empty in VdMode::off
    size_t data_size;
};

// Uniform sample without replacement, returned in ascending id order.
std::vector<size_t> sample_clients(const std::vector<size_t>& pool, size_t count, Rng& rng);

// min(batch_size, n) examples drawn without replacement; the full data in
// original order when batch_size covers it.
Batch sample_batch(const Batch& data, size_t batch_size, uint64_t seed);

struct LocalResult {
    ModelParams theta;
    DropoutVector dv;
    double last_loss = 0.0;
};

// E steps of joint SGD on (theta, log alpha) over minibatches.
LocalResult local_adapt_reptile(const MlpSpec& spec, const ModelParams& theta, const DropoutVector& dv,
                                const Batch& data, const AlgoConfig& cfg, uint64_t seed);

// E local steps, each cloning the parameters, running I inner steps on a tr
// split and applying the first-order outer gradient from the val split.
LocalResult local_adapt_maml(const MlpSpec& spec, const ModelParams& theta, const DropoutVector& dv,
                             const Batch& data, const AlgoConfig& cfg, uint64_t seed);

// MAML with the Hessian-free correction on the theta path.
LocalResult local_adapt_perfedavg(const MlpSpec& spec, const ModelParams& theta, const DropoutVector& dv,
                                  const Batch& data, const AlgoConfig& cfg, uint64_t seed);

// g_val - (inner_lr / (2 delta)) * (g_plus - g_minus)
GradBundle hessian_free_outer_grad(const GradBundle& g_val, const GradBundle& g_plus, const GradBundle& g_minus,
                                   double inner_lr, double delta);

// Plain weighted mean over all layers, g^m proportional to data size.
ModelParams aggregate_fedavg(const std::vector<ClientUpdate>& updates);

// Precision-weighted mean on the VD layer weights, plain weighted mean
// elsewhere. In one_over_m mode the VD-layer result is additionally
// scaled by 1/M.
ModelParams aggregate_metavd(const std::vector<ClientUpdate>& updates, const MlpSpec& spec,
                             const ModelParams& prev_theta, const AlgoConfig& cfg);

struct RoundMetrics {
    size_t round = 0;
    std::vector<size_t> participants;
    double mean_local_loss = 0.0;
    double wall_ms = 0.0;
};

RoundMetrics server_round(ServerState& state, const AlgoConfig& cfg, const ClientRegistry& registry);

// One client's model personalized for evaluation: `steps` plain adaptation
// steps on its train split. Clients outside the trained pool get their
// dropout prediction from the mean pool embedding.
LocalResult personalize_for_eval(const ServerState& state, const AlgoConfig& cfg, const ClientRegistry& registry,
                                 size_t client, size_t steps, uint64_t seed);

struct EvalConfig {
    size_t bins = 10;
    size_t mc_samples = 0;       // 0: deterministic mean-weight evaluation
    size_t personalize_steps = 1;
    double mask_threshold = 0.8; // reported-sparsity threshold
};

// Personalized evaluation over participating (test) and held-out (OOD)
// clients. ECE/MCE and the reliability table are computed on the OOD records
// when OOD clients exist, otherwise on the test records.
EvalReport evaluate(const ServerState& state, const AlgoConfig& cfg, const ClientRegistry& registry,
                    const EvalConfig& eval_cfg);

// Representative dropout state of the current server: mean-embedding
// prediction for metavd, the shared vector for global_vd, the pool mean for
// ensemble_vd. Empty in VdMode::off.
DropoutVector server_dropout_summary(const ServerState& state, const AlgoConfig& cfg, const ClientRegistry& registry);

struct EvalRecord {
    size_t round = 0;
    EvalReport report;
    double wall_ms = 0.0; // training time spent since the previous record
};

struct TrainingHistory {
    std::vector<RoundMetrics> rounds;
    std::vector<EvalRecord> evals;
};

// Runs cfg.rounds server rounds, evaluating every eval_every rounds
// (0 disables periodic evaluation).
TrainingHistory run_training(ServerState& state, const AlgoConfig& cfg, const ClientRegistry& registry,
                             const EvalConfig& eval_cfg, size_t eval_every);

} // namespace metavd

#endif
