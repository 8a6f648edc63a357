#include "metavd/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <string>
#include <thread>

namespace metavd {

namespace {

// Stream tags keeping the derived seed spaces disjoint.
constexpr uint64_t kTagSampling = 0x5a;
constexpr uint64_t kTagLocal = 0x1c;
constexpr uint64_t kTagBatch = 0xb7;
constexpr uint64_t kTagNoise = 0x4e;
constexpr uint64_t kTagSplit = 0x53;
constexpr uint64_t kTagEval = 0xe1;

constexpr double kAggregationEps = 1e-8;

ElboConfig make_elbo_cfg(const AlgoConfig& cfg, size_t dataset_size, uint64_t noise_seed) {
    ElboConfig ec;
    ec.beta = cfg.beta;
    ec.noise_seed = noise_seed;
    ec.dataset_size = dataset_size;
    ec.kl_over_dataset = cfg.kl_over_dataset;
    return ec;
}

Batch take_rows(const Batch& data, const std::vector<size_t>& rows) {
    size_t dim = data.x.cols();
    Batch out;
    out.x = Tensor::zeros({rows.size(), dim});
    out.y.resize(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        const double* src = &data.x.v[rows[i] * dim];
        std::copy(src, src + dim, &out.x.v[i * dim]);
        out.y[i] = data.y[rows[i]];
    }
    return out;
}

void step_log_alpha(DropoutVector& dv, const Tensor& grad, double lr) {
    axpy(dv.log_alpha, -lr, grad);
    clamp(dv);
}

// tr/val halves, reshuffled per call.
std::pair<Batch, Batch> split_tr_val(const Batch& data, uint64_t seed) {
    size_t n = data.y.size();
    if (n < 2) throw EngineError("local adaptation: dataset too small to split");
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    size_t half = n / 2;
    std::vector<size_t> tr(idx.begin(), idx.begin() + half);
    std::vector<size_t> val(idx.begin() + half, idx.end());
    return {take_rows(data, tr), take_rows(data, val)};
}

double weight_total(const std::vector<ClientUpdate>& updates) {
    double total = 0.0;
    for (const auto& u : updates) total += static_cast<double>(u.data_size);
    if (total <= 0.0) throw EngineError("aggregation: zero total data size");
    return total;
}

} // namespace

void AlgoConfig::validate() const {
    if (local_steps < 1) throw EngineError("config: local_steps must be >= 1");
    if ((method == Method::maml || method == Method::perfedavg) && inner_steps < 1) {
        throw EngineError("config: inner_steps must be >= 1 for maml/perfedavg");
    }
    if (!(gamma > 0.0)) throw EngineError("config: client learning rate must be positive");
    if (!(eta >= 0.0)) throw EngineError("config: server learning rate must be >= 0");
    if (!(inner_lr >= 0.0)) throw EngineError("config: inner learning rate must be >= 0");
    if (!(beta >= 0.0)) throw EngineError("config: beta must be >= 0");
    if (!(hf_delta > 0.0)) throw EngineError("config: hf_delta must be positive");
    if (batch_size == 0) throw EngineError("config: batch_size must be positive");
    if (threads == 0) throw EngineError("config: threads must be positive");
}

ClientRegistry::ClientRegistry(const Dataset& ds, const PartitionPlan& plan) {
    num_classes_ = ds.num_classes;
    input_dim_ = ds.dim();
    clients_.resize(plan.num_clients());
    for (size_t m = 0; m < plan.num_clients(); ++m) {
        const std::vector<size_t>* train = &plan.assignments[m];
        const std::vector<size_t>* test = nullptr;
        if (!plan.splits.empty()) {
            train = &plan.splits[m].train;
            test = &plan.splits[m].test;
        }
        clients_[m].train = take_rows({ds.x, ds.y}, *train);
        if (test) clients_[m].test = take_rows({ds.x, ds.y}, *test);
        if (plan.is_ood(m)) {
            ood_.push_back(m);
        } else if (!clients_[m].train.y.empty()) {
            pool_.push_back(m);
        }
    }
}

ServerState init_server(const MlpSpec& spec, const AlgoConfig& cfg, size_t num_clients, uint64_t seed) {
    spec.validate();
    cfg.validate();
    if (cfg.metavd != VdMode::off && !spec.vd_layer) {
        throw EngineError("init_server: dropout mode requires a VD layer in the model spec");
    }
    ServerState state;
    state.spec = spec;
    state.seed = seed;
    Rng rng(derive_seed(seed, 0x7e, 0));
    state.theta = init_mlp(spec, rng);
    if (cfg.metavd == VdMode::metavd) {
        Rng hrng(derive_seed(seed, 0x7e, 1));
        state.hyper = init_hypernet(num_clients, spec.vd_shape(), hrng);
    } else if (cfg.metavd == VdMode::global_vd) {
        state.global_dv = make_dropout_vector({spec.vd_shape().first, spec.vd_shape().second}, -4.0);
    } else if (cfg.metavd == VdMode::ensemble_vd) {
        state.ensemble.assign(num_clients,
                              make_dropout_vector({spec.vd_shape().first, spec.vd_shape().second}, -4.0));
    }
    return state;
}

std::vector<size_t> sample_clients(const std::vector<size_t>& pool, size_t count, Rng& rng) {
    if (count > pool.size()) throw EngineError("sample_clients: count exceeds pool size");
    std::vector<size_t> ids = pool;
    for (size_t i = 0; i < count; ++i) {
        size_t j = i + rng.index(ids.size() - i);
        std::swap(ids[i], ids[j]);
    }
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    return ids;
}

Batch sample_batch(const Batch& data, size_t batch_size, uint64_t seed) {
    size_t n = data.y.size();
    if (n == 0) throw EngineError("sample_batch: empty dataset");
    if (batch_size >= n) return data;
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    for (size_t i = 0; i < batch_size; ++i) {
        size_t j = i + rng.index(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(batch_size);
    return take_rows(data, idx);
}

LocalResult local_adapt_reptile(const MlpSpec& spec, const ModelParams& theta, const DropoutVector& dv,
                                const Batch& data, const AlgoConfig& cfg, uint64_t seed) {
    if (data.y.empty()) throw EngineError("local_adapt_reptile: empty dataset");
    LocalResult res{theta, dv, 0.0};
    for (size_t e = 0; e < cfg.local_steps; ++e) {
        Batch batch = sample_batch(data, cfg.batch_size, derive_seed(seed, kTagBatch, e));
        ElboConfig ec = make_elbo_cfg(cfg, data.y.size(), derive_seed(seed, kTagNoise, e));
        ElboResult g = elbo_loss_and_grads(spec, res.theta, res.dv, batch, ec);
        res.theta = sgd_step(res.theta, g.grads_theta, cfg.gamma);
        if (!res.dv.empty()) step_log_alpha(res.dv, g.grads_log_alpha, cfg.gamma);
        res.last_loss = g.loss;
    }
    return res;
}

namespace {

// Shared body of the MAML-style adaptations; `hessian_free` switches the
// outer theta gradient to the probe-corrected form.
LocalResult adapt_bilevel(const MlpSpec& spec, const ModelParams& theta, const DropoutVector& dv, const Batch& data,
                          const AlgoConfig& cfg, uint64_t seed, bool hessian_free) {
    if (data.y.empty()) throw EngineError("local adaptation: empty dataset");
    LocalResult res{theta, dv, 0.0};
    for (size_t e = 0; e < cfg.local_steps; ++e) {
        auto [tr, val] = split_tr_val(data, derive_seed(seed, kTagSplit, e));
        ModelParams inner = res.theta;
        DropoutVector inner_dv = res.dv;
        for (size_t j = 0; j < cfg.inner_steps; ++j) {
            Batch batch = sample_batch(tr, cfg.batch_size, derive_seed(seed, kTagBatch, e, 2 * j));
            ElboConfig ec = make_elbo_cfg(cfg, data.y.size(), derive_seed(seed, kTagNoise, e, 2 * j));
            ElboResult g = elbo_loss_and_grads(spec, inner, inner_dv, batch, ec);
            inner = sgd_step(inner, g.grads_theta, cfg.inner_lr);
        }
        Batch vbatch = sample_batch(val, cfg.batch_size, derive_seed(seed, kTagBatch, e, 1));
        ElboConfig vec = make_elbo_cfg(cfg, data.y.size(), derive_seed(seed, kTagNoise, e, 1));
        ElboResult gv = elbo_loss_and_grads(spec, inner, inner_dv, vbatch, vec);

        GradBundle outer = gv.grads_theta;
        if (hessian_free) {
            // Probe the tr gradient around the adapted parameters along the
            // val-gradient direction.
            ModelParams plus = inner, minus = inner;
            for (size_t l = 0; l < plus.layers.size(); ++l) {
                axpy(plus.layers[l].w, cfg.hf_delta, gv.grads_theta.layers[l].w);
                axpy(plus.layers[l].b, cfg.hf_delta, gv.grads_theta.layers[l].b);
                axpy(minus.layers[l].w, -cfg.hf_delta, gv.grads_theta.layers[l].w);
                axpy(minus.layers[l].b, -cfg.hf_delta, gv.grads_theta.layers[l].b);
            }
            Batch pbatch = sample_batch(tr, cfg.batch_size, derive_seed(seed, kTagBatch, e, 3));
            uint64_t pnoise = derive_seed(seed, kTagNoise, e, 3);
            ElboConfig pec = make_elbo_cfg(cfg, data.y.size(), pnoise);
            ElboResult gp = elbo_loss_and_grads(spec, plus, inner_dv, pbatch, pec);
            ElboResult gm = elbo_loss_and_grads(spec, minus, inner_dv, pbatch, pec);
            outer = hessian_free_outer_grad(gv.grads_theta, gp.grads_theta, gm.grads_theta, cfg.inner_lr,
                                            cfg.hf_delta);
        }
        res.theta = sgd_step(res.theta, outer, cfg.gamma);
        if (!res.dv.empty()) step_log_alpha(res.dv, gv.grads_log_alpha, cfg.gamma);
        res.last_loss = gv.loss;
    }
    return res;
}

} // namespace

LocalResult local_adapt_maml(const MlpSpec& spec, const ModelParams& theta, const DropoutVector& dv,
                             const Batch& data, const AlgoConfig& cfg, uint64_t seed) {
    return adapt_bilevel(spec, theta, dv, data, cfg, seed, false);
}

LocalResult local_adapt_perfedavg(const MlpSpec& spec, const ModelParams& theta, const DropoutVector& dv,
                                  const Batch& data, const AlgoConfig& cfg, uint64_t seed) {
    return adapt_bilevel(spec, theta, dv, data, cfg, seed, true);
}

GradBundle hessian_free_outer_grad(const GradBundle& g_val, const GradBundle& g_plus, const GradBundle& g_minus,
                                   double inner_lr, double delta) {
    GradBundle out = g_val;
    double scale = inner_lr / (2.0 * delta);
    for (size_t l = 0; l < out.layers.size(); ++l) {
        for (size_t k = 0; k < out.layers[l].w.v.size(); ++k) {
            out.layers[l].w.v[k] -= scale * (g_plus.layers[l].w.v[k] - g_minus.layers[l].w.v[k]);
        }
        for (size_t k = 0; k < out.layers[l].b.v.size(); ++k) {
            out.layers[l].b.v[k] -= scale * (g_plus.layers[l].b.v[k] - g_minus.layers[l].b.v[k]);
        }
    }
    return out;
}

ModelParams aggregate_fedavg(const std::vector<ClientUpdate>& updates) {
    if (updates.empty()) throw EngineError("aggregate_fedavg: no updates");
    double total = weight_total(updates);
    ModelParams agg;
    agg.layers.reserve(updates[0].theta_star.layers.size());
    for (const auto& l : updates[0].theta_star.layers) {
        agg.layers.push_back({Tensor::zeros(l.w.shape), Tensor::zeros(l.b.shape)});
    }
    for (const auto& u : updates) {
        double g = static_cast<double>(u.data_size) / total;
        if (u.theta_star.layers.size() != agg.layers.size()) throw EngineError("aggregate_fedavg: layer mismatch");
        for (size_t l = 0; l < agg.layers.size(); ++l) {
            axpy(agg.layers[l].w, g, u.theta_star.layers[l].w);
            axpy(agg.layers[l].b, g, u.theta_star.layers[l].b);
        }
    }
    return agg;
}

ModelParams aggregate_metavd(const std::vector<ClientUpdate>& updates, const MlpSpec& spec,
                             const ModelParams& prev_theta, const AlgoConfig& cfg) {
    if (updates.empty()) throw EngineError("aggregate_metavd: no updates");
    if (!spec.vd_layer) throw EngineError("aggregate_metavd: spec has no VD layer");
    size_t vd = *spec.vd_layer;
    for (const auto& u : updates) {
        if (u.log_alpha_star.empty()) throw EngineError("aggregate_metavd: update without dropout state");
        if (u.theta_star.layers.size() != prev_theta.layers.size()) {
            throw EngineError("aggregate_metavd: layer mismatch");
        }
    }

    // Every layer except the VD weights is a plain weighted mean.
    ModelParams agg = aggregate_fedavg(updates);

    double total = weight_total(updates);
    Tensor& target = agg.layers[vd].w;
    size_t n = target.v.size();
    for (size_t k = 0; k < n; ++k) {
        double precision_sum = 0.0;
        double weighted = 0.0;
        for (const auto& u : updates) {
            double g = static_cast<double>(u.data_size) / total;
            double theta = u.theta_star.layers[vd].w.v[k];
            double alpha = std::exp(u.log_alpha_star.log_alpha.v[k]);
            double prec = g / (alpha * theta * theta + kAggregationEps);
            precision_sum += prec;
            weighted += prec * theta;
        }
        double value = weighted / precision_sum;
        if (cfg.aggregation_scale == AggregationScale::one_over_m) {
            value /= static_cast<double>(updates.size());
        }
        target.v[k] = value;
    }
    return agg;
}

namespace {

DropoutVector dropout_for_client(const ServerState& state, const AlgoConfig& cfg, size_t client) {
    switch (cfg.metavd) {
    case VdMode::off: return {};
    case VdMode::metavd: return predict_log_alpha(state.hyper, client);
    case VdMode::global_vd: return state.global_dv;
    case VdMode::ensemble_vd:
        if (client >= state.ensemble.size()) throw EngineError("ensemble dropout: unknown client");
        return state.ensemble[client];
    }
    return {};
}

LocalResult run_local(const MlpSpec& spec, const ModelParams& theta, const DropoutVector& dv, const Batch& data,
                      const AlgoConfig& cfg, uint64_t seed) {
    switch (cfg.method) {
    case Method::fedavg:
    case Method::reptile: return local_adapt_reptile(spec, theta, dv, data, cfg, seed);
    case Method::maml: return local_adapt_maml(spec, theta, dv, data, cfg, seed);
    case Method::perfedavg: return local_adapt_perfedavg(spec, theta, dv, data, cfg, seed);
    }
    throw EngineError("run_local: unknown method");
}

void server_apply(Tensor& param, const Tensor& agg, double eta) {
    if (eta == 1.0) {
        param = agg; // exact replacement, no floating-point round trip
        return;
    }
    for (size_t k = 0; k < param.v.size(); ++k) param.v[k] += eta * (agg.v[k] - param.v[k]);
}

} // namespace

RoundMetrics server_round(ServerState& state, const AlgoConfig& cfg, const ClientRegistry& registry) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();

    const std::vector<size_t>& pool = registry.pool();
    if (pool.empty()) throw EngineError("server_round: training pool is empty");
    size_t count = cfg.clients_per_round == 0 ? pool.size() : cfg.clients_per_round;
    Rng sampler(derive_seed(state.seed, kTagSampling, state.round));
    std::vector<size_t> participants = sample_clients(pool, count, sampler);

    struct Slot {
        ClientUpdate update;
        DropoutVector served;
        double loss = 0.0;
        std::exception_ptr error;
    };
    std::vector<Slot> slots(participants.size());

    auto work = [&](size_t i) {
        try {
            size_t m = participants[i];
            const Batch& data = registry.train(m);
            DropoutVector served = dropout_for_client(state, cfg, m);
            uint64_t seed = derive_seed(state.seed, kTagLocal, state.round, m);
            LocalResult r = run_local(state.spec, state.theta, served, data, cfg, seed);
            slots[i].update = ClientUpdate{m, std::move(r.theta), std::move(r.dv), data.y.size()};
            slots[i].served = std::move(served);
            slots[i].loss = r.last_loss;
        } catch (...) {
            slots[i].error = std::current_exception();
        }
    };

    size_t workers = std::min(cfg.threads, participants.size());
    if (workers <= 1) {
        for (size_t i = 0; i < participants.size(); ++i) work(i);
    } else {
        std::vector<std::thread> threads;
        threads.reserve(workers);
        for (size_t w = 0; w < workers; ++w) {
            threads.emplace_back([&, w]() {
                for (size_t i = w; i < participants.size(); i += workers) work(i);
            });
        }
        for (auto& t : threads) t.join();
    }

    for (size_t i = 0; i < slots.size(); ++i) {
        if (slots[i].error) {
            try {
                std::rethrow_exception(slots[i].error);
            } catch (const std::exception& e) {
                throw EngineError("server_round: client " + std::to_string(participants[i]) +
                                  " failed: " + e.what());
            }
        }
    }

    std::vector<ClientUpdate> updates;
    updates.reserve(slots.size());
    double loss_sum = 0.0;
    for (auto& s : slots) {
        loss_sum += s.loss;
        updates.push_back(std::move(s.update));
    }

    ModelParams agg = cfg.metavd == VdMode::off ? aggregate_fedavg(updates)
                                                : aggregate_metavd(updates, state.spec, state.theta, cfg);
    for (size_t l = 0; l < state.theta.layers.size(); ++l) {
        server_apply(state.theta.layers[l].w, agg.layers[l].w, cfg.eta);
        server_apply(state.theta.layers[l].b, agg.layers[l].b, cfg.eta);
    }

    if (cfg.metavd == VdMode::metavd) {
        double total = weight_total(updates);
        double hlr = cfg.hyper_lr < 0.0 ? cfg.eta : cfg.hyper_lr;
        std::vector<HypernetContribution> contributions;
        contributions.reserve(updates.size());
        for (size_t i = 0; i < updates.size(); ++i) {
            Tensor delta = updates[i].log_alpha_star.log_alpha;
            axpy(delta, -1.0, slots[i].served.log_alpha);
            contributions.push_back(
                {updates[i].client_id, std::move(delta), static_cast<double>(updates[i].data_size) / total});
        }
        update_psi(state.hyper, contributions, hlr, cfg.hyper_step_cap);
        for (const auto& c : contributions) {
            update_embedding(state.hyper, c.client_id, c.delta_log_alpha, hlr, cfg.hyper_step_cap);
        }
    } else if (cfg.metavd == VdMode::global_vd) {
        double total = weight_total(updates);
        Tensor mean = Tensor::zeros(state.global_dv.log_alpha.shape);
        for (const auto& u : updates) {
            axpy(mean, static_cast<double>(u.data_size) / total, u.log_alpha_star.log_alpha);
        }
        server_apply(state.global_dv.log_alpha, mean, cfg.eta);
        clamp(state.global_dv);
    } else if (cfg.metavd == VdMode::ensemble_vd) {
        for (auto& u : updates) state.ensemble[u.client_id] = std::move(u.log_alpha_star);
    }

    state.round += 1;

    RoundMetrics metrics;
    metrics.round = state.round;
    metrics.participants = std::move(participants);
    metrics.mean_local_loss = loss_sum / static_cast<double>(slots.size());
    metrics.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return metrics;
}

LocalResult personalize_for_eval(const ServerState& state, const AlgoConfig& cfg, const ClientRegistry& registry,
                                 size_t client, size_t steps, uint64_t seed) {
    DropoutVector dv;
    if (cfg.metavd == VdMode::metavd) {
        bool in_pool = std::find(registry.pool().begin(), registry.pool().end(), client) != registry.pool().end();
        dv = in_pool ? predict_log_alpha(state.hyper, client)
                     : predict_log_alpha_mean(state.hyper, registry.pool());
    } else {
        dv = dropout_for_client(state, cfg, client);
    }
    if (steps == 0) return {state.theta, std::move(dv), 0.0};

    // Evaluation-time adaptation runs on the mean weights (zero noise), like
    // the prediction pass itself; only training uses sampled noise.
    const Batch& data = registry.train(client);
    LocalResult res{state.theta, std::move(dv), 0.0};
    Tensor zero_eps;
    if (!res.dv.empty()) zero_eps = Tensor::zeros(res.dv.log_alpha.shape);
    for (size_t s = 0; s < steps; ++s) {
        Batch batch = sample_batch(data, cfg.batch_size, derive_seed(seed, kTagBatch, s));
        ElboConfig ec = make_elbo_cfg(cfg, data.y.size(), derive_seed(seed, kTagNoise, s));
        if (!res.dv.empty()) ec.fixed_noise = &zero_eps;
        ElboResult g = elbo_loss_and_grads(state.spec, res.theta, res.dv, batch, ec);
        res.theta = sgd_step(res.theta, g.grads_theta, cfg.gamma);
        if (!res.dv.empty()) step_log_alpha(res.dv, g.grads_log_alpha, cfg.gamma);
        res.last_loss = g.loss;
    }
    return res;
}

DropoutVector server_dropout_summary(const ServerState& state, const AlgoConfig& cfg,
                                     const ClientRegistry& registry) {
    switch (cfg.metavd) {
    case VdMode::off: return {};
    case VdMode::metavd: return predict_log_alpha_mean(state.hyper, registry.pool());
    case VdMode::global_vd: return state.global_dv;
    case VdMode::ensemble_vd: {
        DropoutVector mean;
        mean.log_alpha = Tensor::zeros(state.ensemble.at(0).log_alpha.shape);
        const auto& pool = registry.pool();
        for (size_t id : pool) axpy(mean.log_alpha, 1.0 / static_cast<double>(pool.size()), state.ensemble[id].log_alpha);
        clamp(mean);
        return mean;
    }
    }
    return {};
}

namespace {

Tensor softmax_rows(const Tensor& logits) {
    Tensor probs = Tensor::zeros(logits.shape);
    size_t rows = logits.rows(), cols = logits.cols();
    for (size_t i = 0; i < rows; ++i) {
        const double* z = &logits.v[i * cols];
        double* p = &probs.v[i * cols];
        double zmax = z[0];
        for (size_t j = 1; j < cols; ++j) zmax = std::max(zmax, z[j]);
        double sum = 0.0;
        for (size_t j = 0; j < cols; ++j) {
            p[j] = std::exp(z[j] - zmax);
            sum += p[j];
        }
        for (size_t j = 0; j < cols; ++j) p[j] /= sum;
    }
    return probs;
}

void predict_client(const ServerState& state, const EvalConfig& eval_cfg, const LocalResult& model,
                    const Batch& test, size_t client, uint64_t seed, std::vector<PredictionRecord>& records,
                    size_t& correct) {
    Tensor probs;
    if (eval_cfg.mc_samples > 0 && !model.dv.empty()) {
        for (size_t s = 0; s < eval_cfg.mc_samples; ++s) {
            VdForward vd{&model.dv.log_alpha, derive_seed(seed, 0xac, s)};
            auto [logits, cache] = forward(state.spec, model.theta, test.x, vd);
            Tensor p = softmax_rows(logits);
            if (s == 0) {
                probs = std::move(p);
            } else {
                axpy(probs, 1.0, p);
            }
        }
        for (double& x : probs.v) x /= static_cast<double>(eval_cfg.mc_samples);
    } else {
        auto [logits, cache] = forward(state.spec, model.theta, test.x);
        probs = softmax_rows(logits);
    }
    size_t classes = probs.cols();
    for (size_t i = 0; i < test.y.size(); ++i) {
        const double* p = &probs.v[i * classes];
        size_t arg = 0;
        for (size_t j = 1; j < classes; ++j) {
            if (p[j] > p[arg]) arg = j;
        }
        if (static_cast<int>(arg) == test.y[i]) ++correct;
        records.push_back({p[arg], static_cast<int>(arg), test.y[i], client});
    }
}

} // namespace

EvalReport evaluate(const ServerState& state, const AlgoConfig& cfg, const ClientRegistry& registry,
                    const EvalConfig& eval_cfg) {
    EvalReport report;
    std::vector<PredictionRecord> test_records, ood_records;
    std::vector<std::pair<size_t, size_t>> test_counts, ood_counts;

    auto eval_group = [&](const std::vector<size_t>& clients, std::vector<PredictionRecord>& records,
                          std::vector<std::pair<size_t, size_t>>& counts) {
        for (size_t m : clients) {
            const Batch& test = registry.test(m);
            if (test.y.empty()) continue;
            uint64_t seed = derive_seed(state.seed, kTagEval, state.round, m);
            LocalResult model = personalize_for_eval(state, cfg, registry, m, eval_cfg.personalize_steps, seed);
            size_t correct = 0;
            predict_client(state, eval_cfg, model, test, m, seed, records, correct);
            counts.push_back({correct, test.y.size()});
        }
    };

    eval_group(registry.pool(), test_records, test_counts);
    eval_group(registry.ood(), ood_records, ood_counts);

    if (!test_counts.empty()) report.test_acc = weighted_accuracy(test_counts);
    if (!ood_counts.empty()) report.ood_acc = weighted_accuracy(ood_counts);
    report.gap = report.ood_acc - report.test_acc;

    const std::vector<PredictionRecord>& calib = ood_records.empty() ? test_records : ood_records;
    if (!calib.empty()) {
        report.ece = ece(calib, eval_cfg.bins);
        report.mce = mce(calib, eval_cfg.bins);
        report.reliability = reliability_bins(calib, eval_cfg.bins);
    }

    if (cfg.metavd != VdMode::off) {
        DropoutVector summary = server_dropout_summary(state, cfg, registry);
        report.sparsity = sparsity(compression_mask(summary, eval_cfg.mask_threshold));
    }
    return report;
}

TrainingHistory run_training(ServerState& state, const AlgoConfig& cfg, const ClientRegistry& registry,
                             const EvalConfig& eval_cfg, size_t eval_every) {
    TrainingHistory history;
    double wall_acc = 0.0;
    for (size_t r = 0; r < cfg.rounds; ++r) {
        RoundMetrics rm = server_round(state, cfg, registry);
        wall_acc += rm.wall_ms;
        history.rounds.push_back(std::move(rm));
        if (eval_every != 0 && state.round % eval_every == 0) {
            EvalRecord rec;
            rec.round = state.round;
            rec.report = evaluate(state, cfg, registry, eval_cfg);
            rec.wall_ms = wall_acc;
            wall_acc = 0.0;
            history.evals.push_back(std::move(rec));
        }
    }
    return history;
}

} // namespace metavd
