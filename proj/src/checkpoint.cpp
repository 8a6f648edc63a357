#include "metavd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace metavd {

namespace {

constexpr char kMagic[4] = {'M', 'V', 'D', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& out, T value) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T)); // host is little-endian
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& path) {
    unsigned char buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!in) throw CheckpointError("checkpoint: truncated file " + path);
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

Tensor scalar(double v) { return Tensor({1}, {v}); }

class EntryMap {
public:
    explicit EntryMap(std::vector<CheckpointEntry> entries) : entries_(std::move(entries)) {
        for (size_t i = 0; i < entries_.size(); ++i) index_[entries_[i].name] = i;
    }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw CheckpointError("checkpoint: missing entry " + name);
        return entries_[it->second].data;
    }

    double get_scalar(const std::string& name) const {
        const Tensor& t = get(name);
        if (t.size() != 1) throw CheckpointError("checkpoint: entry " + name + " is not a scalar");
        return t.v[0];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

private:
    std::vector<CheckpointEntry> entries_;
    std::map<std::string, size_t> index_;
};

} // namespace

void write_entries(const std::string& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, 4);
    write_le<uint32_t>(out, kVersion);
    write_le<uint32_t>(out, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        write_le<uint32_t>(out, static_cast<uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_le<uint32_t>(out, static_cast<uint32_t>(e.data.shape.size()));
        for (size_t d : e.data.shape) write_le<uint64_t>(out, static_cast<uint64_t>(d));
        for (double v : e.data.v) write_le<double>(out, v);
    }
    if (!out) throw CheckpointError("checkpoint: write failed for " + path);
}

std::vector<CheckpointEntry> read_entries(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw CheckpointError("checkpoint: bad magic in " + path + " (expected MVD1)");
    }
    uint32_t version = read_le<uint32_t>(in, path);
    if (version != kVersion) {
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + " in " + path);
    }
    uint32_t count = read_le<uint32_t>(in, path);
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = read_le<uint32_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) throw CheckpointError("checkpoint: truncated file " + path);
        uint32_t rank = read_le<uint32_t>(in, path);
        std::vector<size_t> shape(rank);
        size_t n = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<size_t>(read_le<uint64_t>(in, path));
            n *= shape[d];
        }
        Tensor t = Tensor::zeros(shape);
        for (size_t k = 0; k < n; ++k) t.v[k] = read_le<double>(in, path);
        entries.push_back({std::move(name), std::move(t)});
    }
    return entries;
}

void save_checkpoint(const std::string& path, const ServerState& state, const AlgoConfig& cfg) {
    std::vector<CheckpointEntry> e;
    e.push_back({"cfg/method", scalar(static_cast<double>(cfg.method))});
    e.push_back({"cfg/metavd", scalar(static_cast<double>(cfg.metavd))});
    e.push_back({"cfg/rounds", scalar(static_cast<double>(cfg.rounds))});
    e.push_back({"cfg/clients_per_round", scalar(static_cast<double>(cfg.clients_per_round))});
    e.push_back({"cfg/local_steps", scalar(static_cast<double>(cfg.local_steps))});
    e.push_back({"cfg/inner_steps", scalar(static_cast<double>(cfg.inner_steps))});
    e.push_back({"cfg/eta", scalar(cfg.eta)});
    e.push_back({"cfg/hyper_lr", scalar(cfg.hyper_lr)});
    e.push_back({"cfg/hyper_step_cap", scalar(cfg.hyper_step_cap)});
    e.push_back({"cfg/gamma", scalar(cfg.gamma)});
    e.push_back({"cfg/inner_lr", scalar(cfg.inner_lr)});
    e.push_back({"cfg/beta", scalar(cfg.beta)});
    e.push_back({"cfg/hf_delta", scalar(cfg.hf_delta)});
    e.push_back({"cfg/batch_size", scalar(static_cast<double>(cfg.batch_size))});
    e.push_back({"cfg/aggregation_scale", scalar(static_cast<double>(cfg.aggregation_scale))});
    e.push_back({"cfg/kl_over_dataset", scalar(cfg.kl_over_dataset ? 1.0 : 0.0)});

    Tensor sizes = Tensor::zeros({state.spec.layer_sizes.size()});
    for (size_t i = 0; i < sizes.size(); ++i) sizes.v[i] = static_cast<double>(state.spec.layer_sizes[i]);
    e.push_back({"model/layer_sizes", std::move(sizes)});
    e.push_back({"model/activation", scalar(static_cast<double>(state.spec.activation))});
    e.push_back({"model/leaky_slope", scalar(state.spec.leaky_slope)});
    e.push_back({"model/vd_layer",
                 scalar(state.spec.vd_layer ? static_cast<double>(*state.spec.vd_layer) : -1.0)});

    e.push_back({"state/round", scalar(static_cast<double>(state.round))});
    e.push_back({"state/seed_lo", scalar(static_cast<double>(state.seed & 0xffffffffull))});
    e.push_back({"state/seed_hi", scalar(static_cast<double>(state.seed >> 32))});

    for (size_t l = 0; l < state.theta.layers.size(); ++l) {
        e.push_back({"theta/" + std::to_string(l) + "/w", state.theta.layers[l].w});
        e.push_back({"theta/" + std::to_string(l) + "/b", state.theta.layers[l].b});
    }

    if (cfg.metavd == VdMode::metavd) {
        for (size_t l = 0; l < state.hyper.psi.layers.size(); ++l) {
            e.push_back({"hyper/psi/" + std::to_string(l) + "/w", state.hyper.psi.layers[l].w});
            e.push_back({"hyper/psi/" + std::to_string(l) + "/b", state.hyper.psi.layers[l].b});
        }
        e.push_back({"hyper/embeddings", state.hyper.embeddings});
        e.push_back({"hyper/vd_rows", scalar(static_cast<double>(state.hyper.vd_rows))});
        e.push_back({"hyper/vd_cols", scalar(static_cast<double>(state.hyper.vd_cols))});
    } else if (cfg.metavd == VdMode::global_vd) {
        e.push_back({"global/log_alpha", state.global_dv.log_alpha});
    } else if (cfg.metavd == VdMode::ensemble_vd) {
        e.push_back({"ensemble/count", scalar(static_cast<double>(state.ensemble.size()))});
        for (size_t m = 0; m < state.ensemble.size(); ++m) {
            e.push_back({"ensemble/" + std::to_string(m) + "/log_alpha", state.ensemble[m].log_alpha});
        }
    }
    write_entries(path, e);
}

std::pair<ServerState, AlgoConfig> load_checkpoint(const std::string& path) {
    EntryMap map(read_entries(path));

    AlgoConfig cfg;
    cfg.method = static_cast<Method>(static_cast<int>(map.get_scalar("cfg/method")));
    cfg.metavd = static_cast<VdMode>(static_cast<int>(map.get_scalar("cfg/metavd")));
    cfg.rounds = static_cast<size_t>(map.get_scalar("cfg/rounds"));
    cfg.clients_per_round = static_cast<size_t>(map.get_scalar("cfg/clients_per_round"));
    cfg.local_steps = static_cast<size_t>(map.get_scalar("cfg/local_steps"));
    cfg.inner_steps = static_cast<size_t>(map.get_scalar("cfg/inner_steps"));
    cfg.eta = map.get_scalar("cfg/eta");
    cfg.hyper_lr = map.get_scalar("cfg/hyper_lr");
    cfg.hyper_step_cap = map.get_scalar("cfg/hyper_step_cap");
    cfg.gamma = map.get_scalar("cfg/gamma");
    cfg.inner_lr = map.get_scalar("cfg/inner_lr");
    cfg.beta = map.get_scalar("cfg/beta");
    cfg.hf_delta = map.get_scalar("cfg/hf_delta");
    cfg.batch_size = static_cast<size_t>(map.get_scalar("cfg/batch_size"));
    cfg.aggregation_scale = static_cast<AggregationScale>(static_cast<int>(map.get_scalar("cfg/aggregation_scale")));
    cfg.kl_over_dataset = map.get_scalar("cfg/kl_over_dataset") != 0.0;

    ServerState state;
    const Tensor& sizes = map.get("model/layer_sizes");
    for (double v : sizes.v) state.spec.layer_sizes.push_back(static_cast<size_t>(v));
    state.spec.activation = static_cast<Activation>(static_cast<int>(map.get_scalar("model/activation")));
    state.spec.leaky_slope = map.get_scalar("model/leaky_slope");
    double vd_layer = map.get_scalar("model/vd_layer");
    if (vd_layer >= 0.0) state.spec.vd_layer = static_cast<size_t>(vd_layer);
    state.spec.validate();

    state.round = static_cast<size_t>(map.get_scalar("state/round"));
    state.seed = (static_cast<uint64_t>(map.get_scalar("state/seed_hi")) << 32) |
                 static_cast<uint64_t>(map.get_scalar("state/seed_lo"));

    for (size_t l = 0; l < state.spec.dense_count(); ++l) {
        DenseParams layer;
        layer.w = map.get("theta/" + std::to_string(l) + "/w");
        layer.b = map.get("theta/" + std::to_string(l) + "/b");
        state.theta.layers.push_back(std::move(layer));
    }

    if (cfg.metavd == VdMode::metavd) {
        state.hyper.vd_rows = static_cast<size_t>(map.get_scalar("hyper/vd_rows"));
        state.hyper.vd_cols = static_cast<size_t>(map.get_scalar("hyper/vd_cols"));
        state.hyper.embeddings = map.get("hyper/embeddings");
        state.hyper.net.layer_sizes = {state.hyper.embeddings.cols(), kHypernetHidden, kHypernetHidden,
                                       state.hyper.vd_rows * state.hyper.vd_cols};
        state.hyper.net.activation = Activation::leaky_relu;
        state.hyper.net.leaky_slope = 0.01;
        for (size_t l = 0; l < 3; ++l) {
            DenseParams layer;
            layer.w = map.get("hyper/psi/" + std::to_string(l) + "/w");
            layer.b = map.get("hyper/psi/" + std::to_string(l) + "/b");
            state.hyper.psi.layers.push_back(std::move(layer));
        }
    } else if (cfg.metavd == VdMode::global_vd) {
        state.global_dv.log_alpha = map.get("global/log_alpha");
    } else if (cfg.metavd == VdMode::ensemble_vd) {
        size_t count = static_cast<size_t>(map.get_scalar("ensemble/count"));
        for (size_t m = 0; m < count; ++m) {
            DropoutVector dv;
            dv.log_alpha = map.get("ensemble/" + std::to_string(m) + "/log_alpha");
            state.ensemble.push_back(std::move(dv));
        }
    }
    return {std::move(state), cfg};
}

} // namespace metavd
