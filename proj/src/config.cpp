#include "metavd/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace metavd {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        double d = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + value + "'");
    }
}

uint64_t parse_uint(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        unsigned long long u = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return static_cast<uint64_t>(u);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a non-negative integer, got '" + value + "'");
    }
}

std::vector<size_t> parse_size_list(const std::string& key, const std::string& value) {
    std::vector<size_t> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(static_cast<size_t>(parse_uint(key, item)));
    }
    if (out.empty()) throw ConfigError("config: key '" + key + "' expects a comma-separated list");
    return out;
}

Method parse_method(const std::string& value) {
    if (value == "fedavg") return Method::fedavg;
    if (value == "reptile") return Method::reptile;
    if (value == "maml") return Method::maml;
    if (value == "perfedavg") return Method::perfedavg;
    throw ConfigError("config: unknown method '" + value + "'");
}

VdMode parse_vd_mode(const std::string& value) {
    if (value == "off") return VdMode::off;
    if (value == "metavd") return VdMode::metavd;
    if (value == "global_vd") return VdMode::global_vd;
    if (value == "ensemble_vd") return VdMode::ensemble_vd;
    throw ConfigError("config: unknown metavd mode '" + value + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"method", [](RunConfig& c, const std::string&, const std::string& v) { c.algo.method = parse_method(v); }},
        {"metavd", [](RunConfig& c, const std::string&, const std::string& v) { c.algo.metavd = parse_vd_mode(v); }},
        {"rounds", [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.rounds = parse_uint(k, v); }},
        {"clients_per_round",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.clients_per_round = parse_uint(k, v); }},
        {"local_steps",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.local_steps = parse_uint(k, v); }},
        {"inner_steps",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.inner_steps = parse_uint(k, v); }},
        {"server_lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.eta = parse_double(k, v); }},
        {"hyper_lr",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.hyper_lr = parse_double(k, v); }},
        {"hyper_step_cap",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.hyper_step_cap = parse_double(k, v); }},
        {"client_lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.gamma = parse_double(k, v); }},
        {"inner_lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.inner_lr = parse_double(k, v); }},
        {"kl_beta", [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.beta = parse_double(k, v); }},
        {"kl_scale",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "dataset") {
                 c.algo.kl_over_dataset = true;
             } else if (v == "none") {
                 c.algo.kl_over_dataset = false;
             } else {
                 throw ConfigError("config: key '" + k + "' expects dataset|none, got '" + v + "'");
             }
         }},
        {"hf_delta", [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.hf_delta = parse_double(k, v); }},
        {"batch_size",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.batch_size = parse_uint(k, v); }},
        {"aggregation_scale",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "normalized") {
                 c.algo.aggregation_scale = AggregationScale::normalized;
             } else if (v == "one_over_m") {
                 c.algo.aggregation_scale = AggregationScale::one_over_m;
             } else {
                 throw ConfigError("config: key '" + k + "' expects normalized|one_over_m, got '" + v + "'");
             }
         }},
        {"threads", [](RunConfig& c, const std::string& k, const std::string& v) { c.algo.threads = parse_uint(k, v); }},
        {"model.hidden",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.hidden = parse_size_list(k, v); }},
        {"model.activation",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "leaky_relu") {
                 c.activation = Activation::leaky_relu;
             } else if (v == "relu") {
                 c.activation = Activation::relu;
             } else if (v == "identity") {
                 c.activation = Activation::identity;
             } else {
                 throw ConfigError("config: key '" + k + "' expects leaky_relu|relu|identity, got '" + v + "'");
             }
         }},
        {"model.leaky_slope",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.leaky_slope = parse_double(k, v); }},
        {"data.kind",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v != "synthetic" && v != "idx") {
                 throw ConfigError("config: key '" + k + "' expects synthetic|idx, got '" + v + "'");
             }
             c.data_kind = v;
         }},
        {"data.classes",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.synth.num_classes = static_cast<int>(parse_uint(k, v));
         }},
        {"data.dim", [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.dim = parse_uint(k, v); }},
        {"data.clusters_per_class",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.clusters_per_class = parse_uint(k, v); }},
        {"data.noise", [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.noise = parse_double(k, v); }},
        {"data.samples", [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.n = parse_uint(k, v); }},
        {"data.images", [](RunConfig& c, const std::string&, const std::string& v) { c.idx_images = v; }},
        {"data.labels", [](RunConfig& c, const std::string&, const std::string& v) { c.idx_labels = v; }},
        {"partition.clients",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.num_clients = parse_uint(k, v); }},
        {"partition.dirichlet_alpha",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.dirichlet_alpha = parse_double(k, v); }},
        {"partition.ood", [](RunConfig& c, const std::string& k, const std::string& v) { c.num_ood = parse_uint(k, v); }},
        {"partition.train_fraction",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.train_fraction = parse_double(k, v); }},
        {"eval.bins", [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.bins = parse_uint(k, v); }},
        {"eval.mc_samples",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.mc_samples = parse_uint(k, v); }},
        {"eval.personalize_steps",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.personalize_steps = parse_uint(k, v); }},
        {"eval.mask_threshold",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.mask_threshold = parse_double(k, v); }},
        {"eval.every", [](RunConfig& c, const std::string& k, const std::string& v) { c.eval_every = parse_uint(k, v); }},
        {"seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_uint(k, v); }},
        {"out_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; }},
    };
    return table;
}

} // namespace

void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second(cfg, key, value);
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    RunConfig cfg;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": expected key = value");
        }
        std::string key = trim(stripped.substr(0, eq));
        std::string value = trim(stripped.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw ConfigError("config: " + path + ":" + std::to_string(lineno) + ": empty key or value");
        }
        set_config_key(cfg, key, value);
    }
    return cfg;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    size_t eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("config: override '" + assignment + "' must be key=value");
    std::string key = trim(assignment.substr(0, eq));
    std::string value = trim(assignment.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError("config: override '" + assignment + "' is incomplete");
    set_config_key(cfg, key, value);
}

void RunConfig::validate() const {
    algo.validate();
    if (hidden.empty()) throw ConfigError("config: model.hidden must not be empty");
    if (data_kind == "synthetic") {
        if (synth.num_classes < 2) throw ConfigError("config: data.classes must be >= 2");
        if (synth.n == 0 || synth.dim == 0) throw ConfigError("config: data sizes must be positive");
        if (synth.noise < 0.0) throw ConfigError("config: data.noise must be >= 0");
    } else if (data_kind == "idx") {
        if (idx_images.empty() || idx_labels.empty()) {
            throw ConfigError("config: idx data requires data.images and data.labels");
        }
    }
    if (num_clients == 0) throw ConfigError("config: partition.clients must be positive");
    if (!(dirichlet_alpha > 0.0)) throw ConfigError("config: partition.dirichlet_alpha must be positive");
    if (num_ood >= num_clients) throw ConfigError("config: partition.ood must leave at least one training client");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
        throw ConfigError("config: partition.train_fraction must lie in (0, 1]");
    }
    if (eval.bins == 0) throw ConfigError("config: eval.bins must be positive");
    if (!(eval.mask_threshold > 0.0 && eval.mask_threshold < 1.0)) {
        throw ConfigError("config: eval.mask_threshold must lie in (0, 1)");
    }
    if (algo.clients_per_round > num_clients - num_ood) {
        throw ConfigError("config: clients_per_round exceeds the training pool");
    }
}

MlpSpec RunConfig::make_spec(size_t input_dim, int num_classes) const {
    MlpSpec spec;
    spec.layer_sizes.push_back(input_dim);
    for (size_t h : hidden) spec.layer_sizes.push_back(h);
    spec.layer_sizes.push_back(static_cast<size_t>(num_classes));
    spec.activation = activation;
    spec.leaky_slope = leaky_slope;
    if (algo.metavd != VdMode::off) spec.vd_layer = spec.dense_count() - 2;
    spec.validate();
    return spec;
}

PreparedData prepare_run_data(const RunConfig& cfg) {
    PreparedData run;
    run.desc = cfg.dataset_desc();
    run.dataset = realize_dataset(run.desc);
    Rng prng(derive_seed(cfg.seed, 0x9a27));
    run.plan = dirichlet_partition(run.dataset, cfg.num_clients, cfg.dirichlet_alpha, prng);
    holdout_ood(run.plan, cfg.num_ood, prng);
    client_train_test_split(run.plan, run.dataset, cfg.train_fraction, prng);
    return run;
}

DatasetDesc RunConfig::dataset_desc() const {
    DatasetDesc desc;
    desc.kind = data_kind;
    if (data_kind == "synthetic") {
        desc.synth = synth;
        desc.seed = derive_seed(seed, 0xda7a);
    } else {
        desc.images = idx_images;
        desc.labels = idx_labels;
    }
    return desc;
}

std::string method_name(Method m) {
    switch (m) {
    case Method::fedavg: return "fedavg";
    case Method::reptile: return "reptile";
    case Method::maml: return "maml";
    case Method::perfedavg: return "perfedavg";
    }
    return "unknown";
}

std::string vd_mode_name(VdMode m) {
    switch (m) {
    case VdMode::off: return "off";
    case VdMode::metavd: return "metavd";
    case VdMode::global_vd: return "global_vd";
    case VdMode::ensemble_vd: return "ensemble_vd";
    }
    return "unknown";
}

} // namespace metavd
