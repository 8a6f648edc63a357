#ifndef METAVD_CONFIG_HPP
#define METAVD_CONFIG_HPP

#include <string>
#include <vector>

#include "metavd/data.hpp"
#include "metavd/engine.hpp"

namespace metavd {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Full experiment description: algorithm, model, data, partition, evaluation
// and run settings. Parsed from a flat key = value file; command-line
// overrides reuse the same keys (last one wins).
struct RunConfig {
    AlgoConfig algo;

    std::vector<size_t> hidden = {32, 32};
    Activation activation = Activation::leaky_relu;
    double leaky_slope = 0.01;

    std::string data_kind = "synthetic"; // synthetic | idx
    SyntheticSpec synth;
    std::string idx_images;
    std::string idx_labels;

    size_t num_clients = 20;
    double dirichlet_alpha = 0.1;
    size_t num_ood = 4;
    double train_fraction = 0.8;

    EvalConfig eval;
    size_t eval_every = 50;

    uint64_t seed = 1;
    std::string out_dir = "runs";

    void validate() const;

    MlpSpec make_spec(size_t input_dim, int num_classes) const;
    DatasetDesc dataset_desc() const;
};

// Dataset + partition + splits realized from a config's seed. The same
// derivation everywhere keeps plans reproducible across subcommands.
struct PreparedData {
    Dataset dataset;
    PartitionPlan plan;
    DatasetDesc desc;
};

PreparedData prepare_run_data(const RunConfig& cfg);

RunConfig parse_config_file(const std::string& path);

// "key=value" override, e.g. from a --set flag.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Shared key dispatch used by both the file parser and overrides.
void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value);

std::string method_name(Method m);
std::string vd_mode_name(VdMode m);

} // namespace metavd

#endif
