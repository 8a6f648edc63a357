#ifndef METAVD_DATA_HPP
#define METAVD_DATA_HPP

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "metavd/rng.hpp"
#include "metavd/tensor.hpp"

namespace metavd {

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Dataset {
    Tensor x; // n x dim
    std::vector<int> y;
    int num_classes = 0;
    std::string name;

    size_t size() const { return y.size(); }
    size_t dim() const { return x.cols(); }
};

struct ClientSplit {
    std::vector<size_t> train;
    std::vector<size_t> test;
};

// Assignment of dataset indices to clients plus the OOD holdout and the
// per-client train/test split.
struct PartitionPlan {
    std::vector<std::vector<size_t>> assignments;
    std::set<size_t> ood_clients;
    double train_fraction = 0.8;
    std::vector<ClientSplit> splits; // empty until client_train_test_split runs

    size_t num_clients() const { return assignments.size(); }
    bool is_ood(size_t client) const { return ood_clients.count(client) != 0; }
};

// Class-wise Dirichlet allocation: for each class, proportions over clients
// are drawn from Dir(alpha_dot * 1) and that class's samples are distributed
// accordingly. Redraws the whole partition (bounded retries) until every
// client holds at least two samples.
PartitionPlan dirichlet_partition(const Dataset& ds, size_t num_clients, double alpha_dot, Rng& rng);

// Marks num_ood uniformly chosen clients as out-of-distribution.
void holdout_ood(PartitionPlan& plan, size_t num_ood, Rng& rng);

// Disjoint per-client train/test split at the given train fraction,
// stratified by class where counts allow.
void client_train_test_split(PartitionPlan& plan, const Dataset& ds, double fraction, Rng& rng);

struct SyntheticSpec {
    int num_classes = 5;
    size_t dim = 16;
    size_t clusters_per_class = 3;
    double noise = 0.35;
    size_t n = 4000;
};

// Gaussian-cluster classification data with balanced labels.
Dataset gen_synthetic(const SyntheticSpec& spec, Rng& rng);

// Big-endian IDX container (images + labels). Features scaled to [0, 1].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// How to reconstruct a dataset: either synthetic generation parameters plus
// a seed, or IDX file paths. Stored alongside a partition plan so that a
// plan file is self-contained.
struct DatasetDesc {
    std::string kind = "synthetic"; // synthetic | idx
    SyntheticSpec synth;
    uint64_t seed = 0;
    std::string images;
    std::string labels;
};

Dataset realize_dataset(const DatasetDesc& desc);

void save_plan(const std::string& path, const PartitionPlan& plan, const DatasetDesc& desc);
std::pair<PartitionPlan, DatasetDesc> load_plan(const std::string& path);

} // namespace metavd

#endif
