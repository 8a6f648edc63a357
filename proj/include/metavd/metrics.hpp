#ifndef METAVD_METRICS_HPP
#define METAVD_METRICS_HPP

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "metavd/vd.hpp"

namespace metavd {

struct MetricsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PredictionRecord {
    double confidence; // max softmax probability
    int predicted;
    int actual;
    size_t client_id;
};

struct ReliabilityBin {
    double mean_confidence; // 0 when the bin is empty
    double accuracy;        // fraction correct, 0 when empty
    size_t count;
};

struct EvalReport {
    double test_acc = 0.0;
    double ood_acc = 0.0;
    double gap = 0.0; // ood_acc - test_acc
    double ece = 0.0;
    double mce = 0.0;
    std::vector<ReliabilityBin> reliability;
    double sparsity = 0.0;
};

// Pooled accuracy over clients: 100 * sum(correct) / sum(total).
double weighted_accuracy(const std::vector<std::pair<size_t, size_t>>& per_client);

// Expected calibration error over equal-width confidence bins, in percent.
double ece(const std::vector<PredictionRecord>& records, size_t num_bins);

// Maximum calibration error over nonempty bins, in percent.
double mce(const std::vector<PredictionRecord>& records, size_t num_bins);

std::vector<ReliabilityBin> reliability_bins(const std::vector<PredictionRecord>& records, size_t num_bins);

// Percentage of dropped entries in a compression mask.
double sparsity(const BoolMask& mask);

} // namespace metavd

#endif
