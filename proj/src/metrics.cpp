#include "metavd/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace metavd {

namespace {

size_t bin_index(double confidence, size_t num_bins) {
    double scaled = confidence * static_cast<double>(num_bins);
    auto idx = static_cast<long long>(std::floor(scaled));
    if (idx < 0) idx = 0;
    if (idx >= static_cast<long long>(num_bins)) idx = static_cast<long long>(num_bins) - 1;
    return static_cast<size_t>(idx);
}

} // namespace

double weighted_accuracy(const std::vector<std::pair<size_t, size_t>>& per_client) {
    size_t correct = 0, total = 0;
    for (const auto& [c, t] : per_client) {
        correct += c;
        total += t;
    }
    if (total == 0) throw MetricsError("weighted_accuracy: no samples");
    return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

std::vector<ReliabilityBin> reliability_bins(const std::vector<PredictionRecord>& records, size_t num_bins) {
    if (num_bins == 0) throw MetricsError("reliability_bins: need at least one bin");
    if (records.empty()) throw MetricsError("reliability_bins: no records");
    std::vector<double> conf_sum(num_bins, 0.0);
    std::vector<size_t> correct(num_bins, 0), count(num_bins, 0);
    for (const auto& r : records) {
        size_t b = bin_index(r.confidence, num_bins);
        conf_sum[b] += r.confidence;
        correct[b] += r.predicted == r.actual ? 1 : 0;
        count[b] += 1;
    }
    std::vector<ReliabilityBin> bins(num_bins);
    for (size_t b = 0; b < num_bins; ++b) {
        bins[b].count = count[b];
        bins[b].mean_confidence = count[b] ? conf_sum[b] / static_cast<double>(count[b]) : 0.0;
        bins[b].accuracy = count[b] ? static_cast<double>(correct[b]) / static_cast<double>(count[b]) : 0.0;
    }
    return bins;
}

double ece(const std::vector<PredictionRecord>& records, size_t num_bins) {
    auto bins = reliability_bins(records, num_bins);
    double total = static_cast<double>(records.size());
    double err = 0.0;
    for (const auto& b : bins) {
        if (!b.count) continue;
        err += (static_cast<double>(b.count) / total) * std::fabs(b.accuracy - b.mean_confidence);
    }
    return 100.0 * err;
}

double mce(const std::vector<PredictionRecord>& records, size_t num_bins) {
    auto bins = reliability_bins(records, num_bins);
    double worst = 0.0;
    for (const auto& b : bins) {
        if (!b.count) continue;
        worst = std::max(worst, std::fabs(b.accuracy - b.mean_confidence));
    }
    return 100.0 * worst;
}

double sparsity(const BoolMask& mask) {
    if (mask.size() == 0) throw MetricsError("sparsity: empty mask");
    size_t dropped = 0;
    for (uint8_t k : mask.keep) {
        if (!k) ++dropped;
    }
    return 100.0 * static_cast<double>(dropped) / static_cast<double>(mask.size());
}

} // namespace metavd
