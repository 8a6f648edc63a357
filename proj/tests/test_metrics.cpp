#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "metavd/metrics.hpp"
#include "metavd/rng.hpp"

using namespace metavd;

namespace {

std::vector<PredictionRecord> fixture_bin(double confidence, size_t n, size_t correct) {
    std::vector<PredictionRecord> records;
    for (size_t i = 0; i < n; ++i) {
        bool hit = i < correct;
        records.push_back({confidence, 0, hit ? 0 : 1, 0});
    }
    return records;
}

} // namespace

TEST_CASE("weighted_accuracy: pooled over clients") {
    CHECK(weighted_accuracy({{5, 5}, {3, 3}}) == 100.0);
    CHECK(weighted_accuracy({{1, 2}, {3, 4}}) == doctest::Approx(200.0 / 3.0).epsilon(1e-12));
    CHECK_THROWS_AS(weighted_accuracy({}), MetricsError);
    CHECK_THROWS_AS(weighted_accuracy({{0, 0}}), MetricsError);
}

TEST_CASE("ece: hand-computed fixtures") {
    SUBCASE("confidence equal to per-bin accuracy gives zero") {
        std::vector<PredictionRecord> records;
        auto a = fixture_bin(0.75, 4, 3); // bin 7: conf 0.75, acc 0.75
        auto b = fixture_bin(0.25, 4, 1); // bin 2: conf 0.25, acc 0.25
        records.insert(records.end(), a.begin(), a.end());
        records.insert(records.end(), b.begin(), b.end());
        CHECK(ece(records, 10) == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("ten records at 0.9 with six correct") {
        auto records = fixture_bin(0.9, 10, 6);
        CHECK(ece(records, 10) == doctest::Approx(30.0).epsilon(1e-12));
    }
    SUBCASE("single bin equals the global gap") {
        Rng rng(5);
        std::vector<PredictionRecord> records;
        size_t correct = 0;
        for (int i = 0; i < 50; ++i) {
            bool hit = rng.uniform() < 0.4;
            correct += hit ? 1 : 0;
            records.push_back({rng.uniform(0.3, 0.99), 0, hit ? 0 : 1, 0});
        }
        double conf_mean = 0.0;
        for (const auto& r : records) conf_mean += r.confidence;
        conf_mean /= 50.0;
        double expected = std::fabs(static_cast<double>(correct) / 50.0 - conf_mean) * 100.0;
        CHECK(ece(records, 1) == doctest::Approx(expected).epsilon(1e-12));
        CHECK(mce(records, 1) == doctest::Approx(ece(records, 1)).epsilon(1e-12));
    }
    SUBCASE("empty records are rejected") {
        CHECK_THROWS_AS(ece({}, 10), MetricsError);
    }
}

TEST_CASE("mce: hand-computed two-bin fixture") {
    std::vector<PredictionRecord> records;
    auto a = fixture_bin(0.35, 20, 5);  // acc 0.25, gap 10 points
    auto b = fixture_bin(0.75, 20, 9);  // acc 0.45, gap 30 points
    records.insert(records.end(), a.begin(), a.end());
    records.insert(records.end(), b.begin(), b.end());
    CHECK(mce(records, 10) == doctest::Approx(30.0).epsilon(1e-12));
    CHECK(ece(records, 10) == doctest::Approx(20.0).epsilon(1e-12));

    auto perfect = fixture_bin(0.5, 10, 5);
    CHECK(mce(perfect, 10) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("reliability_bins: counts conserve records, empty bins flagged") {
    std::vector<PredictionRecord> records;
    auto a = fixture_bin(0.15, 7, 2);
    auto b = fixture_bin(0.85, 13, 11);
    records.insert(records.end(), a.begin(), a.end());
    records.insert(records.end(), b.begin(), b.end());
    auto bins = reliability_bins(records, 10);
    REQUIRE(bins.size() == 10);
    size_t total = 0;
    for (const auto& bin : bins) total += bin.count;
    CHECK(total == records.size());
    CHECK(bins[1].count == 7);
    CHECK(bins[1].mean_confidence == doctest::Approx(0.15));
    CHECK(bins[1].accuracy == doctest::Approx(2.0 / 7.0));
    CHECK(bins[8].count == 13);
    CHECK(bins[0].count == 0);
    CHECK(bins[0].mean_confidence == 0.0);
}

TEST_CASE("ece <= mce and order invariance") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<PredictionRecord> records;
        size_t n = 30 + rng.index(100);
        for (size_t i = 0; i < n; ++i) {
            double conf = rng.uniform(0.05, 1.0);
            bool hit = rng.uniform() < conf * 0.8;
            records.push_back({conf, 1, hit ? 1 : 0, i % 4});
        }
        double e = ece(records, 10), m = mce(records, 10);
        CHECK(e >= 0.0);
        CHECK(m >= e - 1e-12);

        auto shuffled = records;
        rng.shuffle(shuffled);
        CHECK(ece(shuffled, 10) == doctest::Approx(e).epsilon(1e-12));
        CHECK(mce(shuffled, 10) == doctest::Approx(m).epsilon(1e-12));
    }
}

TEST_CASE("sparsity: percentage of dropped mask entries") {
    BoolMask all_kept{{2, 2}, {1, 1, 1, 1}};
    CHECK(sparsity(all_kept) == 0.0);
    BoolMask all_dropped{{2, 2}, {0, 0, 0, 0}};
    CHECK(sparsity(all_dropped) == 100.0);
    BoolMask half{{1, 4}, {1, 0, 1, 0}};
    CHECK(sparsity(half) == 50.0);
    CHECK_THROWS_AS(sparsity(BoolMask{}), MetricsError);
}
