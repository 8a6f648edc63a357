#include "metavd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

namespace metavd {

namespace {

constexpr int kPartitionRetries = 1000;

std::vector<double> dirichlet_proportions(double alpha_dot, size_t n, Rng& rng) {
    std::vector<double> p(n);
    double sum = 0.0;
    for (double& x : p) {
        x = rng.gamma(alpha_dot);
        sum += x;
    }
    if (sum <= 0.0) {
        // Pathologically small draws; fall back to uniform.
        for (double& x : p) x = 1.0 / static_cast<double>(n);
        return p;
    }
    for (double& x : p) x /= sum;
    return p;
}

// Integer counts summing to total that best match the proportions
// (largest-remainder rounding, ties broken by index).
std::vector<size_t> proportional_counts(const std::vector<double>& p, size_t total) {
    size_t n = p.size();
    std::vector<size_t> counts(n);
    std::vector<std::pair<double, size_t>> remainders(n);
    size_t assigned = 0;
    for (size_t i = 0; i < n; ++i) {
        double target = p[i] * static_cast<double>(total);
        counts[i] = static_cast<size_t>(std::floor(target));
        remainders[i] = {target - std::floor(target), i};
        assigned += counts[i];
    }
    std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    for (size_t k = 0; assigned < total; ++k, ++assigned) counts[remainders[k % n].second] += 1;
    return counts;
}

uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char buf[4];
    in.read(reinterpret_cast<char*>(buf), 4);
    if (!in) throw DataError("idx: truncated file " + path);
    return (uint32_t(buf[0]) << 24) | (uint32_t(buf[1]) << 16) | (uint32_t(buf[2]) << 8) | uint32_t(buf[3]);
}

} // namespace

PartitionPlan dirichlet_partition(const Dataset& ds, size_t num_clients, double alpha_dot, Rng& rng) {
    if (!(alpha_dot > 0.0)) throw DataError("dirichlet_partition: alpha must be positive");
    if (num_clients == 0) throw DataError("dirichlet_partition: need at least one client");
    if (ds.size() < 2 * num_clients) {
        throw DataError("dirichlet_partition: dataset too small for " + std::to_string(num_clients) + " clients");
    }

    std::vector<std::vector<size_t>> by_class(ds.num_classes);
    for (size_t i = 0; i < ds.size(); ++i) by_class[ds.y[i]].push_back(i);

    for (int attempt = 0; attempt < kPartitionRetries; ++attempt) {
        PartitionPlan plan;
        plan.assignments.assign(num_clients, {});
        for (int c = 0; c < ds.num_classes; ++c) {
            std::vector<size_t> idx = by_class[c];
            rng.shuffle(idx);
            std::vector<double> p = dirichlet_proportions(alpha_dot, num_clients, rng);
            std::vector<size_t> counts = proportional_counts(p, idx.size());
            size_t cursor = 0;
            for (size_t m = 0; m < num_clients; ++m) {
                for (size_t k = 0; k < counts[m]; ++k) plan.assignments[m].push_back(idx[cursor++]);
            }
        }
        bool ok = true;
        for (const auto& a : plan.assignments) {
            if (a.size() < 2) {
                ok = false;
                break;
            }
        }
        if (ok) return plan;
    }
    throw DataError("dirichlet_partition: retry budget exhausted (every client needs >= 2 samples)");
}

void holdout_ood(PartitionPlan& plan, size_t num_ood, Rng& rng) {
    if (num_ood > plan.num_clients()) throw DataError("holdout_ood: more OOD clients than clients");
    std::vector<size_t> ids(plan.num_clients());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    rng.shuffle(ids);
    plan.ood_clients.clear();
    for (size_t i = 0; i < num_ood; ++i) plan.ood_clients.insert(ids[i]);
}

void client_train_test_split(PartitionPlan& plan, const Dataset& ds, double fraction, Rng& rng) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw DataError("client_train_test_split: fraction must be in (0, 1]");
    plan.train_fraction = fraction;
    plan.splits.assign(plan.num_clients(), {});
    for (size_t m = 0; m < plan.num_clients(); ++m) {
        // Split each class separately so both sides keep every class that has
        // enough samples for it.
        std::map<int, std::vector<size_t>> by_class;
        for (size_t idx : plan.assignments[m]) by_class[ds.y[idx]].push_back(idx);
        ClientSplit& split = plan.splits[m];
        for (auto& [label, idx] : by_class) {
            rng.shuffle(idx);
            size_t n = idx.size();
            size_t test_n = static_cast<size_t>(std::llround((1.0 - fraction) * static_cast<double>(n)));
            if (fraction < 1.0 && n >= 2 && test_n == 0) test_n = 1;
            if (test_n >= n && n > 0) test_n = n - 1;
            split.test.insert(split.test.end(), idx.begin(), idx.begin() + test_n);
            split.train.insert(split.train.end(), idx.begin() + test_n, idx.end());
        }
        std::sort(split.test.begin(), split.test.end());
        std::sort(split.train.begin(), split.train.end());
    }
}

Dataset gen_synthetic(const SyntheticSpec& spec, Rng& rng) {
    if (spec.num_classes < 2) throw DataError("gen_synthetic: need at least two classes");
    if (spec.n == 0 || spec.dim == 0 || spec.clusters_per_class == 0) {
        throw DataError("gen_synthetic: sizes must be positive");
    }
    size_t n_clusters = static_cast<size_t>(spec.num_classes) * spec.clusters_per_class;
    std::vector<std::vector<double>> centers(n_clusters, std::vector<double>(spec.dim));
    for (auto& c : centers) {
        for (double& v : c) v = 2.0 * rng.normal();
    }

    Dataset ds;
    ds.num_classes = spec.num_classes;
    ds.name = "synthetic";
    ds.x = Tensor::zeros({spec.n, spec.dim});
    ds.y.resize(spec.n);
    for (size_t i = 0; i < spec.n; ++i) {
        int label = static_cast<int>(i % static_cast<size_t>(spec.num_classes));
        size_t cluster = static_cast<size_t>(label) * spec.clusters_per_class + rng.index(spec.clusters_per_class);
        ds.y[i] = label;
        double* xi = &ds.x.v[i * spec.dim];
        for (size_t j = 0; j < spec.dim; ++j) xi[j] = centers[cluster][j] + spec.noise * rng.normal();
    }
    return ds;
}

Dataset realize_dataset(const DatasetDesc& desc) {
    if (desc.kind == "synthetic") {
        Rng rng(desc.seed);
        return gen_synthetic(desc.synth, rng);
    }
    if (desc.kind == "idx") return load_idx(desc.images, desc.labels);
    throw DataError("realize_dataset: unknown dataset kind '" + desc.kind + "'");
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw DataError("idx: cannot open " + images_path);
    uint32_t magic = read_be32(img, images_path);
    if (magic != 0x00000803u) throw DataError("idx: bad image magic in " + images_path);
    uint32_t n = read_be32(img, images_path);
    uint32_t rows = read_be32(img, images_path);
    uint32_t cols = read_be32(img, images_path);
    if (n == 0) throw DataError("idx: empty image file " + images_path);
    size_t dim = static_cast<size_t>(rows) * cols;
    std::vector<unsigned char> raw(static_cast<size_t>(n) * dim);
    img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!img) throw DataError("idx: truncated image data in " + images_path);

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw DataError("idx: cannot open " + labels_path);
    uint32_t lmagic = read_be32(lab, labels_path);
    if (lmagic != 0x00000801u) throw DataError("idx: bad label magic in " + labels_path);
    uint32_t ln = read_be32(lab, labels_path);
    if (ln != n) throw DataError("idx: image/label count mismatch");
    std::vector<unsigned char> lraw(ln);
    lab.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(lraw.size()));
    if (!lab) throw DataError("idx: truncated label data in " + labels_path);

    Dataset ds;
    ds.name = images_path;
    ds.x = Tensor::zeros({n, dim});
    for (size_t i = 0; i < raw.size(); ++i) ds.x.v[i] = static_cast<double>(raw[i]) / 255.0;
    ds.y.resize(ln);
    int max_label = 0;
    for (size_t i = 0; i < lraw.size(); ++i) {
        ds.y[i] = static_cast<int>(lraw[i]);
        max_label = std::max(max_label, ds.y[i]);
    }
    ds.num_classes = max_label + 1;
    return ds;
}

void save_plan(const std::string& path, const PartitionPlan& plan, const DatasetDesc& desc) {
    nlohmann::json j;
    j["dataset"]["kind"] = desc.kind;
    if (desc.kind == "synthetic") {
        j["dataset"]["classes"] = desc.synth.num_classes;
        j["dataset"]["dim"] = desc.synth.dim;
        j["dataset"]["clusters_per_class"] = desc.synth.clusters_per_class;
        j["dataset"]["noise"] = desc.synth.noise;
        j["dataset"]["samples"] = desc.synth.n;
        j["dataset"]["seed"] = desc.seed;
    } else {
        j["dataset"]["images"] = desc.images;
        j["dataset"]["labels"] = desc.labels;
    }
    j["train_fraction"] = plan.train_fraction;
    j["assignments"] = plan.assignments;
    j["ood_clients"] = std::vector<size_t>(plan.ood_clients.begin(), plan.ood_clients.end());
    if (!plan.splits.empty()) {
        nlohmann::json splits = nlohmann::json::array();
        for (const auto& s : plan.splits) {
            splits.push_back({{"train", s.train}, {"test", s.test}});
        }
        j["splits"] = std::move(splits);
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("save_plan: cannot open " + path);
    out << j.dump(2) << "\n";
    if (!out) throw DataError("save_plan: write failed for " + path);
}

std::pair<PartitionPlan, DatasetDesc> load_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("load_plan: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_plan: invalid JSON in " + path + ": " + e.what());
    }

    DatasetDesc desc;
    desc.kind = j.at("dataset").at("kind").get<std::string>();
    if (desc.kind == "synthetic") {
        desc.synth.num_classes = j["dataset"].at("classes").get<int>();
        desc.synth.dim = j["dataset"].at("dim").get<size_t>();
        desc.synth.clusters_per_class = j["dataset"].at("clusters_per_class").get<size_t>();
        desc.synth.noise = j["dataset"].at("noise").get<double>();
        desc.synth.n = j["dataset"].at("samples").get<size_t>();
        desc.seed = j["dataset"].at("seed").get<uint64_t>();
    } else if (desc.kind == "idx") {
        desc.images = j["dataset"].at("images").get<std::string>();
        desc.labels = j["dataset"].at("labels").get<std::string>();
    } else {
        throw DataError("load_plan: unknown dataset kind in " + path);
    }

    PartitionPlan plan;
    plan.train_fraction = j.at("train_fraction").get<double>();
    plan.assignments = j.at("assignments").get<std::vector<std::vector<size_t>>>();
    for (size_t id : j.at("ood_clients").get<std::vector<size_t>>()) plan.ood_clients.insert(id);
    if (j.contains("splits")) {
        for (const auto& s : j["splits"]) {
            ClientSplit split;
            split.train = s.at("train").get<std::vector<size_t>>();
            split.test = s.at("test").get<std::vector<size_t>>();
            plan.splits.push_back(std::move(split));
        }
    }
    return {std::move(plan), std::move(desc)};
}

} // namespace metavd
