// Experiment driver: partition / train / evaluate / compress / gradcheck
// subcommands over the simulation engine. Exit codes: 0 success, 2 usage or
// config error, 3 runtime error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "metavd/checkpoint.hpp"
#include "metavd/config.hpp"
#include "metavd/engine.hpp"
#include "metavd/gradcheck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir_flag;
    long threads = -1;
};

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) {
        throw metavd::ConfigError(std::string(what) + " not found: " + path);
    }
}

metavd::RunConfig load_run_config(const CommonArgs& args) {
    require_file(args.config_path, "config file");
    metavd::RunConfig cfg = metavd::parse_config_file(args.config_path);
    for (const auto& o : args.overrides) metavd::apply_override(cfg, o);
    if (!args.out_dir_flag.empty()) {
        cfg.out_dir = args.out_dir_flag;
    } else if (const char* env = std::getenv("METAVD_OUT_DIR"); env && *env && cfg.out_dir == "runs") {
        cfg.out_dir = env;
    }
    if (args.threads > 0) cfg.algo.threads = static_cast<size_t>(args.threads);
    cfg.validate();
    return cfg;
}

json report_to_json(const metavd::EvalReport& report) {
    json j;
    j["test_acc"] = report.test_acc;
    j["ood_acc"] = report.ood_acc;
    j["gap"] = report.gap;
    j["ece"] = report.ece;
    j["mce"] = report.mce;
    j["sparsity"] = report.sparsity;
    return j;
}

void write_reliability_csv(const std::string& path, const std::vector<metavd::ReliabilityBin>& bins) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw metavd::EngineError("cannot open " + path);
    out << "bin,mean_confidence,accuracy,count\n";
    for (size_t b = 0; b < bins.size(); ++b) {
        out << b << "," << bins[b].mean_confidence << "," << bins[b].accuracy << "," << bins[b].count << "\n";
    }
}

int cmd_partition(const CommonArgs& args) {
    metavd::RunConfig cfg = load_run_config(args);
    metavd::PreparedData run = metavd::prepare_run_data(cfg);
    fs::create_directories(cfg.out_dir);
    std::string plan_path = (fs::path(cfg.out_dir) / "plan.json").string();
    metavd::save_plan(plan_path, run.plan, run.desc);

    // Per-client class histogram summary.
    json summary = json::array();
    for (size_t m = 0; m < run.plan.num_clients(); ++m) {
        std::map<int, size_t> hist;
        for (size_t idx : run.plan.assignments[m]) hist[run.dataset.y[idx]] += 1;
        json h;
        h["client"] = m;
        h["size"] = run.plan.assignments[m].size();
        h["ood"] = run.plan.is_ood(m);
        json classes = json::object();
        for (const auto& [label, count] : hist) classes[std::to_string(label)] = count;
        h["classes"] = std::move(classes);
        summary.push_back(std::move(h));
    }
    std::string hist_path = (fs::path(cfg.out_dir) / "histogram.json").string();
    std::ofstream hout(hist_path, std::ios::trunc);
    hout << summary.dump(2) << "\n";

    std::cout << "wrote " << plan_path << " and " << hist_path << "\n";
    return kExitOk;
}

int cmd_train(const CommonArgs& args) {
    metavd::RunConfig cfg = load_run_config(args);
    metavd::PreparedData run = metavd::prepare_run_data(cfg);
    fs::create_directories(cfg.out_dir);
    metavd::save_plan((fs::path(cfg.out_dir) / "plan.json").string(), run.plan, run.desc);

    metavd::ClientRegistry registry(run.dataset, run.plan);
    metavd::MlpSpec spec = cfg.make_spec(run.dataset.dim(), run.dataset.num_classes);
    metavd::ServerState state = metavd::init_server(spec, cfg.algo, cfg.num_clients, cfg.seed);

    std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    std::string timing_path = (fs::path(cfg.out_dir) / "timings.jsonl").string();
    std::ofstream metrics(metrics_path, std::ios::trunc);
    std::ofstream timings(timing_path, std::ios::trunc);
    if (!metrics || !timings) throw metavd::EngineError("cannot open output files in " + cfg.out_dir);

    metavd::TrainingHistory history;
    {
        double wall_acc = 0.0;
        for (size_t r = 0; r < cfg.algo.rounds; ++r) {
            metavd::RoundMetrics rm = metavd::server_round(state, cfg.algo, registry);
            wall_acc += rm.wall_ms;
            history.rounds.push_back(rm);
            if (cfg.eval_every != 0 && state.round % cfg.eval_every == 0) {
                metavd::EvalReport report = metavd::evaluate(state, cfg.algo, registry, cfg.eval);
                json line = report_to_json(report);
                line["round"] = state.round;
                metrics << line.dump() << "\n";
                metrics.flush();
                json tline;
                tline["round"] = state.round;
                tline["wall_ms"] = wall_acc;
                timings << tline.dump() << "\n";
                timings.flush();
                wall_acc = 0.0;
            }
        }
    }

    std::string ckpt_path = (fs::path(cfg.out_dir) / "checkpoint.mvd").string();
    metavd::save_checkpoint(ckpt_path, state, cfg.algo);
    std::cout << "trained " << cfg.algo.rounds << " rounds; checkpoint " << ckpt_path << "\n";
    return kExitOk;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& plan_path, long mc_samples,
                 long personalize_steps, long bins, const std::string& out_path,
                 const std::string& reliability_path) {
    require_file(ckpt_path, "checkpoint");
    require_file(plan_path, "plan");
    auto [state, algo] = metavd::load_checkpoint(ckpt_path);
    auto [plan, desc] = metavd::load_plan(plan_path);
    metavd::Dataset dataset = metavd::realize_dataset(desc);
    metavd::ClientRegistry registry(dataset, plan);

    metavd::EvalConfig eval_cfg;
    if (bins >= 0) eval_cfg.bins = static_cast<size_t>(bins);
    if (mc_samples >= 0) eval_cfg.mc_samples = static_cast<size_t>(mc_samples);
    if (personalize_steps >= 0) eval_cfg.personalize_steps = static_cast<size_t>(personalize_steps);

    metavd::EvalReport report = metavd::evaluate(state, algo, registry, eval_cfg);
    json j = report_to_json(report);
    j["round"] = state.round;
    j["bins"] = eval_cfg.bins;
    if (eval_cfg.mc_samples > 0) {
        j["mc_samples"] = eval_cfg.mc_samples;
        j["prediction"] = "mc_average";
    } else {
        j["prediction"] = "mean_weights";
    }
    std::cout << j.dump(2) << "\n";
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::trunc);
        out << j.dump(2) << "\n";
    }
    if (!reliability_path.empty()) write_reliability_csv(reliability_path, report.reliability);
    return kExitOk;
}

int cmd_compress(const std::string& ckpt_path, double threshold, const std::string& out_path,
                 const std::string& plan_path) {
    require_file(ckpt_path, "checkpoint");
    if (!plan_path.empty()) require_file(plan_path, "plan");
    auto [state, algo] = metavd::load_checkpoint(ckpt_path);
    if (algo.metavd == metavd::VdMode::off) {
        throw metavd::EngineError("compress: checkpoint was trained without dropout state");
    }

    metavd::DropoutVector dv;
    if (algo.metavd == metavd::VdMode::metavd) {
        // Client-independent prediction at the mean embedding. When a plan is
        // given, average over its training pool; otherwise over all clients.
        std::vector<size_t> clients;
        if (!plan_path.empty()) {
            auto [plan, desc] = metavd::load_plan(plan_path);
            for (size_t m = 0; m < plan.num_clients(); ++m) {
                if (!plan.is_ood(m)) clients.push_back(m);
            }
        } else {
            for (size_t m = 0; m < state.hyper.num_clients(); ++m) clients.push_back(m);
        }
        dv = metavd::predict_log_alpha_mean(state.hyper, clients);
    } else if (algo.metavd == metavd::VdMode::global_vd) {
        dv = state.global_dv;
    } else {
        dv.log_alpha = metavd::Tensor::zeros(state.ensemble.at(0).log_alpha.shape);
        for (const auto& e : state.ensemble) {
            metavd::axpy(dv.log_alpha, 1.0 / static_cast<double>(state.ensemble.size()), e.log_alpha);
        }
    }

    metavd::BoolMask mask = metavd::compression_mask(dv, threshold);
    size_t vd = *state.spec.vd_layer;
    metavd::apply_mask(state.theta.layers[vd].w, mask);
    metavd::save_checkpoint(out_path, state, algo);

    size_t zeros = 0;
    for (double w : state.theta.layers[vd].w.v) {
        if (w == 0.0) ++zeros;
    }
    json j;
    j["threshold"] = threshold;
    j["sparsity"] = metavd::sparsity(mask);
    j["zeroed_weights"] = zeros;
    j["total_weights"] = mask.size();
    j["output"] = out_path;
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_gradcheck(uint64_t seed) {
    auto results = metavd::run_all_gradchecks(seed);
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": max rel err " << r.max_rel_err << " over "
                  << r.coords_checked << " coordinates (tolerance " << r.tolerance << ")\n";
        all_pass = all_pass && r.pass;
    }
    return all_pass ? kExitOk : kExitRuntime;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Meta-variational-dropout federated learning simulator"};
    app.require_subcommand(1);

    CommonArgs partition_args, train_args;
    auto add_common = [](CLI::App* sub, CommonArgs& args) {
        sub->add_option("--config", args.config_path, "Run configuration file")->required();
        sub->add_option("--set", args.overrides, "Override config keys (key=value, last wins)");
        sub->add_option("--out-dir", args.out_dir_flag, "Output directory (overrides config and METAVD_OUT_DIR)");
        sub->add_option("--threads", args.threads, "Cap on concurrent client workers");
    };

    CLI::App* partition = app.add_subcommand("partition", "Generate and save a partition plan");
    add_common(partition, partition_args);

    CLI::App* train = app.add_subcommand("train", "Run federated training");
    add_common(train, train_args);

    std::string eval_ckpt, eval_plan, eval_out, eval_csv;
    long eval_mc = -1, eval_steps = -1, eval_bins = -1;
    CLI::App* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint against a plan");
    evaluate->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    evaluate->add_option("--plan", eval_plan, "Partition plan file")->required();
    evaluate->add_option("--mc-samples", eval_mc, "Monte Carlo prediction samples (0 = mean weights)");
    evaluate->add_option("--personalize-steps", eval_steps, "Adaptation steps before evaluation");
    evaluate->add_option("--bins", eval_bins, "Calibration bins");
    evaluate->add_option("--out", eval_out, "Write the report JSON here");
    evaluate->add_option("--reliability-csv", eval_csv, "Write the reliability table here");

    std::string comp_ckpt, comp_out, comp_plan;
    double comp_threshold = 0.8;
    CLI::App* compress = app.add_subcommand("compress", "Threshold-compress a checkpoint");
    compress->add_option("--checkpoint", comp_ckpt, "Checkpoint file")->required();
    compress->add_option("--threshold", comp_threshold, "Dropout-rate threshold in (0,1)");
    compress->add_option("--out", comp_out, "Compressed checkpoint path")->required();
    compress->add_option("--plan", comp_plan, "Plan file (restricts the mean embedding to the training pool)");

    uint64_t gc_seed = 7;
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "Run the finite-difference oracle suite");
    gradcheck->add_option("--seed", gc_seed, "Oracle seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (partition->parsed()) return cmd_partition(partition_args);
        if (train->parsed()) return cmd_train(train_args);
        if (evaluate->parsed()) {
            return cmd_evaluate(eval_ckpt, eval_plan, eval_mc, eval_steps, eval_bins, eval_out, eval_csv);
        }
        if (compress->parsed()) return cmd_compress(comp_ckpt, comp_threshold, comp_out, comp_plan);
        if (gradcheck->parsed()) return cmd_gradcheck(gc_seed);
    } catch (const metavd::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
