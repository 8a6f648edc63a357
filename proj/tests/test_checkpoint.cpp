#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "metavd/checkpoint.hpp"

using namespace metavd;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

ServerState make_state(VdMode mode, AlgoConfig& cfg) {
    MlpSpec spec;
    spec.layer_sizes = {4, 6, 6, 3};
    if (mode != VdMode::off) spec.vd_layer = 1;
    cfg.method = Method::reptile;
    cfg.metavd = mode;
    cfg.beta = 3.25;
    cfg.eta = 0.8;
    return init_server(spec, cfg, 7, 0x1234567890abcdefull);
}

} // namespace

TEST_CASE("checkpoint: save-load-save is byte identical across modes") {
    for (VdMode mode : {VdMode::off, VdMode::metavd, VdMode::global_vd, VdMode::ensemble_vd}) {
        AlgoConfig cfg;
        ServerState state = make_state(mode, cfg);
        state.round = 41;

        std::string p1 = temp_path("metavd_ckpt_1.mvd");
        std::string p2 = temp_path("metavd_ckpt_2.mvd");
        save_checkpoint(p1, state, cfg);
        auto [loaded, loaded_cfg] = load_checkpoint(p1);
        save_checkpoint(p2, loaded, loaded_cfg);
        CHECK(slurp(p1) == slurp(p2));

        CHECK(loaded.round == 41);
        CHECK(loaded.seed == state.seed);
        CHECK(loaded_cfg.beta == cfg.beta);
        CHECK(loaded_cfg.metavd == mode);
        CHECK(loaded.spec.layer_sizes == state.spec.layer_sizes);
        CHECK(loaded.theta.layers.size() == state.theta.layers.size());
        for (size_t l = 0; l < state.theta.layers.size(); ++l) {
            CHECK(loaded.theta.layers[l].w.v == state.theta.layers[l].w.v);
        }
        if (mode == VdMode::metavd) {
            CHECK(loaded.hyper.embeddings.v == state.hyper.embeddings.v);
            CHECK(loaded.hyper.net.layer_sizes == state.hyper.net.layer_sizes);
        }
        if (mode == VdMode::ensemble_vd) {
            CHECK(loaded.ensemble.size() == state.ensemble.size());
        }
        std::remove(p1.c_str());
        std::remove(p2.c_str());
    }
}

TEST_CASE("checkpoint: unknown magic and truncation are rejected") {
    std::string path = temp_path("metavd_ckpt_bad.mvd");
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "NOPE then some garbage bytes";
    }
    try {
        read_entries(path);
        FAIL("expected bad magic to throw");
    } catch (const CheckpointError& e) {
        CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }

    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "MV";
    }
    CHECK_THROWS_AS(read_entries(path), CheckpointError);
    CHECK_THROWS_AS(read_entries(temp_path("does_not_exist.mvd")), CheckpointError);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint: missing entries are reported by name") {
    std::string path = temp_path("metavd_ckpt_partial.mvd");
    write_entries(path, {{"cfg/method", Tensor({1}, {0.0})}});
    try {
        load_checkpoint(path);
        FAIL("expected a missing-entry error");
    } catch (const CheckpointError& e) {
        CHECK(std::string(e.what()).find("missing entry") != std::string::npos);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint: entry payload round-trips exactly") {
    std::string path = temp_path("metavd_entries.mvd");
    Tensor t({2, 3}, {1.5, -2.25, 3.0e-17, 4.0, -0.0, 1e300});
    write_entries(path, {{"a/b", t}, {"c", Tensor({1}, {42.0})}});
    auto entries = read_entries(path);
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].name == "a/b");
    CHECK(entries[0].data.shape == t.shape);
    CHECK(entries[0].data.v == t.v);
    CHECK(entries[1].data.v[0] == 42.0);
    std::remove(path.c_str());
}
