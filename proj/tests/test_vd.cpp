#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "metavd/gradcheck.hpp"
#include "metavd/vd.hpp"

using namespace metavd;

namespace {

DropoutVector dv_of(std::vector<double> log_alpha) {
    size_t n = log_alpha.size();
    DropoutVector dv;
    dv.log_alpha = Tensor({1, n}, std::move(log_alpha));
    return dv;
}

} // namespace

TEST_CASE("kl_term: closed-form anchor values") {
    CHECK(kl_term(dv_of({0.0})) == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-13));
    double near_zero = kl_term(dv_of({8.0}));
    CHECK(near_zero == doctest::Approx(0.5 * std::log1p(std::exp(-8.0))).epsilon(1e-13));
    CHECK(near_zero < 2e-4);
    CHECK(near_zero > 0.0);
    CHECK(kl_term(dv_of({0.0, 0.0, 0.0})) == doctest::Approx(3 * 0.5 * std::log(2.0)).epsilon(1e-13));
}

TEST_CASE("kl_term: positive and strictly decreasing per coordinate") {
    Rng rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        double a = rng.uniform(-8.0, 8.0);
        double bump = rng.uniform(1e-3, 2.0);
        double b = std::min(a + bump, 8.0);
        if (b <= a) continue;
        double ka = kl_term(dv_of({a}));
        double kb = kl_term(dv_of({b}));
        CHECK(ka > 0.0);
        CHECK(kb < ka);
    }
}

TEST_CASE("kl_gradient: matches finite differences and is negative") {
    GradCheckResult r = check_kl_gradient(1234, 100, 1e-8);
    CHECK(r.pass);
    CHECK(r.max_rel_err < 1e-8);

    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor g = kl_gradient(dv_of({rng.uniform(-8.0, 8.0)}));
        CHECK(g.v[0] < 0.0);
    }
    Tensor saturated = kl_gradient(dv_of({8.0}));
    CHECK(std::fabs(saturated.v[0]) < 1e-3);
}

TEST_CASE("gradcheck machinery flags a sign-flipped gradient") {
    DropoutVector dv = dv_of({0.3});
    double flipped = -kl_gradient(dv).v[0];
    auto f = [](const std::vector<double>& x) { return kl_term(DropoutVector{Tensor({1}, {x[0]})}); };
    double numeric = central_difference(f, {0.3}, 0, 1e-5);
    CHECK(grad_rel_error(flipped, numeric, 1e-3) > 1e-2);
}

TEST_CASE("dropout_rate: rate conversion") {
    Tensor p = dropout_rate(dv_of({-8.0, std::log(4.0), 0.0}));
    CHECK(p.v[0] == doctest::Approx(3.3535e-4).epsilon(1e-2));
    CHECK(p.v[0] < 4e-4);
    CHECK(p.v[1] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(p.v[2] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("elbo: beta 0 equals the plain network objective with frozen noise") {
    MlpSpec spec;
    spec.layer_sizes = {3, 4, 2};
    spec.vd_layer = 0;
    Rng rng(21);
    ModelParams p = init_mlp(spec, rng);
    DropoutVector dv;
    dv.log_alpha = Tensor::zeros({3, 4});
    for (double& la : dv.log_alpha.v) la = rng.uniform(-2.0, 2.0);
    Batch batch;
    batch.x = Tensor({2, 3}, {0.4, -0.8, 1.0, -0.2, 0.9, 0.1});
    batch.y = {0, 1};

    ElboConfig cfg;
    cfg.beta = 0.0;
    cfg.noise_seed = 77;
    cfg.dataset_size = 10;
    ElboResult r = elbo_loss_and_grads(spec, p, dv, batch, cfg);

    VdForward vd{&dv.log_alpha, 77};
    auto [logits, cache] = forward(spec, p, batch.x, vd);
    auto xent = softmax_cross_entropy(logits, batch.y);
    auto back = backward(spec, p, cache, xent.logit_cotangent);

    CHECK(r.loss == xent.mean_loss);
    for (size_t l = 0; l < back.params.layers.size(); ++l) {
        for (size_t k = 0; k < back.params.layers[l].w.v.size(); ++k) {
            CHECK(r.grads_theta.layers[l].w.v[k] == back.params.layers[l].w.v[k]);
        }
    }
    for (size_t k = 0; k < back.log_alpha.v.size(); ++k) {
        CHECK(r.grads_log_alpha.v[k] == back.log_alpha.v[k]);
    }
}

TEST_CASE("elbo: log-alpha gradient decomposes into noise path plus scaled KL gradient") {
    MlpSpec spec;
    spec.layer_sizes = {2, 3, 2};
    spec.vd_layer = 0;
    Rng rng(31);
    ModelParams p = init_mlp(spec, rng);
    DropoutVector dv;
    dv.log_alpha = Tensor({2, 3}, {-1.0, 0.5, 0.2, -0.3, 1.4, -2.0});
    Batch batch;
    batch.x = Tensor({2, 2}, {0.7, -0.5, 1.2, 0.8});
    batch.y = {1, 0};

    ElboConfig cfg;
    cfg.beta = 3.0;
    cfg.noise_seed = 5;
    cfg.dataset_size = 24;
    ElboResult full = elbo_loss_and_grads(spec, p, dv, batch, cfg);

    ElboConfig nll_only = cfg;
    nll_only.beta = 0.0;
    ElboResult noise_path = elbo_loss_and_grads(spec, p, dv, batch, nll_only);
    Tensor klg = kl_gradient(dv);

    for (size_t k = 0; k < full.grads_log_alpha.v.size(); ++k) {
        double expected = noise_path.grads_log_alpha.v[k] + (3.0 / 24.0) * klg.v[k];
        CHECK(full.grads_log_alpha.v[k] == doctest::Approx(expected).epsilon(1e-14));
    }
    CHECK(full.loss == doctest::Approx(noise_path.loss + 3.0 * kl_term(dv) / 24.0).epsilon(1e-14));
}

TEST_CASE("elbo: zero noise with beta 0 equals the deterministic-network gradient") {
    MlpSpec spec;
    spec.layer_sizes = {2, 3, 2};
    spec.vd_layer = 0;
    Rng rng(43);
    ModelParams p = init_mlp(spec, rng);
    DropoutVector dv;
    dv.log_alpha = Tensor::full({2, 3}, 0.8);
    Batch batch;
    batch.x = Tensor({1, 2}, {0.6, -1.1});
    batch.y = {1};
    Tensor zero_eps = Tensor::zeros({2, 3});

    ElboConfig cfg;
    cfg.beta = 0.0;
    cfg.dataset_size = 4;
    cfg.fixed_noise = &zero_eps;
    ElboResult noisy = elbo_loss_and_grads(spec, p, dv, batch, cfg);

    auto [logits, cache] = forward(spec, p, batch.x);
    auto xent = softmax_cross_entropy(logits, batch.y);
    auto back = backward(spec, p, cache, xent.logit_cotangent);

    CHECK(noisy.loss == doctest::Approx(xent.mean_loss).epsilon(1e-14));
    for (size_t l = 0; l < back.params.layers.size(); ++l) {
        for (size_t k = 0; k < back.params.layers[l].w.v.size(); ++k) {
            CHECK(noisy.grads_theta.layers[l].w.v[k] ==
                  doctest::Approx(back.params.layers[l].w.v[k]).epsilon(1e-12));
        }
    }
}

TEST_CASE("elbo: bitwise deterministic for fixed inputs") {
    MlpSpec spec;
    spec.layer_sizes = {3, 3, 2};
    spec.vd_layer = 0;
    Rng rng(55);
    ModelParams p = init_mlp(spec, rng);
    DropoutVector dv;
    dv.log_alpha = Tensor::full({3, 3}, -0.5);
    Batch batch;
    batch.x = Tensor({2, 3}, {0.2, 0.4, -0.7, 1.0, -0.1, 0.3});
    batch.y = {0, 1};
    ElboConfig cfg;
    cfg.beta = 2.0;
    cfg.noise_seed = 909;
    cfg.dataset_size = 6;

    ElboResult a = elbo_loss_and_grads(spec, p, dv, batch, cfg);
    ElboResult b = elbo_loss_and_grads(spec, p, dv, batch, cfg);
    CHECK(std::memcmp(&a.loss, &b.loss, sizeof(double)) == 0);
    CHECK(std::memcmp(a.grads_log_alpha.v.data(), b.grads_log_alpha.v.data(),
                      a.grads_log_alpha.size() * sizeof(double)) == 0);
    for (size_t l = 0; l < a.grads_theta.layers.size(); ++l) {
        CHECK(std::memcmp(a.grads_theta.layers[l].w.v.data(), b.grads_theta.layers[l].w.v.data(),
                          a.grads_theta.layers[l].w.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("elbo: full gradient matches finite differences") {
    GradCheckResult r = check_elbo_gradients(4321, 25, 1e-5);
    CHECK(r.pass);
    CHECK(r.coords_checked > 500);
}

TEST_CASE("compression_mask: threshold semantics") {
    SUBCASE("everything kept at minimal dropout") {
        DropoutVector dv = make_dropout_vector({2, 2}, -8.0);
        BoolMask mask = compression_mask(dv, 0.8);
        for (uint8_t keep : mask.keep) CHECK(keep == 1);
    }
    SUBCASE("threshold 0.8 keeps alpha <= 4") {
        DropoutVector dv = dv_of({std::log(3.999), std::log(4.0), std::log(4.001)});
        BoolMask mask = compression_mask(dv, 0.8);
        CHECK(mask.keep[0] == 1);
        CHECK(mask.keep[1] == 1); // p = 0.8 exactly stays
        CHECK(mask.keep[2] == 0);
    }
    SUBCASE("mixed vector example") {
        DropoutVector dv = dv_of({std::log(1.0), std::log(5.0), std::log(3.0), std::log(9.0)});
        BoolMask mask = compression_mask(dv, 0.8);
        CHECK(mask.keep[0] == 1);
        CHECK(mask.keep[1] == 0);
        CHECK(mask.keep[2] == 1);
        CHECK(mask.keep[3] == 0);
        size_t dropped = 0;
        for (uint8_t k : mask.keep) dropped += k ? 0 : 1;
        CHECK(dropped == 2);
    }
    SUBCASE("invalid thresholds rejected") {
        DropoutVector dv = make_dropout_vector({1, 1}, 0.0);
        CHECK_THROWS_AS(compression_mask(dv, 0.0), KernelError);
        CHECK_THROWS_AS(compression_mask(dv, 1.0), KernelError);
    }
}

TEST_CASE("compression_mask: kept count is monotone in the threshold") {
    Rng rng(77);
    DropoutVector dv;
    dv.log_alpha = Tensor::zeros({4, 8});
    for (double& la : dv.log_alpha.v) la = rng.uniform(-8.0, 8.0);
    size_t prev_kept = 0;
    for (double t : {0.05, 0.2, 0.5, 0.8, 0.95}) {
        BoolMask mask = compression_mask(dv, t);
        size_t kept = 0;
        for (uint8_t k : mask.keep) kept += k;
        CHECK(kept >= prev_kept);
        prev_kept = kept;
    }
}

TEST_CASE("clamp keeps log alpha in the working range") {
    DropoutVector dv = dv_of({-20.0, 20.0, 0.5});
    clamp(dv);
    CHECK(dv.log_alpha.v[0] == -8.0);
    CHECK(dv.log_alpha.v[1] == 8.0);
    CHECK(dv.log_alpha.v[2] == 0.5);
}
