#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>

#include "lg/errors.hpp"
#include "lg/net.hpp"
#include "lg/rng.hpp"
#include "support/scratch.hpp"

using namespace lg;

namespace {

double norm_of(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

Mlp identity_2x2() {
    Rng rng(1);
    Mlp p = make_mlp({2, 2}, true, rng);
    p.weights[0](0, 0) = 1;
    p.weights[0](0, 1) = 0;
    p.weights[0](1, 0) = 0;
    p.weights[0](1, 1) = 1;
    p.biases[0] = {0, 0};
    return p;
}

}  // namespace

TEST_CASE("forward: identity single layer normalizes") {
    const Mlp p = identity_2x2();
    const Embedding e = forward(p, Vec{3, 4});
    CHECK(e.values[0] == doctest::Approx(0.6).epsilon(1e-9));
    CHECK(e.values[1] == doctest::Approx(0.8).epsilon(1e-9));
}

TEST_CASE("forward output is unit norm, or zero when every hidden unit is dead") {
    Rng rng(5);
    const Mlp p = make_mlp({6, 8, 4}, true, rng);
    int unit = 0;
    for (int i = 0; i < 100; ++i) {
        Vec x(6);
        for (double& v : x) v = rng.normal(0, 3);
        const Vec y = forward_one(p, x);
        const double n = norm_of(y);
        if (n == 0.0) continue;  // zero pre-normalization vector maps to zero
        CHECK(n == doctest::Approx(1.0).epsilon(1e-6));
        ++unit;
    }
    CHECK(unit > 90);
}

TEST_CASE("forward: zero input stays finite") {
    const Mlp p = identity_2x2();
    const Vec y = forward_one(p, Vec{0, 0});
    CHECK(std::isfinite(y[0]));
    CHECK(std::isfinite(y[1]));
    CHECK(norm_of(y) == 0.0);  // zero pre-normalization vector maps to zero
}

TEST_CASE("backward: zero output gradient gives zero parameter gradient") {
    Rng rng(9);
    const Mlp p = make_mlp({4, 5, 3}, true, rng);
    std::vector<Vec> batch{{0.1, -0.2, 0.3, 0.4}, {1.0, 0.5, -0.5, 0.2}};
    const ForwardCache cache = forward_batch(p, batch);
    const MlpGrads g = backward(p, cache, {Vec(3, 0.0), Vec(3, 0.0)});
    for (const auto& w : g.weights) {
        for (double v : w.a) CHECK(v == 0.0);
    }
    for (const auto& b : g.biases) {
        for (double v : b) CHECK(v == 0.0);
    }
}

TEST_CASE("backward: dead ReLU unit receives no gradient") {
    Rng rng(2);
    Mlp p = make_mlp({2, 2, 2}, false, rng);
    // unit 0 dead for this input, unit 1 alive
    p.weights[0](0, 0) = -1;
    p.weights[0](0, 1) = 0;
    p.weights[0](1, 0) = 1;
    p.weights[0](1, 1) = 0;
    p.biases[0] = {0, 0};
    std::vector<Vec> batch{{1.0, 0.5}};
    const ForwardCache cache = forward_batch(p, batch);
    const MlpGrads g = backward(p, cache, {Vec{1.0, 1.0}});
    CHECK(g.weights[0](0, 0) == 0.0);  // dead unit's incoming weights
    CHECK(g.weights[0](0, 1) == 0.0);
    CHECK(g.biases[0][0] == 0.0);
    CHECK(g.weights[0](1, 0) != 0.0);
}

TEST_CASE("backward matches central finite differences on random nets") {
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        const Mlp p = make_mlp({4, 6, 3}, true, rng);
        // quadratic loss against a target; fresh batch whenever the checker re-draws
        BatchLossGen gen = [](Rng& r) -> ParamLossFn {
            auto batch = std::make_shared<std::vector<Vec>>();
            auto target = std::make_shared<Vec>(3);
            for (double& v : *target) v = r.normal();
            for (int i = 0; i < 4; ++i) {
                Vec x(4);
                for (double& v : x) v = r.normal();
                batch->push_back(x);
            }
            return [batch, target](const Mlp& q) {
                const ForwardCache cache = forward_batch(q, *batch);
                LossEval ev;
                std::vector<Vec> grad_out(batch->size());
                for (size_t i = 0; i < batch->size(); ++i) {
                    grad_out[i].resize(target->size());
                    for (size_t j = 0; j < target->size(); ++j) {
                        const double d = cache.outputs[i][j] - (*target)[j];
                        ev.loss += 0.5 * d * d;
                        grad_out[i][j] = d;
                    }
                }
                ev.grads = backward(q, cache, grad_out);
                ev.min_kink_distance = cache.min_kink_distance;
                return ev;
            };
        };
        CHECK(grad_check(p, gen, rng) < 1e-4);
    }
}

TEST_CASE("grad_check: linear net with quadratic loss is near machine precision") {
    Rng rng(23);
    const Mlp p = make_mlp({3, 2}, false, rng);
    auto batch = std::make_shared<std::vector<Vec>>();
    for (int i = 0; i < 3; ++i) {
        Vec x(3);
        for (double& v : x) v = rng.normal();
        batch->push_back(x);
    }
    BatchLossGen gen = [batch](Rng&) -> ParamLossFn {
        return [batch](const Mlp& q) {
            const ForwardCache cache = forward_batch(q, *batch);
            LossEval ev;
            std::vector<Vec> grad_out(batch->size());
            for (size_t i = 0; i < batch->size(); ++i) {
                grad_out[i].resize(2);
                for (size_t j = 0; j < 2; ++j) {
                    ev.loss += 0.5 * cache.outputs[i][j] * cache.outputs[i][j];
                    grad_out[i][j] = cache.outputs[i][j];
                }
            }
            ev.grads = backward(q, cache, grad_out);
            ev.min_kink_distance = cache.min_kink_distance;
            return ev;
        };
    };
    CHECK(grad_check(p, gen, rng) < 1e-7);
}

TEST_CASE("grad_check result is invariant to batch ordering") {
    Rng rng(31);
    const Mlp p = make_mlp({3, 4, 2}, true, rng);
    std::vector<Vec> items;
    for (int i = 0; i < 4; ++i) {
        Vec x(3);
        for (double& v : x) v = rng.normal();
        items.push_back(x);
    }
    auto make_gen = [&](std::vector<Vec> batch) -> BatchLossGen {
        auto shared = std::make_shared<std::vector<Vec>>(std::move(batch));
        return [shared](Rng&) -> ParamLossFn {
            return [shared](const Mlp& q) {
                const ForwardCache cache = forward_batch(q, *shared);
                LossEval ev;
                std::vector<Vec> grad_out(shared->size());
                for (size_t i = 0; i < shared->size(); ++i) {
                    grad_out[i].resize(2);
                    for (size_t j = 0; j < 2; ++j) {
                        ev.loss += 0.5 * cache.outputs[i][j] * cache.outputs[i][j];
                        grad_out[i][j] = cache.outputs[i][j];
                    }
                }
                ev.grads = backward(q, cache, grad_out);
                ev.min_kink_distance = cache.min_kink_distance;
                return ev;
            };
        };
    };
    Rng r1(1), r2(1);
    const double forward_err = grad_check(p, make_gen(items), r1);
    std::vector<Vec> reversed(items.rbegin(), items.rend());
    const double reversed_err = grad_check(p, make_gen(reversed), r2);
    CHECK(forward_err == doctest::Approx(reversed_err).epsilon(1e-6));
}

TEST_CASE("sgd_step: learning rate schedule") {
    const SGDConfig cfg;
    CHECK(learning_rate_at(cfg, 0) == 0.002);
    CHECK(learning_rate_at(cfg, 1999) == 0.002);
    CHECK(learning_rate_at(cfg, 2000) == 0.0002);
    CHECK(learning_rate_at(cfg, 2999) == 0.0002);
}

TEST_CASE("sgd_step: zero gradients leave parameters unchanged") {
    Rng rng(3);
    Mlp p = make_mlp({3, 2}, true, rng);
    const Mlp before = p;
    sgd_step(p, zero_grads(p), SGDConfig{}, 0);
    CHECK(p.weights[0].a == before.weights[0].a);
    CHECK(p.biases[0] == before.biases[0]);
}

TEST_CASE("sgd_step: one step on a scalar quadratic") {
    // f(w) = (w - 3)^2 / 2, grad at w=0 is -3; lr 0.002 gives w = 0.006
    Rng rng(3);
    Mlp p = make_mlp({1, 1}, false, rng);
    p.weights[0](0, 0) = 0.0;
    MlpGrads g = zero_grads(p);
    g.weights[0](0, 0) = -3.0;
    sgd_step(p, g, SGDConfig{}, 0);
    CHECK(p.weights[0](0, 0) == doctest::Approx(0.006).epsilon(1e-12));
}

TEST_CASE("sgd_step: non-finite gradient aborts") {
    Rng rng(3);
    Mlp p = make_mlp({2, 2}, true, rng);
    MlpGrads g = zero_grads(p);
    g.weights[0](0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(sgd_step(p, g, SGDConfig{}, 5), Error);
}

TEST_CASE("checkpoint round-trip") {
    Rng rng(41);
    const Mlp p = make_mlp({5, 7, 3}, false, rng);
    const std::string dir = test_scratch_dir("net_ckpt");
    save_checkpoint(p, dir + "/m.lgm", "{\"l2_output\": false, \"iterations\": 42}");
    const Mlp q = load_checkpoint(dir + "/m.lgm");
    CHECK(q.layer_dims == p.layer_dims);
    CHECK(q.l2_output == false);
    for (int l = 0; l < p.n_layers(); ++l) {
        CHECK(q.weights[l].a == p.weights[l].a);
        CHECK(q.biases[l] == p.biases[l]);
    }
    CHECK(load_checkpoint_sidecar(dir + "/m.lgm").find("42") != std::string::npos);

    SUBCASE("bad magic") {
        write_file(dir + "/junk.lgm", "NOPE....");
        CHECK_THROWS_AS(load_checkpoint(dir + "/junk.lgm"), ValidationError);
    }
}

TEST_CASE("training is reproducible for a fixed seed") {
    auto run = [] {
        Rng rng(77);
        Mlp p = make_mlp({3, 4, 2}, true, rng);
        std::vector<Vec> batch;
        for (int i = 0; i < 6; ++i) {
            Vec x(3);
            for (double& v : x) v = rng.normal();
            batch.push_back(x);
        }
        SGDConfig cfg;
        for (int it = 0; it < 50; ++it) {
            const ForwardCache cache = forward_batch(p, batch);
            std::vector<Vec> grad_out(batch.size());
            for (size_t i = 0; i < batch.size(); ++i) {
                grad_out[i].resize(2);
                for (size_t j = 0; j < 2; ++j) grad_out[i][j] = cache.outputs[i][j];
            }
            sgd_step(p, backward(p, cache, grad_out), cfg, it);
        }
        return p;
    };
    const Mlp a = run();
    const Mlp b = run();
    for (int l = 0; l < a.n_layers(); ++l) {
        CHECK(a.weights[l].a == b.weights[l].a);  // bit-identical
        CHECK(a.biases[l] == b.biases[l]);
    }
}
