#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lg/errors.hpp"
#include "lg/ingest.hpp"
#include "lg/sampling.hpp"
#include "lg/synthetic.hpp"
#include "support/sequence_audit.hpp"

using namespace lg;

namespace {

// Small but sampler-friendly cohort.
SyntheticConfig small_cfg(uint64_t seed = 17) {
    SyntheticConfig cfg;
    cfg.n_patients = 60;
    cfg.rng_seed = seed;
    return cfg;
}

Dataset pseudo_labeled_cohort(uint64_t seed = 17) {
    Cohort c = generate_cohort(small_cfg(seed));
    Dataset ds = normalize_cues(c.dataset);
    // pseudo-labels = ground truth for sampler tests
    for (size_t i = 0; i < ds.records.size(); ++i) {
        ds.records[i].cues.type_label = c.truth.rows[i].true_type;
    }
    return ds;
}

std::vector<std::array<Vec, 5>> embeddings_for(std::initializer_list<Vec> vs) {
    std::vector<std::array<Vec, 5>> out(1);
    int i = 0;
    for (const Vec& v : vs) out[0][i++] = v;
    return out;
}

}  // namespace

TEST_CASE("sample_sequence: one lesion per class starves") {
    Dataset ds;
    ds.feature_dim = 1;
    std::vector<int> pool;
    for (int i = 0; i < 5; ++i) {
        LesionRecord r;
        r.lesion_id = i;
        r.split = Split::unlabeled;
        r.cues.type_label = i;  // all classes distinct: no valid B anywhere
        r.cues.location = {0.1 * i, 0.0, 0.0};
        r.cues.size = {0.5, 0.4};
        r.feature = {0.0};
        ds.records.push_back(r);
        pool.push_back(i);
    }
    Rng rng(3);
    try {
        sample_sequence(ds, pool, SamplerConfig{}, rng);
        FAIL("expected starvation");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("slot B") != std::string::npos);
    }
}

TEST_CASE("sample_sequence: sequences pass the independent audit") {
    const Dataset ds = pseudo_labeled_cohort();
    const std::vector<int> pool = training_pool(ds);
    REQUIRE(pool.size() > 100);
    Rng rng(5);
    const SamplerConfig cfg;
    for (int i = 0; i < 1000; ++i) {
        const Sequence q = sample_sequence(ds, pool, cfg, rng);
        CHECK(audit_sequence(ds, q, cfg.t_low, cfg.t_high));
    }
}

TEST_CASE("sample_sequence: no cue distance in the dead band is used as similar or dissimilar") {
    const Dataset ds = pseudo_labeled_cohort(23);
    const std::vector<int> pool = training_pool(ds);
    Rng rng(7);
    const SamplerConfig cfg;
    for (int i = 0; i < 300; ++i) {
        const Sequence q = sample_sequence(ds, pool, cfg, rng);
        const auto& A = ds.records[q.a].cues;
        // similar slots strictly below t_low, dissimilar strictly above t_high
        CHECK(location_distance(A, ds.records[q.b].cues) < cfg.t_low);
        CHECK(size_distance(A, ds.records[q.b].cues) < cfg.t_low);
        CHECK(location_distance(A, ds.records[q.c].cues) < cfg.t_low);
        CHECK(size_distance(A, ds.records[q.c].cues) > cfg.t_high);
        CHECK(location_distance(A, ds.records[q.d].cues) > cfg.t_high);
    }
}

TEST_CASE("sample_sequence: forbid_same_patient keeps the anchor's patient out") {
    const Dataset ds = pseudo_labeled_cohort(29);
    const std::vector<int> pool = training_pool(ds);
    Rng rng(11);
    SamplerConfig cfg;
    cfg.forbid_same_patient = true;
    cfg.max_redraws = 500;
    for (int i = 0; i < 50; ++i) {
        const Sequence q = sample_sequence(ds, pool, cfg, rng);
        const int64_t patient = ds.records[q.a].patient_id;
        for (int idx : {q.b, q.c, q.d, q.e}) CHECK(ds.records[idx].patient_id != patient);
    }
}

TEST_CASE("hierarchical loss: all-identical embeddings") {
    const Vec u{1, 0};
    const auto res = hierarchical_triplet_loss(embeddings_for({u, u, u, u, u}), MarginConfig{});
    CHECK(res.loss == doctest::Approx(0.35).epsilon(1e-12));
}

TEST_CASE("hierarchical loss: hand-evaluated two-dimensional case") {
    const Vec a{1, 0}, c{0, 1}, e{-1, 0};
    const auto res = hierarchical_triplet_loss(embeddings_for({a, a, c, c, e}), MarginConfig{});
    CHECK(res.loss == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("hierarchical loss: satisfied margins give zero loss and zero gradients") {
    // d2_AB = 0, d2_AC = 2, d2_AD = 3, d2_AE = 4 on the 3-sphere
    const Vec a{1, 0, 0, 0};
    const Vec c{0, 1, 0, 0};                    // d2 = 2
    const Vec d{-0.5, std::sqrt(0.75), 0, 0};   // d2 = 3
    const Vec e{-1, 0, 0, 0};                   // d2 = 4
    const auto res = hierarchical_triplet_loss(embeddings_for({a, a, c, d, e}), MarginConfig{});
    CHECK(res.loss == 0.0);
    for (int r = 0; r < 5; ++r) {
        for (double g : res.grads[0][r]) CHECK(g == 0.0);
    }
}

TEST_CASE("hierarchical loss: non-negative, zero iff all hinges satisfied") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::array<Vec, 5>> embs(2);
        for (auto& seq : embs) {
            for (auto& v : seq) {
                v.resize(4);
                double n = 0;
                for (double& x : v) {
                    x = rng.normal();
                    n += x * x;
                }
                n = std::sqrt(n);
                for (double& x : v) x /= n;
            }
        }
        const auto res = hierarchical_triplet_loss(embs, MarginConfig{});
        CHECK(res.loss >= 0.0);
    }
}

TEST_CASE("hierarchical loss: permuting sequences preserves loss and summed gradients") {
    Rng rng(19);
    std::vector<std::array<Vec, 5>> embs(4);
    for (auto& seq : embs) {
        for (auto& v : seq) {
            v.resize(3);
            for (double& x : v) x = rng.normal();
        }
    }
    const auto res1 = hierarchical_triplet_loss(embs, MarginConfig{});
    std::vector<std::array<Vec, 5>> shuffled{embs[2], embs[0], embs[3], embs[1]};
    const auto res2 = hierarchical_triplet_loss(shuffled, MarginConfig{});
    CHECK(res1.loss == doctest::Approx(res2.loss).epsilon(1e-15));
    Vec sum1(3, 0.0), sum2(3, 0.0);
    for (size_t s = 0; s < embs.size(); ++s) {
        for (int r = 0; r < 5; ++r) {
            for (int j = 0; j < 3; ++j) {
                sum1[j] += res1.grads[s][r][j];
                sum2[j] += res2.grads[s][r][j];
            }
        }
    }
    for (int j = 0; j < 3; ++j) CHECK(sum1[j] == doctest::Approx(sum2[j]).epsilon(1e-12));
}

TEST_CASE("hierarchical loss: margins must be increasing") {
    MarginConfig bad;
    bad.m2 = 0.05;
    CHECK_THROWS_AS(
        hierarchical_triplet_loss(embeddings_for({Vec{1}, Vec{1}, Vec{1}, Vec{1}, Vec{1}}), bad),
        ValidationError);
}

TEST_CASE("train_triplet: zero iterations changes nothing") {
    const Dataset ds = pseudo_labeled_cohort();
    const std::vector<int> pool = training_pool(ds);
    Rng init(3), train(4);
    Mlp net = make_mlp({ds.feature_dim, 8, 4}, true, init);
    const Mlp before = net;
    SGDConfig cfg;
    cfg.max_iterations = 0;
    const auto history = train_triplet(ds, pool, net, cfg, SamplerConfig{}, MarginConfig{}, train);
    CHECK(history.empty());
    for (int l = 0; l < net.n_layers(); ++l) CHECK(net.weights[l].a == before.weights[l].a);
}

TEST_CASE("train_triplet: loss trend and lr switch") {
    const Dataset ds = pseudo_labeled_cohort();
    const std::vector<int> pool = training_pool(ds);
    Rng init(3), train(4);
    Mlp net = make_mlp({ds.feature_dim, 16, 8}, true, init);
    SGDConfig cfg;
    cfg.max_iterations = 2200;
    const auto history = train_triplet(ds, pool, net, cfg, SamplerConfig{}, MarginConfig{}, train);
    REQUIRE(history.size() == 2200);
    CHECK(history[1999].lr == 0.002);
    CHECK(history[2000].lr == 0.0002);
    double first = 0, last = 0;
    for (int i = 0; i < 100; ++i) {
        first += history[i].loss;
        last += history[history.size() - 100 + i].loss;
    }
    CHECK(last / 100 < first / 100);
}

TEST_CASE("train_triplet is deterministic under a fixed rng") {
    const Dataset ds = pseudo_labeled_cohort();
    const std::vector<int> pool = training_pool(ds);
    auto run = [&] {
        Rng init(3), train(4);
        Mlp net = make_mlp({ds.feature_dim, 8, 4}, true, init);
        SGDConfig cfg;
        cfg.max_iterations = 50;
        train_triplet(ds, pool, net, cfg, SamplerConfig{}, MarginConfig{}, train);
        return net;
    };
    const Mlp a = run(), b = run();
    for (int l = 0; l < a.n_layers(); ++l) CHECK(a.weights[l].a == b.weights[l].a);
}
