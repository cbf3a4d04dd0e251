#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "lg/errors.hpp"
#include "lg/ingest.hpp"
#include "lg/pseudolabel.hpp"
#include "lg/synthetic.hpp"

using namespace lg;

TEST_CASE("knn: coincident query with k=1 copies the label") {
    const std::vector<Vec> refs{{0, 0}, {5, 5}, {9, 9}};
    const std::vector<int> labels{2, 0, 1};
    const KnnClassifier knn = fit_knn(refs, labels, 1, 3);
    CHECK(knn.predict({5, 5}) == 0);
    CHECK(knn.predict({0, 0}) == 2);
}

TEST_CASE("knn: vote ties break by mean distance, then class index") {
    SUBCASE("mean distance decides") {
        // class 1 at distances 0.8 and 1.2 (mean 1.0), class 0 at 0.9, 0.9 (mean 0.9)
        const std::vector<Vec> refs{{-0.8}, {1.2}, {-0.9}, {0.9}};
        const std::vector<int> labels{1, 1, 0, 0};
        const KnnClassifier knn = fit_knn(refs, labels, 4, 2);
        CHECK(knn.predict({0.0}) == 0);
        // flip which class is nearer on average
        const std::vector<Vec> refs2{{-0.8}, {0.8}, {-0.9}, {0.9}};
        const std::vector<int> labels2{1, 1, 0, 0};
        CHECK(fit_knn(refs2, labels2, 4, 2).predict({0.0}) == 1);
    }
    SUBCASE("full tie goes to the smaller class index") {
        const std::vector<Vec> refs{{-1}, {1}, {-1}, {1}};
        const std::vector<int> labels{1, 1, 0, 0};
        const KnnClassifier knn = fit_knn(refs, labels, 4, 2);
        CHECK(knn.predict({0.0}) == 0);
    }
}

TEST_CASE("knn: prediction invariant to reference permutation") {
    Rng rng(3);
    std::vector<Vec> refs;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        refs.push_back({rng.normal(), rng.normal()});
        labels.push_back(static_cast<int>(rng.index(3)));
    }
    for (int c = 0; c < 3; ++c) labels[c] = c;  // every class present
    const KnnClassifier a = fit_knn(refs, labels, 5, 3);

    std::vector<size_t> perm(refs.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<Vec> refs2;
    std::vector<int> labels2;
    for (size_t i : perm) {
        refs2.push_back(refs[i]);
        labels2.push_back(labels[i]);
    }
    const KnnClassifier b = fit_knn(refs2, labels2, 5, 3);
    for (int i = 0; i < 100; ++i) {
        const Vec q{rng.normal(), rng.normal()};
        CHECK(a.predict(q) == b.predict(q));
    }
}

TEST_CASE("knn: empty class or bad k rejected") {
    const std::vector<Vec> refs{{0}, {1}};
    CHECK_THROWS_AS(fit_knn(refs, {0, 0}, 1, 2), ValidationError);  // class 1 empty
    CHECK_THROWS_AS(fit_knn(refs, {0, 1}, 3, 2), ValidationError);  // k > refs
}

TEST_CASE("fit_and_assign: seeds keep labels, others get pseudo-labels, >99% on clean features") {
    SyntheticConfig cfg;
    cfg.n_patients = 120;
    cfg.rng_seed = 5;
    cfg.feature_noise_sd = 0.0;
    cfg.distractor_sd = 0.0;
    cfg.instance_offset_sd = 0.0;
    Cohort c = generate_cohort(cfg);
    Dataset& ds = c.dataset;

    std::vector<Vec> feats;
    for (const auto& r : ds.records) feats.push_back(r.feature);
    const auto assigned = fit_and_assign(ds, feats, 5, cfg.n_types);

    size_t correct = 0, total = 0;
    for (size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        if (r.split == Split::seed) {
            CHECK(*r.cues.type_label == *r.true_type);  // never overwritten
        } else {
            REQUIRE(r.cues.type_label.has_value());
            ++total;
            if (*r.cues.type_label == c.truth.rows[i].true_type) ++correct;
        }
        CHECK(assigned[i] == *r.cues.type_label);
    }
    CHECK(static_cast<double>(correct) / total > 0.99);
}

TEST_CASE("softmax: separable two-class toy set reaches 100% train accuracy") {
    std::vector<Vec> x;
    std::vector<int> y;
    Rng rng(7);
    for (int i = 0; i < 40; ++i) {
        const double side = i % 2 == 0 ? 1.0 : -1.0;
        x.push_back({side * rng.uniform(0.5, 1.5), rng.normal(0, 0.2)});
        y.push_back(i % 2);
    }
    const SoftmaxResult res = softmax_classify(x, y, x, y, 2);
    CHECK(res.accuracy == 1.0);
    CHECK(res.confusion(0, 1) == 0.0);
    CHECK(res.confusion(1, 0) == 0.0);
}

TEST_CASE("softmax: predictions invariant to adding a constant row to all class weights") {
    std::vector<Vec> x;
    std::vector<int> y;
    Rng rng(9);
    for (int i = 0; i < 60; ++i) {
        const int c = i % 3;
        x.push_back({c * 1.0 + rng.normal(0, 0.1), rng.normal(0, 0.1)});
        y.push_back(c);
    }
    const SoftmaxResult res = softmax_classify(x, y, x, y, 3);
    Matrix shifted = res.weights;
    for (int c = 0; c < shifted.rows; ++c) {
        for (int j = 0; j < shifted.cols; ++j) shifted(c, j) += (j == 0 ? 2.5 : -1.75);
    }
    for (const auto& q : x) {
        CHECK(softmax_predict(res.weights, q) == softmax_predict(shifted, q));
    }
}

TEST_CASE("softmax: reports gradient norm and iteration count") {
    std::vector<Vec> x{{0.0}, {1.0}};
    std::vector<int> y{0, 1};
    const SoftmaxResult res = softmax_classify(x, y, x, y, 2);
    CHECK(res.iterations > 0);
    CHECK(res.final_grad_norm >= 0.0);
}

TEST_CASE("refine: runs unconditionally and reassigns from embeddings") {
    SyntheticConfig cfg;
    cfg.n_patients = 60;
    cfg.rng_seed = 11;
    Cohort c = generate_cohort(cfg);
    Dataset ds = normalize_cues(c.dataset);
    std::vector<Vec> feats;
    for (const auto& r : ds.records) feats.push_back(r.feature);
    fit_and_assign(ds, feats, 5, cfg.n_types);

    Rng init(1);
    Mlp net = make_mlp({ds.feature_dim, 16, 8}, true, init);
    const Mlp before = net;

    Rng rng(2);
    SGDConfig sgd;
    const RefineResult res = refine(ds, net, sgd, SamplerConfig{}, MarginConfig{}, 5,
                                    cfg.n_types, 40, rng);
    CHECK(res.finetune_history.size() == 40);  // fine-tune ran even at a fixed point
    for (const auto& row : res.finetune_history) CHECK(row.lr == sgd.lr_after_drop);
    CHECK(res.pseudo_labels.size() == ds.records.size());
    // parameters moved
    bool changed = false;
    for (int l = 0; l < net.n_layers(); ++l) {
        if (net.weights[l].a != before.weights[l].a) changed = true;
    }
    CHECK(changed);
    // seed labels still equal their annotated labels
    for (const auto& r : ds.records) {
        if (r.split == Split::seed) CHECK(*r.cues.type_label == *r.true_type);
    }
}

TEST_CASE("pseudo_label_accuracy counts unlabeled records only") {
    Dataset ds;
    ds.feature_dim = 1;
    auto add = [&](int id, Split split, int label) {
        LesionRecord r;
        r.lesion_id = id;
        r.split = split;
        r.cues.type_label = label;
        r.feature = {0.0};
        ds.records.push_back(r);
    };
    add(0, Split::seed, 1);
    add(1, Split::unlabeled, 1);
    add(2, Split::unlabeled, 0);
    add(3, Split::test, 0);
    const std::vector<int> truth{1, 1, 1, 1};
    CHECK(pseudo_label_accuracy(ds, truth) == doctest::Approx(0.5));
}
