#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lg/errors.hpp"
#include "lg/model.hpp"
#include "lg/rng.hpp"

using namespace lg;

namespace {

Vec random_unit(int dim, Rng& rng) {
    Vec v(dim);
    double n = 0.0;
    for (double& x : v) {
        x = rng.normal();
        n += x * x;
    }
    n = std::sqrt(n);
    for (double& x : v) x /= n;
    return v;
}

}  // namespace

TEST_CASE("distance basics") {
    CHECK(distance(Vec{1, 0}, Vec{1, 0}) == 0.0);
    CHECK(distance(Vec{1, 0}, Vec{0, 1}) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(distance(Vec{1, 0}, Vec{1, 0, 0}), std::invalid_argument);
}

TEST_CASE("distance is symmetric on random unit pairs") {
    Rng rng(7);
    for (int i = 0; i < 100; ++i) {
        const Vec a = random_unit(8, rng);
        const Vec b = random_unit(8, rng);
        CHECK(distance(a, b) == distance(b, a));
    }
}

TEST_CASE("unit vectors: d^2 = 2 - 2 dot") {
    Rng rng(11);
    for (int i = 0; i < 200; ++i) {
        const Vec a = random_unit(16, rng);
        const Vec b = random_unit(16, rng);
        double dot = 0.0;
        for (size_t j = 0; j < a.size(); ++j) dot += a[j] * b[j];
        const double d = distance(a, b);
        CHECK(d * d == doctest::Approx(2.0 - 2.0 * dot).epsilon(1e-9));
    }
}

TEST_CASE("triangle inequality on random triples") {
    Rng rng(13);
    for (int i = 0; i < 200; ++i) {
        const Vec a = random_unit(8, rng);
        const Vec b = random_unit(8, rng);
        const Vec c = random_unit(8, rng);
        CHECK(distance(a, c) <= distance(a, b) + distance(b, c) + 1e-12);
    }
}

TEST_CASE("cue distances use the right sub-vectors") {
    CueVector a, b;
    a.location = {0.5, 0.5, 0.5};
    b.location = {0.5, 0.5, 0.6};
    a.size = {0.3, 0.2};
    b.size = {0.3, 0.2};
    CHECK(location_distance(a, b) == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(size_distance(a, b) == 0.0);
}

TEST_CASE("split names round-trip") {
    for (Split s : {Split::seed, Split::validation, Split::test, Split::unlabeled}) {
        CHECK(split_from_string(split_to_string(s)) == s);
    }
    CHECK_THROWS_AS(split_from_string("training"), ValidationError);
}

TEST_CASE("dataset validation") {
    Dataset ds;
    ds.feature_dim = 2;
    LesionRecord a;
    a.lesion_id = 1;
    a.feature = {0.0, 1.0};
    LesionRecord b = a;
    b.lesion_id = 2;
    ds.records = {a, b};
    CHECK_NOTHROW(validate(ds));
    CHECK(ds.find(2) == 1);
    CHECK(ds.find(99) == -1);

    SUBCASE("duplicate lesion_id") {
        ds.records[1].lesion_id = 1;
        CHECK_THROWS_AS(validate(ds), ValidationError);
    }
    SUBCASE("inconsistent feature dim") {
        ds.records[1].feature = {1.0};
        CHECK_THROWS_AS(validate(ds), ValidationError);
    }
}
