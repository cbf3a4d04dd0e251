#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>

#include "lg/csv.hpp"
#include "lg/errors.hpp"
#include "lg/pipeline.hpp"
#include "support/scratch.hpp"

using namespace lg;

namespace {

// Small cohort and short schedules: wiring tests, not quality tests.
RunConfig tiny_config() {
    RunConfig cfg = default_config();
    cfg.synthetic.n_patients = 30;
    cfg.sgd.max_iterations = 120;
    cfg.sgd.drop_iteration = 80;
    cfg.finetune_iterations = 30;
    cfg.ssbr.max_iterations = 60;
    cfg.synthetic.slices_per_volume = {24, 32};
    return cfg;
}

void run_pipeline(const RunConfig& cfg, const std::string& dir) {
    cmd_gen(cfg, dir);
    cmd_ssbr(cfg, dir);
    cmd_train(cfg, dir);
    cmd_embed(cfg, dir, false);
    cmd_embed(cfg, dir, true);
    cmd_retrieve(cfg, dir, cfg.paths.embeddings);
    cmd_match(cfg, dir, cfg.paths.embeddings);
    cmd_eval(cfg, dir, "");
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(LESIONGRAPH_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config json round-trip") {
    const RunConfig cfg = default_config();
    const std::string text = config_to_json_text(cfg);
    const RunConfig back = config_from_json_text(text);
    CHECK(config_to_json_text(back) == text);
    CHECK(back.sgd.learning_rate == 0.002);
    CHECK(back.sgd.lr_after_drop == 0.0002);
    CHECK(back.sgd.drop_iteration == 2000);
    CHECK(back.sampler.t_low == 0.02);
    CHECK(back.sampler.t_high == 0.1);
    CHECK(back.margins.m1 == 0.1);
    CHECK(back.margins.m2 == 0.2);
    CHECK(back.margins.m3 == 0.4);
    CHECK(back.margins.sequences_per_batch == 24);
    CHECK(back.matching.t1 == 0.1);
    CHECK(back.ssbr.m_slices == 8);
    CHECK(back.ssbr.volumes_per_batch == 32);
    CHECK(back.ssbr.slices_per_batch == 256);
    CHECK(back.ssbr.learning_rate == 0.002);
    CHECK(back.ssbr.max_iterations == 1500);
    CHECK(back.embedding_dim == 32);
}

TEST_CASE("config rejects unknown keys") {
    CHECK_THROWS_AS(config_from_json_text("{\"rng_sed\": 1}"), ValidationError);
    CHECK_THROWS_AS(config_from_json_text("{\"sgd\": {\"lr\": 0.1}}"), ValidationError);
    CHECK_THROWS_AS(config_from_json_text("not json"), ValidationError);
    CHECK_THROWS_AS(config_from_json_text("{\"margins\": {\"m1\": 0.5}}"), ValidationError);
}

TEST_CASE("config overrides") {
    RunConfig cfg = default_config();
    apply_override(cfg, "sgd.max_iterations", "5000");
    CHECK(cfg.sgd.max_iterations == 5000);
    // batch overrides validate once, so ordering does not matter
    cfg = apply_overrides(cfg, std::vector<std::pair<std::string, std::string>>{
                                   {"sgd.max_iterations", "40"}, {"sgd.drop_iteration", "20"}});
    CHECK(cfg.sgd.max_iterations == 40);
    CHECK(cfg.sgd.drop_iteration == 20);
    apply_override(cfg, "synthetic.studies_per_patient", "[3,5]");
    CHECK(cfg.synthetic.studies_per_patient.lo == 3);
    CHECK(cfg.synthetic.studies_per_patient.hi == 5);
    apply_override(cfg, "eval.split", "val");
    CHECK(cfg.eval_split == "val");
    apply_override(cfg, "rng_seed", "99");
    CHECK(cfg.rng_seed == 99);
    CHECK_THROWS_AS(apply_override(cfg, "nope.key", "1"), ValidationError);
    CHECK_THROWS_AS(apply_override(cfg, "sgd.learning_rate", "-1"), ValidationError);
}

TEST_CASE("gen is deterministic and ingest canonicalizes losslessly") {
    const RunConfig cfg = tiny_config();
    const std::string d1 = test_scratch_dir("pipe_gen1");
    const std::string d2 = test_scratch_dir("pipe_gen2");
    cmd_gen(cfg, d1);
    cmd_gen(cfg, d2);
    for (const char* f : {"annotations.csv", "features.csv", "groundtruth.csv", "volumes.csv"}) {
        CHECK(read_file(d1 + "/" + f) == read_file(d2 + "/" + f));
    }
    const std::string before = read_file(d1 + "/annotations.csv");
    cmd_ingest(cfg, d1);
    CHECK(read_file(d1 + "/annotations.csv") == before);
    CHECK(std::filesystem::exists(d1 + "/normalizers.json"));
}

TEST_CASE("pipeline stages write consistent artifacts") {
    const RunConfig cfg = tiny_config();
    const std::string dir = test_scratch_dir("pipe_full");
    run_pipeline(cfg, dir);

    // every documented artifact exists
    for (const char* f :
         {"annotations.csv", "annotations_z.csv", "features.csv", "groundtruth.csv",
          "volumes.csv", "scores.csv", "ssbr.lgm", "ssbr.lgm.json", "embedder.lgm",
          "embedder.lgm.json", "loss_history.csv", "pseudolabels.csv", "normalizers.json",
          "embeddings.csv", "baseline_embeddings.csv", "retrieval.csv", "matching.csv",
          "pr_curve.csv", "match_summary.json", "eval.csv", "eval_summary.json"}) {
        CHECK_MESSAGE(std::filesystem::exists(dir + "/" + f), f);
    }

    // embeddings cover every record and are unit norm
    const Dataset ds = load_dataset_raw(cfg, dir);
    std::vector<int64_t> ids;
    std::vector<Vec> embs;
    read_embeddings_csv(dir + "/embeddings.csv", ids, embs);
    REQUIRE(ids.size() == ds.records.size());
    for (const auto& e : embs) {
        double n = 0;
        for (double v : e) n += v * v;
        CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
    }

    // loss history: lr drop at the configured iteration, finetune rows at the low rate
    {
        csv::Reader r(dir + "/loss_history.csv");
        std::vector<std::string> f;
        std::vector<double> lrs;
        while (r.next(f)) lrs.push_back(csv::parse_double(f[2]));
        REQUIRE(lrs.size() == size_t(cfg.sgd.max_iterations + cfg.finetune_iterations));
        CHECK(lrs[cfg.sgd.drop_iteration - 1] == 0.002);
        CHECK(lrs[cfg.sgd.drop_iteration] == 0.0002);
        CHECK(lrs.back() == 0.0002);
    }

    // pseudolabels: one initial and one refined row per lesion
    {
        csv::Reader r(dir + "/pseudolabels.csv");
        std::vector<std::string> f;
        std::map<std::string, size_t> stages;
        while (r.next(f)) ++stages[f[2]];
        CHECK(stages["initial"] == ds.records.size());
        CHECK(stages["refined"] == ds.records.size());
        CHECK(stages.size() == 2);  // refinement happens exactly once
    }

    // matching: groups partition the split's lesions
    {
        std::set<int64_t> expected;
        for (const auto& rec : ds.records) {
            if (split_to_string(rec.split) == cfg.match_split) expected.insert(rec.lesion_id);
        }
        csv::Reader r(dir + "/matching.csv");
        std::vector<std::string> f;
        std::set<int64_t> seen;
        while (r.next(f)) CHECK(seen.insert(csv::parse_int(f[2])).second);
        CHECK(seen == expected);
    }

    // retrieval: k rows per query, distances ascending per query
    {
        csv::Reader r(dir + "/retrieval.csv");
        std::vector<std::string> f;
        std::map<int64_t, std::vector<double>> per_query;
        while (r.next(f)) per_query[csv::parse_int(f[0])].push_back(csv::parse_double(f[3]));
        for (const auto& [q, dists] : per_query) {
            CHECK(dists.size() == size_t(cfg.retrieval_k));
            CHECK(std::is_sorted(dists.begin(), dists.end()));
        }
    }

    // eval.csv has the table shape
    {
        csv::Reader r(dir + "/eval.csv");
        const std::vector<std::string> expect{"representation", "are_type", "are_location",
                                              "are_size",       "purity",   "nmi",
                                              "accuracy"};
        CHECK(r.header() == expect);
        std::vector<std::string> f;
        std::vector<std::string> reps;
        while (r.next(f)) reps.push_back(f[0]);
        CHECK(reps == std::vector<std::string>{"baseline_features", "trained_embedding"});
    }
}

TEST_CASE("eval metric selection leaves unselected columns empty") {
    const RunConfig cfg = tiny_config();
    const std::string dir = test_scratch_dir("pipe_sel");
    cmd_gen(cfg, dir);
    cmd_ssbr(cfg, dir);
    const auto rows = cmd_eval(cfg, dir, "are");
    REQUIRE(rows.size() == 1);  // no trained embeddings yet: baseline only
    CHECK(rows[0].are_type >= 0.0);
    CHECK(rows[0].purity < 0.0);
    CHECK(rows[0].accuracy < 0.0);
    CHECK_THROWS_AS(cmd_eval(cfg, dir, "are,bogus"), ValidationError);
}

TEST_CASE("gradient audits stay under tolerance") {
    CHECK(audit_triplet_gradients(4, 17) < 1e-4);
    CHECK(audit_ssbr_gradients(4, 17) < 1e-4);
}

TEST_CASE("cli exit codes") {
    CHECK(run_cli("definitely-not-a-subcommand") == 1);
    CHECK(run_cli("gen --no-such-flag") == 1);
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("gradcheck --trials 2") == 0);
    // validation failure: missing input files
    const std::string dir = test_scratch_dir("pipe_cli_missing");
    CHECK(run_cli("train --dir " + dir) == 1);
    // bad config value through --set
    CHECK(run_cli("gen --dir " + dir + " --set sgd.learning_rate=-5") == 1);
}

TEST_CASE("cli gen/train determinism through the binary") {
    const std::string d1 = test_scratch_dir("pipe_cli_det1");
    const std::string d2 = test_scratch_dir("pipe_cli_det2");
    const std::string flags =
        " --set synthetic.n_patients=30 --set sgd.max_iterations=40 --set sgd.drop_iteration=20 "
        "--set train.finetune_iterations=10 --set ssbr.max_iterations=30";
    for (const std::string& d : {d1, d2}) {
        REQUIRE(run_cli("gen --dir " + d + flags) == 0);
        REQUIRE(run_cli("ssbr --dir " + d + flags) == 0);
        REQUIRE(run_cli("train --dir " + d + flags) == 0);
        REQUIRE(run_cli("embed --dir " + d + flags) == 0);
    }
    for (const char* f : {"annotations.csv", "annotations_z.csv", "scores.csv",
                          "loss_history.csv", "pseudolabels.csv", "embeddings.csv"}) {
        CHECK_MESSAGE(read_file(d1 + "/" + f) == read_file(d2 + "/" + f), f);
    }
}
