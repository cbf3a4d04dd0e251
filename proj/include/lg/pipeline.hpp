#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lg/graph.hpp"
#include "lg/ingest.hpp"
#include "lg/net.hpp"
#include "lg/pseudolabel.hpp"
#include "lg/sampling.hpp"
#include "lg/ssbr.hpp"
#include "lg/synthetic.hpp"

namespace lg {

struct PathsConfig {
    std::string annotations = "annotations.csv";
    std::string annotations_z = "annotations_z.csv";  // loc_z rewritten by the regressor
    std::string features = "features.csv";
    std::string ground_truth = "groundtruth.csv";
    std::string volumes = "volumes.csv";
    std::string normalizers = "normalizers.json";
    std::string ssbr_checkpoint = "ssbr.lgm";
    std::string scores = "scores.csv";
    std::string checkpoint = "embedder.lgm";
    std::string loss_history = "loss_history.csv";
    std::string pseudo_labels = "pseudolabels.csv";
    std::string embeddings = "embeddings.csv";
    std::string baseline_embeddings = "baseline_embeddings.csv";
    std::string retrieval = "retrieval.csv";
    std::string matching = "matching.csv";
    std::string pr_curve = "pr_curve.csv";
    std::string match_summary = "match_summary.json";
    std::string eval = "eval.csv";
    std::string eval_summary = "eval_summary.json";
};

// Whole-run configuration. Every stage derives its randomness from rng_seed
// via derive_seed(rng_seed, stage_name), so stages can be rerun in isolation.
struct RunConfig {
    uint64_t rng_seed = 17;
    SyntheticConfig synthetic;
    SamplerConfig sampler;
    MarginConfig margins;
    SGDConfig sgd;
    SSBRConfig ssbr;
    MatchingConfig matching;

    std::vector<int> embedder_hidden{64};
    int embedding_dim = 32;
    int knn_k = 5;
    int finetune_iterations = 1000;

    int retrieval_k = 5;
    bool exclude_same_patient = true;
    int eval_clusters = 8;
    std::string eval_split = "test";
    std::string match_split = "test";
    std::vector<double> t2_sweep;  // filled by default_config

    PathsConfig paths;
};

RunConfig default_config();

// JSON round trip. Unknown keys are rejected at every level.
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& cfg);
RunConfig load_config(const std::string& path);

// Applies `--set section.key=value` overrides; values are parsed as JSON
// when possible, otherwise taken as strings. Validation runs once after all
// overrides are in place.
RunConfig apply_overrides(const RunConfig& cfg,
                          std::span<const std::pair<std::string, std::string>> overrides);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

// ---------------------------------------------------------------------------
// Stages. `dir` is the workspace directory holding all artifact files.
// ---------------------------------------------------------------------------

void cmd_gen(const RunConfig& cfg, const std::string& dir);

// Validates an annotation/feature pair, fits cue normalizers, and rewrites
// both files in canonical form.
void cmd_ingest(const RunConfig& cfg, const std::string& dir);

struct SsbrStageReport {
    SsbrTrainReport train;
    ScoreNormalizer normalizer;
    size_t train_volumes = 0;
    size_t total_volumes = 0;
};

SsbrStageReport cmd_ssbr(const RunConfig& cfg, const std::string& dir);

struct TrainStageReport {
    double initial_pseudo_accuracy = -1.0;  // vs ground truth when available
    double refined_pseudo_accuracy = -1.0;
    double first_window_loss = 0.0;
    double last_window_loss = 0.0;
};

TrainStageReport cmd_train(const RunConfig& cfg, const std::string& dir);

// Writes embeddings for every record: the trained net's outputs, or with
// `baseline` the L2-normalized raw features.
void cmd_embed(const RunConfig& cfg, const std::string& dir, bool baseline);

void cmd_retrieve(const RunConfig& cfg, const std::string& dir,
                  const std::string& embeddings_file);

struct MatchStageReport {
    double auc = -1.0;  // -1 when no ground truth was available
    size_t patients = 0;
};

MatchStageReport cmd_match(const RunConfig& cfg, const std::string& dir,
                           const std::string& embeddings_file);

struct EvalRow {
    std::string representation;
    double are_type = -1.0;
    double are_location = -1.0;
    double are_size = -1.0;
    double purity = -1.0;
    double nmi = -1.0;
    double accuracy = -1.0;
};

// `metrics` is a comma list of are|purity|nmi|accuracy (empty = all).
// Returns one row per representation: baseline features, then the trained
// embedding when its file exists.
std::vector<EvalRow> cmd_eval(const RunConfig& cfg, const std::string& dir,
                              const std::string& metrics);

// ---------------------------------------------------------------------------
// Gradient audits: random nets and batches, analytic gradients against
// central finite differences. Return the max relative error observed.
// ---------------------------------------------------------------------------

double audit_triplet_gradients(int trials, uint64_t seed);
double audit_ssbr_gradients(int trials, uint64_t seed);

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

std::string join_path(const std::string& dir, const std::string& name);

// Annotations plus features; prefers the z-rewritten annotation file when
// present. Cues are left raw.
Dataset load_dataset_raw(const RunConfig& cfg, const std::string& dir);

std::vector<Vec> l2_normalized_features(const Dataset& ds);

void write_embeddings_csv(const std::vector<int64_t>& ids, const std::vector<Vec>& embeddings,
                          const std::string& path);
void read_embeddings_csv(const std::string& path, std::vector<int64_t>& ids,
                         std::vector<Vec>& embeddings);

}  // namespace lg
