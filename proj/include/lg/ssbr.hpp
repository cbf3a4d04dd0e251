#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lg/model.hpp"
#include "lg/net.hpp"
#include "lg/rng.hpp"

namespace lg {

// One CT series: ordered slice feature vectors, superior to inferior.
// true_z is populated only for synthetic volumes and is never an input to
// the regressor, which sees slice features alone.
struct Volume {
    int64_t volume_id = 0;
    int64_t patient_id = 0;
    int64_t study_id = 0;
    int64_t series_id = 0;
    Split split = Split::unlabeled;
    std::vector<Vec> slice_features;
    std::vector<double> true_z;  // empty when unknown
};

struct SSBRConfig {
    int m_slices = 8;
    int volumes_per_batch = 32;
    int slices_per_batch = 256;  // must equal m_slices * volumes_per_batch
    double learning_rate = 0.002;
    int max_iterations = 1500;
    double hard_r_threshold = 0.5;  // volumes with score/index correlation below this are hard
    int oversample_factor = 3;
    std::vector<int> hidden_dims{64};
};

void validate(const SSBRConfig& cfg);

// Equidistant slice indices j, j+k, ..., j+k(m-1), with (j, k) uniform over
// all feasible pairs. Throws Error when the volume is too short for any k>=1.
std::vector<int> sample_slice_set(int n_slices, int m, Rng& rng);

// Number of feasible (j, k) pairs; exposed for auditing the sampler.
int64_t feasible_slice_sets(int n_slices, int m);

// 0.5 x^2 inside |x| < 1, |x| - 0.5 outside; continuous with continuous
// first derivative at the joint.
double smooth_l1(double x);
double smooth_l1_grad(double x);

struct SsbrLossResult {
    double loss = 0.0;
    double order_loss = 0.0;
    double dist_loss = 0.0;
    std::vector<Vec> grads;           // same shape as the input scores
    double min_kink_distance = 0.0;   // distance of smooth-L1 arguments to the |x|=1 joint
};

// scores[v][i] = score of the i-th sampled slice (in slice order) of volume
// v in the batch. Order term -log sigmoid(s_{i+1} - s_i) over consecutive
// pairs; distance term smooth_l1(delta_{i+1} - delta_i) over consecutive
// gaps; both summed over volumes.
SsbrLossResult ssbr_loss(const std::vector<Vec>& scores);

double pearson_r(std::span<const double> x, std::span<const double> y);

struct SsbrTrainReport {
    std::vector<double> phase1_r;     // per eligible volume, score/index correlation after phase 1
    std::vector<size_t> hard;         // indices into `volumes` flagged as hard
    std::vector<size_t> resampled;    // phase-2 training multiset (indices into `volumes`)
    bool phase2_ran = false;
};

// Phase 1 trains on every eligible volume; volumes whose per-volume Pearson
// correlation between slice index and score falls below hard_r_threshold are
// then oversampled (duplicated oversample_factor times) and the regressor is
// retrained from a fresh initialization on the resampled set. When no volume
// is hard the resampled set equals the original and phase 2 is skipped.
SsbrTrainReport train_ssbr(const std::vector<Volume>& volumes, Mlp& regressor,
                           const SSBRConfig& cfg, Rng& rng);

double score_slice(const Mlp& regressor, const Vec& slice_features);
std::vector<double> score_volume(const Mlp& regressor, const Volume& v);

// Affine map from the [p1, p99] score percentiles onto [0,1], clamped.
// Fitting throws ValidationError when the scores are constant.
struct ScoreNormalizer {
    double p1 = 0.0;
    double p99 = 1.0;
    double z(double score) const;
};

ScoreNormalizer fit_score_normalizer(std::span<const double> scores);

// Percentile with linear interpolation on the sorted sample, q in [0,1].
double percentile(std::span<const double> values, double q);

// Two-threshold classifier over a scalar score for three ordered regions
// (labels 0, 1, 2); thresholds are fitted by exhaustive scan minimizing
// training error, ties resolved toward the smaller threshold.
std::pair<double, double> fit_two_thresholds(std::span<const double> scores,
                                             std::span<const int> region_labels);
double three_way_accuracy(std::span<const double> scores, std::span<const int> region_labels,
                          double th1, double th2);

// ---------------------------------------------------------------------------
// Files: volumes CSV (volume_id, patient_id, study_id, series_id, split,
// slice_idx, true_z, s_0..s_{Ds-1}; true_z may be empty) and scores CSV
// (volume_id, slice_idx, score, z).
// ---------------------------------------------------------------------------

std::vector<Volume> read_volumes_csv(const std::string& path);
void write_volumes_csv(const std::vector<Volume>& volumes, const std::string& path);

struct SliceScoreRow {
    int64_t volume_id;
    int64_t slice_idx;
    double score;
    double z;
};

std::vector<SliceScoreRow> read_scores_csv(const std::string& path);
void write_scores_csv(const std::vector<SliceScoreRow>& rows, const std::string& path);

}  // namespace lg
