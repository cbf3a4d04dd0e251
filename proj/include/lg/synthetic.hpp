#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lg/model.hpp"
#include "lg/ssbr.hpp"

namespace lg {

struct IntRange {
    int lo = 1;
    int hi = 1;
};

struct SyntheticConfig {
    int n_types = 8;
    int n_patients = 200;
    IntRange studies_per_patient{2, 4};
    IntRange lesions_per_patient{2, 4};
    int feature_dim = 22;
    int distractor_dims = 6;  // trailing feature dims carrying pure per-record noise
    double type_center_separation = 1.4;
    double feature_noise_sd = 0.06;
    double distractor_sd = 0.5;
    double instance_offset_sd = 0.25;  // per-instance appearance shift in the type subspace
    double cue_noise_sd = 0.005;
    double label_flip_rate = 0.0;
    uint64_t rng_seed = 17;

    // Cohort shape beyond the core knobs.
    IntRange series_per_study{1, 2};
    double study_presence_prob = 0.9;  // chance an instance is marked in a given study
    double seed_fraction = 0.15;       // of patients; splits are patient-level
    double val_fraction = 0.1;
    double test_fraction = 0.2;
    double size_drift_max = 0.3;  // per-study growth/shrinkage of an instance

    // Synthetic CT volumes feeding the body-part regressor.
    IntRange slices_per_volume{64, 96};
    int slice_feature_dim = 12;
    double slice_noise_sd = 0.02;
};

void validate(const SyntheticConfig& cfg);

struct GroundTruthRow {
    int64_t lesion_id;
    int64_t instance_id;  // shared by records of the same physical lesion
    int true_type;
    double true_z;
};

struct GroundTruth {
    std::vector<GroundTruthRow> rows;  // aligned with Dataset record order

    int find(int64_t lesion_id) const;
};

struct Cohort {
    Dataset dataset;  // raw cues, un-normalized
    GroundTruth truth;
    std::vector<Volume> volumes;  // one per (patient, study, series)
};

// Deterministic function of the config. Per type there is a feature-space
// center and a location prior; instances replicate across a patient's
// studies with bounded cue jitter and per-study size drift; same-study
// series repeat the instance. Seed-split labels are flipped with
// label_flip_rate. Throws ValidationError on infeasible configs (any split
// with no patients, or a seed split smaller than the type count).
Cohort generate_cohort(const SyntheticConfig& cfg);

GroundTruth read_ground_truth_csv(const std::string& path);
void write_ground_truth_csv(const GroundTruth& gt, const std::string& path);

}  // namespace lg
