#include "lg/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "lg/csv.hpp"
#include "lg/errors.hpp"
#include "lg/rng.hpp"

namespace lg {

void validate(const SyntheticConfig& cfg) {
    if (cfg.n_types < 2) throw ValidationError("synthetic: n_types must be >= 2");
    if (cfg.n_patients < 4) throw ValidationError("synthetic: n_patients must be >= 4");
    auto check_range = [](const IntRange& r, const char* name) {
        if (r.lo < 1 || r.hi < r.lo) {
            throw ValidationError(std::string("synthetic: bad range for ") + name);
        }
    };
    check_range(cfg.studies_per_patient, "studies_per_patient");
    check_range(cfg.lesions_per_patient, "lesions_per_patient");
    check_range(cfg.series_per_study, "series_per_study");
    check_range(cfg.slices_per_volume, "slices_per_volume");
    if (cfg.slices_per_volume.lo < 2) throw ValidationError("synthetic: volumes need >= 2 slices");
    if (cfg.distractor_dims < 0) throw ValidationError("synthetic: distractor_dims must be >= 0");
    if (cfg.feature_dim < 6 + cfg.distractor_dims) {
        throw ValidationError(
            "synthetic: feature_dim must cover 5 cue dims, the distractors and a type subspace");
    }
    if (cfg.slice_feature_dim < 1) throw ValidationError("synthetic: slice_feature_dim must be >= 1");
    if (cfg.type_center_separation <= 0.0) {
        throw ValidationError("synthetic: type_center_separation must be positive");
    }
    for (double sd : {cfg.feature_noise_sd, cfg.distractor_sd, cfg.instance_offset_sd,
                      cfg.cue_noise_sd, cfg.slice_noise_sd}) {
        if (sd < 0.0) throw ValidationError("synthetic: noise sds must be >= 0");
    }
    for (double rate : {cfg.label_flip_rate, cfg.study_presence_prob}) {
        if (rate < 0.0 || rate > 1.0) throw ValidationError("synthetic: rates must be in [0,1]");
    }
    const double frac = cfg.seed_fraction + cfg.val_fraction + cfg.test_fraction;
    if (cfg.seed_fraction <= 0.0 || cfg.val_fraction < 0.0 || cfg.test_fraction <= 0.0 ||
        frac >= 1.0) {
        throw ValidationError("synthetic: split fractions must be positive and sum below 1");
    }
    if (cfg.size_drift_max < 0.0 || cfg.size_drift_max >= 1.0) {
        throw ValidationError("synthetic: size_drift_max must be in [0,1)");
    }
}

namespace {

// Generator internals. Cue jitter is truncated at 1.4 sd so two replicas of
// one instance stay within 2.8 sd (< 3 sd) of each other per dimension.
constexpr double kJitterCap = 1.4;
// Lesions of a type concentrate at a few distinct body sites; instances at
// one site are location-similar, instances at different sites are
// location-dissimilar, and nothing falls into the in-between band.
constexpr int kSitesPerType = 3;
constexpr double kMinSiteSeparation = 0.15;
constexpr double kSiteBoxHalf = 0.18;
constexpr double kSiteSd = 0.004;
constexpr double kLocFeatureScale = 1.0;
constexpr double kSizeFeatureScale = 0.8;
// Study-level size drift is bimodal: most studies find a lesion unchanged
// (pairs stay inside the size-similarity threshold), the rest grown or
// shrunk by nearly the full drift bound, crossing the dissimilarity
// threshold.
constexpr double kStableStudyProb = 0.5;
constexpr double kStableDriftMax = 0.005;
constexpr double kSizeLongLo = 0.45;
constexpr double kSizeLongHi = 0.85;
constexpr double kShortFracLo = 0.6;
constexpr double kSizeMmScale = 100.0;  // normalized size -> mm in the annotation table
constexpr double kVolumePadLo = 0.04;
constexpr double kVolumePadHi = 0.12;
constexpr double kMinVolumeRange = 0.2;
constexpr double kSliceGainLo = 2.0;
constexpr double kSliceGainHi = 6.0;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

struct InstanceState {
    int64_t instance_id;
    int type;
    std::array<double, 3> base_loc;
    double base_long, base_short;  // normalized sizes
    Vec appearance;                // per-instance offset in the type subspace
};

}  // namespace

Cohort generate_cohort(const SyntheticConfig& cfg) {
    validate(cfg);
    Rng rng(cfg.rng_seed);

    const int type_dim = cfg.feature_dim - 5 - cfg.distractor_dims;

    // Per-type feature centers (fixed norm = separation) and body sites.
    std::vector<Vec> centers(cfg.n_types);
    std::vector<std::array<std::array<double, 3>, kSitesPerType>> sites(cfg.n_types);
    for (int t = 0; t < cfg.n_types; ++t) {
        Vec g(type_dim);
        double norm = 0.0;
        for (double& v : g) {
            v = rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) norm = 1.0;
        for (double& v : g) v = v / norm * cfg.type_center_separation;
        centers[t] = std::move(g);

        std::array<double, 3> region;
        for (double& c : region) c = rng.uniform(0.25, 0.75);
        for (int k = 0; k < kSitesPerType; ++k) {
            for (int attempt = 0; attempt < 200; ++attempt) {
                std::array<double, 3> cand;
                for (int d = 0; d < 3; ++d) {
                    cand[d] = clamp01(region[d] + rng.uniform(-kSiteBoxHalf, kSiteBoxHalf));
                }
                bool ok = true;
                for (int k2 = 0; k2 < k; ++k2) {
                    double d2 = 0.0;
                    for (int d = 0; d < 3; ++d) {
                        const double diff = cand[d] - sites[t][k2][d];
                        d2 += diff * diff;
                    }
                    if (d2 < kMinSiteSeparation * kMinSiteSeparation) {
                        ok = false;
                        break;
                    }
                }
                if (ok || attempt == 199) {
                    sites[t][k] = cand;
                    break;
                }
            }
        }
    }

    // Fixed monotone slice-feature map, shared by all volumes: each channel
    // is an increasing sigmoid of z with its own gain and midpoint.
    Vec slice_gain(cfg.slice_feature_dim), slice_mid(cfg.slice_feature_dim);
    for (int j = 0; j < cfg.slice_feature_dim; ++j) {
        slice_gain[j] = rng.uniform(kSliceGainLo, kSliceGainHi);
        slice_mid[j] = rng.uniform(0.1, 0.9);
    }

    // Patient-level splits.
    std::vector<int> order(cfg.n_patients);
    for (int i = 0; i < cfg.n_patients; ++i) order[i] = i;
    rng.shuffle(order);
    const int n_seed = static_cast<int>(std::lround(cfg.seed_fraction * cfg.n_patients));
    const int n_val = static_cast<int>(std::lround(cfg.val_fraction * cfg.n_patients));
    const int n_test = static_cast<int>(std::lround(cfg.test_fraction * cfg.n_patients));
    if (n_seed < 1 || n_test < 1 || n_seed + n_val + n_test >= cfg.n_patients) {
        throw ValidationError("synthetic: infeasible split fractions for this patient count");
    }
    std::vector<Split> patient_split(cfg.n_patients, Split::unlabeled);
    for (int i = 0; i < n_seed; ++i) patient_split[order[i]] = Split::seed;
    for (int i = n_seed; i < n_seed + n_val; ++i) patient_split[order[i]] = Split::validation;
    for (int i = n_seed + n_val; i < n_seed + n_val + n_test; ++i) {
        patient_split[order[i]] = Split::test;
    }

    // Shuffled type deck for seed patients: guarantees every class appears in
    // the seed split once it holds at least n_types lesions, while keeping
    // the marginal near-uniform.
    std::vector<int> seed_deck(cfg.n_types);
    for (int t = 0; t < cfg.n_types; ++t) seed_deck[t] = t;
    rng.shuffle(seed_deck);
    int seed_deck_pos = 0;

    Cohort cohort;
    cohort.dataset.feature_dim = cfg.feature_dim;
    int64_t next_lesion_id = 0;
    int64_t next_instance_id = 0;
    int64_t next_volume_id = 0;
    int seed_lesion_count = 0;

    for (int p = 0; p < cfg.n_patients; ++p) {
        const Split split = patient_split[p];
        const int n_studies =
            static_cast<int>(rng.range(cfg.studies_per_patient.lo, cfg.studies_per_patient.hi));
        const int n_instances =
            static_cast<int>(rng.range(cfg.lesions_per_patient.lo, cfg.lesions_per_patient.hi));

        std::vector<InstanceState> instances(n_instances);
        double z_lo = 1.0, z_hi = 0.0;
        for (auto& inst : instances) {
            inst.instance_id = next_instance_id++;
            if (split == Split::seed) {
                inst.type = seed_deck[seed_deck_pos];
                if (++seed_deck_pos == cfg.n_types) {
                    rng.shuffle(seed_deck);
                    seed_deck_pos = 0;
                }
            } else {
                inst.type = static_cast<int>(rng.index(cfg.n_types));
            }
            const auto& site = sites[inst.type][rng.index(kSitesPerType)];
            for (int d = 0; d < 3; ++d) {
                inst.base_loc[d] = clamp01(site[d] + rng.normal(0.0, kSiteSd));
            }
            inst.base_long = rng.uniform(kSizeLongLo, kSizeLongHi);
            inst.base_short = inst.base_long * rng.uniform(kShortFracLo, 1.0);
            inst.appearance.resize(type_dim);
            for (double& v : inst.appearance) {
                v = rng.normal(0.0, cfg.instance_offset_sd);
            }
            z_lo = std::min(z_lo, inst.base_loc[2]);
            z_hi = std::max(z_hi, inst.base_loc[2]);
        }

        // Presence of each instance per study; every instance appears at
        // least once.
        std::vector<std::vector<bool>> present(n_instances, std::vector<bool>(n_studies));
        for (int i = 0; i < n_instances; ++i) {
            bool any = false;
            for (int s = 0; s < n_studies; ++s) {
                present[i][s] = rng.bernoulli(cfg.study_presence_prob);
                any = any || present[i][s];
            }
            if (!any) present[i][static_cast<size_t>(rng.index(n_studies))] = true;
        }

        for (int s = 0; s < n_studies; ++s) {
            // Per-study size drift, shared by its series.
            std::vector<double> drift(n_instances);
            for (int i = 0; i < n_instances; ++i) {
                if (rng.bernoulli(kStableStudyProb) || cfg.size_drift_max <= 2.0 * kStableDriftMax) {
                    drift[i] = 1.0 + rng.uniform(-kStableDriftMax, kStableDriftMax);
                } else {
                    const double mag = cfg.size_drift_max * rng.uniform(0.95, 1.0);
                    drift[i] = 1.0 + (rng.bernoulli(0.5) ? mag : -mag);
                }
            }
            const int n_series = static_cast<int>(rng.range(cfg.series_per_study.lo,
                                                            cfg.series_per_study.hi));
            for (int ser = 0; ser < n_series; ++ser) {
                // The series volume: a z window covering this patient's lesions.
                Volume vol;
                vol.volume_id = next_volume_id++;
                vol.patient_id = p;
                vol.study_id = s;
                vol.series_id = ser;
                vol.split = split;
                double lo = z_lo - rng.uniform(kVolumePadLo, kVolumePadHi);
                double hi = z_hi + rng.uniform(kVolumePadLo, kVolumePadHi);
                if (hi - lo < kMinVolumeRange) {
                    const double c = 0.5 * (hi + lo);
                    lo = c - 0.5 * kMinVolumeRange;
                    hi = c + 0.5 * kMinVolumeRange;
                }
                lo = clamp01(lo);
                hi = clamp01(hi);
                const int n_slices = static_cast<int>(
                    rng.range(cfg.slices_per_volume.lo, cfg.slices_per_volume.hi));
                vol.slice_features.resize(n_slices);
                vol.true_z.resize(n_slices);
                for (int k = 0; k < n_slices; ++k) {
                    const double z = lo + (hi - lo) * k / (n_slices - 1);
                    vol.true_z[k] = z;
                    Vec f(cfg.slice_feature_dim);
                    for (int j = 0; j < cfg.slice_feature_dim; ++j) {
                        f[j] = std::tanh(slice_gain[j] * (z - slice_mid[j])) +
                               rng.normal(0.0, cfg.slice_noise_sd);
                    }
                    vol.slice_features[k] = std::move(f);
                }

                for (int i = 0; i < n_instances; ++i) {
                    if (!present[i][s]) continue;
                    const InstanceState& inst = instances[i];

                    LesionRecord rec;
                    rec.lesion_id = next_lesion_id++;
                    rec.patient_id = p;
                    rec.study_id = s;
                    rec.series_id = ser;
                    rec.split = split;

                    for (int d = 0; d < 3; ++d) {
                        rec.cues.location[d] = clamp01(
                            rng.truncated_normal(inst.base_loc[d], cfg.cue_noise_sd, kJitterCap));
                    }
                    const double long_n = clamp01(inst.base_long * drift[i]);
                    const double short_n = std::min(clamp01(inst.base_short * drift[i]), long_n);
                    rec.cues.size = {long_n, short_n};

                    // Nearest slice to the record's z.
                    const double step = (hi - lo) / (n_slices - 1);
                    int slice = step > 0.0
                                    ? static_cast<int>(std::lround((rec.cues.location[2] - lo) / step))
                                    : 0;
                    slice = std::clamp(slice, 0, n_slices - 1);
                    rec.slice_idx = slice;

                    // Diameters: long axis horizontal, short vertical, both
                    // centered on the same point; 1 px per mm.
                    const double long_mm = std::max(long_n * kSizeMmScale, 0.2);
                    const double short_mm = std::max(short_n * kSizeMmScale, 0.1);
                    const double cx = 256.0 + 200.0 * (rec.cues.location[0] - 0.5);
                    const double cy = 256.0 + 200.0 * (rec.cues.location[1] - 0.5);
                    rec.diameters = {cx - long_mm / 2, cy, cx + long_mm / 2, cy,
                                     cx, cy - short_mm / 2, cx, cy + short_mm / 2,
                                     long_mm, short_mm};

                    // Observed annotation label: flipped on the seed split
                    // with label_flip_rate, absent off the labeled splits.
                    if (split != Split::unlabeled) {
                        int label = inst.type;
                        if (split == Split::seed && rng.bernoulli(cfg.label_flip_rate)) {
                            int other = static_cast<int>(rng.index(cfg.n_types - 1));
                            if (other >= label) ++other;
                            label = other;
                        }
                        rec.true_type = label;
                        if (split == Split::seed) rec.cues.type_label = label;
                    }
                    if (split == Split::seed) ++seed_lesion_count;

                    Vec feat(cfg.feature_dim);
                    for (int j = 0; j < type_dim; ++j) {
                        feat[j] = centers[inst.type][j] + inst.appearance[j];
                    }
                    for (int d = 0; d < 3; ++d) {
                        feat[type_dim + d] = kLocFeatureScale * rec.cues.location[d];
                    }
                    feat[type_dim + 3] = kSizeFeatureScale * rec.cues.size[0];
                    feat[type_dim + 4] = kSizeFeatureScale * rec.cues.size[1];
                    for (int j = 0; j < cfg.distractor_dims; ++j) {
                        feat[type_dim + 5 + j] = rng.normal(0.0, cfg.distractor_sd);
                    }
                    for (double& v : feat) v += rng.normal(0.0, cfg.feature_noise_sd);
                    rec.feature = std::move(feat);

                    cohort.truth.rows.push_back(
                        {rec.lesion_id, inst.instance_id, inst.type, vol.true_z[slice]});
                    cohort.dataset.records.push_back(std::move(rec));
                }
                cohort.volumes.push_back(std::move(vol));
            }
        }
    }

    if (seed_lesion_count < cfg.n_types) {
        throw ValidationError("synthetic: infeasible config, seed split has " +
                              std::to_string(seed_lesion_count) + " lesions for " +
                              std::to_string(cfg.n_types) + " types");
    }
    validate(cohort.dataset);
    return cohort;
}

int GroundTruth::find(int64_t lesion_id) const {
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].lesion_id == lesion_id) return static_cast<int>(i);
    }
    return -1;
}

GroundTruth read_ground_truth_csv(const std::string& path) {
    csv::Reader reader(path);
    const int c_id = reader.required_column("lesion_id");
    const int c_inst = reader.required_column("instance_id");
    const int c_type = reader.required_column("true_type");
    const int c_z = reader.required_column("true_z");
    GroundTruth gt;
    std::vector<std::string> f;
    while (reader.next(f)) {
        gt.rows.push_back({csv::parse_int(f[c_id]), csv::parse_int(f[c_inst]),
                           static_cast<int>(csv::parse_int(f[c_type])), csv::parse_double(f[c_z])});
    }
    return gt;
}

void write_ground_truth_csv(const GroundTruth& gt, const std::string& path) {
    csv::Writer w(path);
    w.write_row({"lesion_id", "instance_id", "true_type", "true_z"});
    for (const auto& r : gt.rows) {
        w.write_row({csv::format(r.lesion_id), csv::format(r.instance_id),
                     csv::format(static_cast<int64_t>(r.true_type)), csv::format(r.true_z)});
    }
}

}  // namespace lg
