#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lg {

using Vec = std::vector<double>;

enum class Split { seed, validation, test, unlabeled };

Split split_from_string(std::string_view s);  // "seed" | "val" | "test" | "unlabeled"
std::string_view split_to_string(Split s);

// Weak supervision triple of one lesion: type label (pseudo or annotated),
// relative body location, and normalized diameters.
struct CueVector {
    std::optional<int> type_label;
    std::array<double, 3> location{0.0, 0.0, 0.0};  // x, y in-plane; z from the body-part regressor
    std::array<double, 2> size{0.0, 0.0};           // long, short diameter
};

double location_distance(const CueVector& a, const CueVector& b);
double size_distance(const CueVector& a, const CueVector& b);

// RECIST-style measurement: longest diameter plus its longest perpendicular,
// as segments in image pixel coordinates and lengths in mm.
struct DiameterMeasurement {
    double long_x1 = 0, long_y1 = 0, long_x2 = 0, long_y2 = 0;
    double short_x1 = 0, short_y1 = 0, short_x2 = 0, short_y2 = 0;
    double long_mm = 0;
    double short_mm = 0;
};

// One annotated finding. Immutable after ingest except for the cue type
// label, which the pseudo-labeling stage fills in.
struct LesionRecord {
    int64_t lesion_id = 0;  // unique within a Dataset
    int64_t patient_id = 0;
    int64_t study_id = 0;  // per-patient ordinal, increasing with acquisition time
    int64_t series_id = 0;
    int64_t slice_idx = 0;  // axial slice within the (patient, study, series) volume
    DiameterMeasurement diameters;
    CueVector cues;
    std::optional<int> true_type;  // annotated type, absent for unlabeled rows
    Split split = Split::unlabeled;
    Vec feature;  // precomputed D-dim feature vector; empty until joined
};

// Unit-norm output of the embedder.
struct Embedding {
    Vec values;
};

// Euclidean distance. Throws std::invalid_argument on dimension mismatch
// (caller bug).
double distance(std::span<const double> a, std::span<const double> b);
double distance(const Embedding& a, const Embedding& b);

double squared_distance(std::span<const double> a, std::span<const double> b);

// Per-dimension maxima used to map raw cues into [0,1]; stored so that
// held-out data is normalized with the maxima fitted on training records.
struct CueNormalizers {
    std::array<double, 3> location_max{1.0, 1.0, 1.0};
    std::array<double, 2> size_max{1.0, 1.0};
    bool fitted = false;
};

struct Dataset {
    std::vector<LesionRecord> records;
    int feature_dim = 0;
    CueNormalizers cue_normalizers;

    // Index of the record with this lesion_id, or -1.
    int find(int64_t lesion_id) const;
};

// Checks Dataset invariants: unique lesion ids and a consistent feature
// dimension. Throws ValidationError.
void validate(const Dataset& ds);

}  // namespace lg
