#pragma once

#include <optional>
#include <string>

#include "lg/model.hpp"

namespace lg {

struct BoundingBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

inline constexpr double kBboxPaddingPx = 5.0;

// Tight axis-aligned box over the four diameter endpoints, padded by
// kBboxPaddingPx on each side. Throws ValidationError when all endpoints
// coincide.
BoundingBox bbox_from_diameters(const DiameterMeasurement& d);

// Annotation table columns, in file order. `type_label` is empty for
// unlabeled rows; `split` is one of seed|val|test|unlabeled.
extern const char* const kAnnotationColumns[20];

// Parses an annotation CSV into a Dataset. Rows with unparseable numerics are
// rejected with their line number; duplicate lesion ids are an error. When
// `features_path` is given the feature file is loaded and joined.
Dataset parse_annotations(const std::string& path,
                          const std::optional<std::string>& features_path = std::nullopt);

void write_annotations(const Dataset& ds, const std::string& path);

// Feature files come in two flavors:
//   - CSV `lesion_id,f_0..f_{D-1}`, joined on lesion_id;
//   - flat binary: magic "LGF1", u32 row count, u32 D, then count*D
//     little-endian f64 in row-major order. Binary rows are positional and
//     must follow the annotation table's row order.
// load_features sniffs the format from the file's first four bytes.
void load_features(Dataset& ds, const std::string& path);
void load_features_csv(Dataset& ds, const std::string& path);
void load_features_binary(Dataset& ds, const std::string& path);
void write_features_csv(const Dataset& ds, const std::string& path);
void write_features_binary(const Dataset& ds, const std::string& path);

// Divides every cue dimension by its maximum over the training records
// (seed + unlabeled splits) and stores the maxima, so held-out records are
// mapped with the same normalizers. A dataset whose normalizers are already
// fitted is returned unchanged. Throws ValidationError when any maximum is
// not strictly positive.
Dataset normalize_cues(const Dataset& ds);

// Applies previously fitted normalizers to a raw dataset (inference path).
Dataset apply_normalizers(const Dataset& ds, const CueNormalizers& n);

}  // namespace lg
