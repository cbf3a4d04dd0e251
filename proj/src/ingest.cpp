#include "lg/ingest.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "binio.hpp"
#include "lg/csv.hpp"
#include "lg/errors.hpp"

namespace lg {

const char* const kAnnotationColumns[20] = {
    "lesion_id", "patient_id", "study_id",  "series_id", "slice_idx",
    "long_x1",   "long_y1",    "long_x2",   "long_y2",   "short_x1",
    "short_y1",  "short_x2",   "short_y2",  "long_mm",   "short_mm",
    "loc_x",     "loc_y",      "loc_z",     "type_label", "split"};

BoundingBox bbox_from_diameters(const DiameterMeasurement& d) {
    const double xs[4] = {d.long_x1, d.long_x2, d.short_x1, d.short_x2};
    const double ys[4] = {d.long_y1, d.long_y2, d.short_y1, d.short_y2};
    const auto [x_lo, x_hi] = std::minmax_element(xs, xs + 4);
    const auto [y_lo, y_hi] = std::minmax_element(ys, ys + 4);
    if (*x_lo == *x_hi && *y_lo == *y_hi) {
        throw ValidationError("degenerate diameter measurement: all endpoints identical");
    }
    return BoundingBox{*x_lo - kBboxPaddingPx, *y_lo - kBboxPaddingPx, *x_hi + kBboxPaddingPx,
                       *y_hi + kBboxPaddingPx};
}

namespace {

std::string row_context(const csv::Reader& r) {
    return r.path() + " line " + std::to_string(r.line_number());
}

}  // namespace

Dataset parse_annotations(const std::string& path,
                          const std::optional<std::string>& features_path) {
    csv::Reader reader(path);
    int col[20];
    for (int i = 0; i < 20; ++i) col[i] = reader.required_column(kAnnotationColumns[i]);

    Dataset ds;
    std::unordered_set<int64_t> seen_ids;
    std::vector<std::string> f;
    while (reader.next(f)) {
        LesionRecord rec;
        try {
            rec.lesion_id = csv::parse_int(f[col[0]]);
            rec.patient_id = csv::parse_int(f[col[1]]);
            rec.study_id = csv::parse_int(f[col[2]]);
            rec.series_id = csv::parse_int(f[col[3]]);
            rec.slice_idx = csv::parse_int(f[col[4]]);
            auto& d = rec.diameters;
            d.long_x1 = csv::parse_double(f[col[5]]);
            d.long_y1 = csv::parse_double(f[col[6]]);
            d.long_x2 = csv::parse_double(f[col[7]]);
            d.long_y2 = csv::parse_double(f[col[8]]);
            d.short_x1 = csv::parse_double(f[col[9]]);
            d.short_y1 = csv::parse_double(f[col[10]]);
            d.short_x2 = csv::parse_double(f[col[11]]);
            d.short_y2 = csv::parse_double(f[col[12]]);
            d.long_mm = csv::parse_double(f[col[13]]);
            d.short_mm = csv::parse_double(f[col[14]]);
            rec.cues.location[0] = csv::parse_double(f[col[15]]);
            rec.cues.location[1] = csv::parse_double(f[col[16]]);
            rec.cues.location[2] = csv::parse_double(f[col[17]]);
            if (!f[col[18]].empty()) {
                rec.true_type = static_cast<int>(csv::parse_int(f[col[18]]));
            }
            rec.split = split_from_string(f[col[19]]);
        } catch (const ValidationError& e) {
            throw ValidationError(row_context(reader) + ": " + e.what());
        }
        if (rec.diameters.long_mm < rec.diameters.short_mm || rec.diameters.short_mm <= 0) {
            throw ValidationError(row_context(reader) + ": diameters must satisfy long_mm >= short_mm > 0");
        }
        rec.cues.size[0] = rec.diameters.long_mm;
        rec.cues.size[1] = rec.diameters.short_mm;
        // Seed labels are trusted supervision; their cue label is fixed here
        // and never overwritten by pseudo-labeling.
        if (rec.split == Split::seed) rec.cues.type_label = rec.true_type;
        if (!seen_ids.insert(rec.lesion_id).second) {
            throw ValidationError(path + ": duplicate lesion_id " + std::to_string(rec.lesion_id));
        }
        ds.records.push_back(std::move(rec));
    }
    if (features_path) load_features(ds, *features_path);
    return ds;
}

void write_annotations(const Dataset& ds, const std::string& path) {
    csv::Writer w(path);
    std::vector<std::string> header(kAnnotationColumns, kAnnotationColumns + 20);
    w.write_row(header);
    for (const auto& r : ds.records) {
        const auto& d = r.diameters;
        w.write_row({csv::format(r.lesion_id), csv::format(r.patient_id), csv::format(r.study_id),
                     csv::format(r.series_id), csv::format(r.slice_idx), csv::format(d.long_x1),
                     csv::format(d.long_y1), csv::format(d.long_x2), csv::format(d.long_y2),
                     csv::format(d.short_x1), csv::format(d.short_y1), csv::format(d.short_x2),
                     csv::format(d.short_y2), csv::format(d.long_mm), csv::format(d.short_mm),
                     csv::format(r.cues.location[0]), csv::format(r.cues.location[1]),
                     csv::format(r.cues.location[2]),
                     r.true_type ? csv::format(static_cast<int64_t>(*r.true_type)) : std::string(),
                     std::string(split_to_string(r.split))});
    }
}

void load_features_csv(Dataset& ds, const std::string& path) {
    csv::Reader reader(path);
    const int id_col = reader.required_column("lesion_id");
    const int dim = static_cast<int>(reader.header().size()) - 1;
    if (dim <= 0) throw ValidationError(path + ": no feature columns");

    std::unordered_map<int64_t, size_t> by_id;
    by_id.reserve(ds.records.size());
    for (size_t i = 0; i < ds.records.size(); ++i) by_id[ds.records[i].lesion_id] = i;

    size_t joined = 0;
    std::vector<std::string> f;
    while (reader.next(f)) {
        int64_t id;
        Vec feat(dim);
        try {
            id = csv::parse_int(f[id_col]);
            int j = 0;
            for (int c = 0; c < static_cast<int>(f.size()); ++c) {
                if (c == id_col) continue;
                feat[j++] = csv::parse_double(f[c]);
            }
        } catch (const ValidationError& e) {
            throw ValidationError(row_context(reader) + ": " + e.what());
        }
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            throw ValidationError(path + ": feature row for unknown lesion_id " + std::to_string(id));
        }
        ds.records[it->second].feature = std::move(feat);
        ++joined;
    }
    if (joined != ds.records.size()) {
        throw ValidationError(path + ": " + std::to_string(joined) + " feature rows for " +
                              std::to_string(ds.records.size()) + " annotation rows");
    }
    ds.feature_dim = dim;
}

namespace {

constexpr char kFeatureMagic[4] = {'L', 'G', 'F', '1'};

using binio::get_f64;
using binio::get_u32;
using binio::put_f64;
using binio::put_u32;

}  // namespace

void load_features_binary(Dataset& ds, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) throw ValidationError("cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kFeatureMagic, 4) != 0) {
        throw ValidationError(path + ": bad magic, expected LGF1");
    }
    const uint32_t count = get_u32(in);
    const uint32_t dim = get_u32(in);
    if (!in || dim == 0) throw ValidationError(path + ": bad header");
    if (count != ds.records.size()) {
        throw ValidationError(path + ": " + std::to_string(count) + " feature rows for " +
                              std::to_string(ds.records.size()) + " annotation rows");
    }
    for (uint32_t i = 0; i < count; ++i) {
        Vec feat(dim);
        for (uint32_t j = 0; j < dim; ++j) feat[j] = get_f64(in);
        if (!in) throw ValidationError(path + ": truncated feature data");
        ds.records[i].feature = std::move(feat);
    }
    ds.feature_dim = static_cast<int>(dim);
}

void load_features(Dataset& ds, const std::string& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe.is_open()) throw ValidationError("cannot open '" + path + "'");
    char magic[4] = {0, 0, 0, 0};
    probe.read(magic, 4);
    probe.close();
    if (std::memcmp(magic, kFeatureMagic, 4) == 0) {
        load_features_binary(ds, path);
    } else {
        load_features_csv(ds, path);
    }
}

void write_features_csv(const Dataset& ds, const std::string& path) {
    csv::Writer w(path);
    std::vector<std::string> header{"lesion_id"};
    for (int j = 0; j < ds.feature_dim; ++j) header.push_back("f_" + std::to_string(j));
    w.write_row(header);
    for (const auto& r : ds.records) {
        std::vector<std::string> row{csv::format(r.lesion_id)};
        for (double v : r.feature) row.push_back(csv::format(v));
        w.write_row(row);
    }
}

void write_features_binary(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out.is_open()) throw Error("cannot create '" + path + "'");
    out.write(kFeatureMagic, 4);
    put_u32(out, static_cast<uint32_t>(ds.records.size()));
    put_u32(out, static_cast<uint32_t>(ds.feature_dim));
    for (const auto& r : ds.records) {
        for (double v : r.feature) put_f64(out, v);
    }
    if (!out) throw Error("write failed on '" + path + "'");
}

Dataset normalize_cues(const Dataset& ds) {
    if (ds.cue_normalizers.fitted) return ds;

    CueNormalizers n;
    n.location_max = {0.0, 0.0, 0.0};
    n.size_max = {0.0, 0.0};
    bool any_training = false;
    for (const auto& r : ds.records) {
        if (r.split == Split::validation || r.split == Split::test) continue;
        any_training = true;
        for (int i = 0; i < 3; ++i) n.location_max[i] = std::max(n.location_max[i], r.cues.location[i]);
        for (int i = 0; i < 2; ++i) n.size_max[i] = std::max(n.size_max[i], r.cues.size[i]);
    }
    if (!any_training) throw ValidationError("normalize_cues: no training records to fit normalizers");
    for (int i = 0; i < 3; ++i) {
        if (n.location_max[i] <= 0.0) {
            throw ValidationError("normalize_cues: non-positive maximum in location dimension " +
                                  std::to_string(i));
        }
    }
    for (int i = 0; i < 2; ++i) {
        if (n.size_max[i] <= 0.0) {
            throw ValidationError("normalize_cues: non-positive maximum in size dimension " +
                                  std::to_string(i));
        }
    }
    n.fitted = true;
    return apply_normalizers(ds, n);
}

Dataset apply_normalizers(const Dataset& ds, const CueNormalizers& n) {
    Dataset out = ds;
    out.cue_normalizers = n;
    for (auto& r : out.records) {
        for (int i = 0; i < 3; ++i) r.cues.location[i] /= n.location_max[i];
        for (int i = 0; i < 2; ++i) r.cues.size[i] /= n.size_max[i];
    }
    return out;
}

}  // namespace lg
