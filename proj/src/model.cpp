#include "lg/model.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "lg/errors.hpp"

namespace lg {

Split split_from_string(std::string_view s) {
    if (s == "seed") return Split::seed;
    if (s == "val") return Split::validation;
    if (s == "test") return Split::test;
    if (s == "unlabeled") return Split::unlabeled;
    throw ValidationError("unknown split value: '" + std::string(s) + "'");
}

std::string_view split_to_string(Split s) {
    switch (s) {
        case Split::seed: return "seed";
        case Split::validation: return "val";
        case Split::test: return "test";
        case Split::unlabeled: return "unlabeled";
    }
    return "unlabeled";
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("distance: dimension mismatch (" + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()) + ")");
    }
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

double distance(std::span<const double> a, std::span<const double> b) {
    return std::sqrt(squared_distance(a, b));
}

double distance(const Embedding& a, const Embedding& b) {
    return distance(std::span<const double>(a.values), std::span<const double>(b.values));
}

double location_distance(const CueVector& a, const CueVector& b) {
    return distance(std::span<const double>(a.location), std::span<const double>(b.location));
}

double size_distance(const CueVector& a, const CueVector& b) {
    return distance(std::span<const double>(a.size), std::span<const double>(b.size));
}

int Dataset::find(int64_t lesion_id) const {
    for (size_t i = 0; i < records.size(); ++i) {
        if (records[i].lesion_id == lesion_id) return static_cast<int>(i);
    }
    return -1;
}

void validate(const Dataset& ds) {
    std::unordered_set<int64_t> seen;
    seen.reserve(ds.records.size());
    for (const auto& r : ds.records) {
        if (!seen.insert(r.lesion_id).second) {
            throw ValidationError("duplicate lesion_id " + std::to_string(r.lesion_id));
        }
        if (!r.feature.empty() && static_cast<int>(r.feature.size()) != ds.feature_dim) {
            throw ValidationError("lesion " + std::to_string(r.lesion_id) + ": feature dimension " +
                                  std::to_string(r.feature.size()) + " != dataset feature_dim " +
                                  std::to_string(ds.feature_dim));
        }
    }
}

}  // namespace lg
