#pragma once

// Independent re-verification of sequence constraints, written directly
// against the cue definitions rather than the sampler's candidate filters.

#include <cmath>
#include <set>

#include "lg/model.hpp"
#include "lg/sampling.hpp"

inline double audit_norm(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// Returns true iff the sequence satisfies every constraint.
inline bool audit_sequence(const lg::Dataset& ds, const lg::Sequence& q, double t_low,
                           double t_high) {
    const std::set<int> distinct{q.a, q.b, q.c, q.d, q.e};
    if (distinct.size() != 5) return false;
    const auto& A = ds.records[q.a].cues;
    const auto& B = ds.records[q.b].cues;
    const auto& C = ds.records[q.c].cues;
    const auto& D = ds.records[q.d].cues;
    const auto& E = ds.records[q.e].cues;
    if (!A.type_label || !B.type_label || !C.type_label || !D.type_label || !E.type_label) {
        return false;
    }
    const int t = *A.type_label;
    if (*B.type_label != t || *C.type_label != t || *D.type_label != t) return false;
    if (*E.type_label == t) return false;

    const double loc_ab = audit_norm(A.location.data(), B.location.data(), 3);
    const double size_ab = audit_norm(A.size.data(), B.size.data(), 2);
    const double loc_ac = audit_norm(A.location.data(), C.location.data(), 3);
    const double size_ac = audit_norm(A.size.data(), C.size.data(), 2);
    const double loc_ad = audit_norm(A.location.data(), D.location.data(), 3);

    if (!(loc_ab < t_low && size_ab < t_low)) return false;
    if (!(loc_ac < t_low && size_ac > t_high)) return false;
    if (!(loc_ad > t_high)) return false;
    return true;
}
