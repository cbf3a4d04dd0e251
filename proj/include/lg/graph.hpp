#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lg/model.hpp"
#include "lg/rng.hpp"

namespace lg {

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

struct EmbeddingIndex {
    std::vector<int64_t> lesion_ids;
    std::vector<int64_t> patient_ids;
    std::vector<Vec> embeddings;

    size_t size() const { return lesion_ids.size(); }
};

struct RetrievalHit {
    int index;  // position in the EmbeddingIndex
    int64_t lesion_id;
    double distance;
};

// K nearest neighbors of the query (itself excluded), ascending by distance
// with lesion_id as the tie-breaker. With exclude_query_patient set, lesions
// of the query's patient are skipped. Linear scan; this is the contract any
// accelerated index must match.
std::vector<RetrievalHit> retrieve(const EmbeddingIndex& index, int query_index, int k,
                                   bool exclude_query_patient = false);

// ---------------------------------------------------------------------------
// Retrieval error
// ---------------------------------------------------------------------------

// Mean Euclidean distance between the query's cue vector and each retrieved
// cue vector: call once with 3-d locations, once with 2-d sizes.
double are_continuous(std::span<const double> query_cue, const std::vector<Vec>& retrieved_cues);

// 1 - (fraction of retrieved lesions sharing the query's type).
double are_type(int query_type, std::span<const int> retrieved_types);

// ---------------------------------------------------------------------------
// Intra-patient matching
// ---------------------------------------------------------------------------

struct MatchingConfig {
    double t1 = 0.1;  // intra-study merge threshold
    double t2 = 0.2;  // inter-study edge threshold, must exceed t1
};

struct PatientLesion {
    int64_t lesion_id;
    int64_t patient_id;
    int64_t study_id;
    Vec embedding;
};

// Groups measurements of the same physical lesion across one patient's
// studies. Four phases over the intra-patient graph:
//   merge      same-study nodes closer than t1 become one node (transitive,
//              union-find), embedding = member mean, id = smallest member id;
//   threshold  edges with distance > t2 are dropped;
//   exclusion  an edge <i,j> is dropped when some kept edge <i,k> into j's
//              study is strictly closer (simultaneously, against the
//              post-threshold graph); distance ties survive toward the
//              smaller node id;
//   extraction connected components are the groups.
// Returns groups of lesion ids, each sorted, groups ordered by smallest id.
// Throws ValidationError on t2 <= t1.
std::vector<std::vector<int64_t>> match_lesions(std::span<const PatientLesion> lesions,
                                                const MatchingConfig& cfg);

// ---------------------------------------------------------------------------
// Pairwise precision / recall over groupings
// ---------------------------------------------------------------------------

struct PairCounts {
    int64_t tp = 0, fp = 0, fn = 0;

    PairCounts& operator+=(const PairCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

struct PrResult {
    double precision = 1.0;
    double recall = 1.0;
    double f1 = 1.0;
    PairCounts counts;
};

// Counts unordered lesion pairs: TP same group in both partitions, FP same
// predicted / different truth, FN same truth / different predicted. Both
// partitions must cover the same lesion set.
PairCounts pair_counts(const std::vector<std::vector<int64_t>>& predicted,
                       const std::vector<std::vector<int64_t>>& truth);

// Precision TP/(TP+FP), recall TP/(TP+FN), 0/0 -> 1.
PrResult pairwise_pr(const std::vector<std::vector<int64_t>>& predicted,
                     const std::vector<std::vector<int64_t>>& truth);
PrResult pr_from_counts(const PairCounts& c);

// ---------------------------------------------------------------------------
// Precision-recall curve over the inter-study threshold
// ---------------------------------------------------------------------------

struct MatchingCase {
    std::vector<PatientLesion> lesions;            // one patient
    std::vector<std::vector<int64_t>> truth_groups;
};

struct PrPoint {
    double t2;
    double precision;
    double recall;
};

struct PrCurve {
    std::vector<PrPoint> points;  // one per sweep value, in sweep order
    double auc = 0.0;
};

// One matching run per t2 value, pair counts aggregated over patients. The
// AUC is the trapezoid integral of precision over recall: points are sorted
// by recall, duplicate recalls keep their best precision, and the curve is
// anchored at (recall 0, precision of the lowest-recall point); recall is
// never extrapolated upward beyond the sweep.
PrCurve pr_curve_auc(std::span<const MatchingCase> cases, double t1,
                     std::span<const double> t2_sweep);

// ---------------------------------------------------------------------------
// Clustering quality
// ---------------------------------------------------------------------------

struct KmeansResult {
    std::vector<int> assignment;
    std::vector<Vec> centroids;
    double inertia = 0.0;
};

// Lloyd's algorithm with k-means++ seeding, best inertia over `restarts`
// runs. An emptied cluster is re-seeded from the point farthest from its
// assigned centroid.
KmeansResult kmeans(const std::vector<Vec>& points, int k, Rng& rng, int restarts = 10,
                    int max_iters = 100);

double purity(std::span<const int> clusters, std::span<const int> labels);

// Mutual information normalized by the arithmetic mean of the entropies,
// 2 I(C;L) / (H(C) + H(L)), natural logs. Two trivially identical
// partitions (both single-block) score 1.
double nmi(std::span<const int> clusters, std::span<const int> labels);

struct ClusteringEval {
    double purity;
    double nmi;
};

ClusteringEval kmeans_purity_nmi(const std::vector<Vec>& points, std::span<const int> labels,
                                 int k, Rng& rng, int restarts = 10);

}  // namespace lg
