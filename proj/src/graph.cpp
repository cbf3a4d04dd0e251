#include "lg/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "lg/errors.hpp"

namespace lg {

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

std::vector<RetrievalHit> retrieve(const EmbeddingIndex& index, int query_index, int k,
                                   bool exclude_query_patient) {
    if (query_index < 0 || static_cast<size_t>(query_index) >= index.size()) {
        throw std::invalid_argument("retrieve: query index out of range");
    }
    const Vec& q = index.embeddings[query_index];
    const int64_t q_patient = index.patient_ids[query_index];

    std::vector<RetrievalHit> hits;
    hits.reserve(index.size());
    for (size_t i = 0; i < index.size(); ++i) {
        if (static_cast<int>(i) == query_index) continue;
        if (exclude_query_patient && index.patient_ids[i] == q_patient) continue;
        hits.push_back({static_cast<int>(i), index.lesion_ids[i], distance(index.embeddings[i], q)});
    }
    if (k < 1 || static_cast<size_t>(k) > hits.size()) {
        throw ValidationError("retrieve: k=" + std::to_string(k) + " out of range, " +
                              std::to_string(hits.size()) + " candidates");
    }
    std::partial_sort(hits.begin(), hits.begin() + k, hits.end(),
                      [](const RetrievalHit& a, const RetrievalHit& b) {
                          if (a.distance != b.distance) return a.distance < b.distance;
                          return a.lesion_id < b.lesion_id;
                      });
    hits.resize(k);
    return hits;
}

// ---------------------------------------------------------------------------
// Retrieval error
// ---------------------------------------------------------------------------

double are_continuous(std::span<const double> query_cue, const std::vector<Vec>& retrieved_cues) {
    if (retrieved_cues.empty()) throw std::invalid_argument("are_continuous: empty retrieval list");
    double sum = 0.0;
    for (const Vec& t : retrieved_cues) sum += distance(query_cue, t);
    return sum / static_cast<double>(retrieved_cues.size());
}

double are_type(int query_type, std::span<const int> retrieved_types) {
    if (retrieved_types.empty()) throw std::invalid_argument("are_type: empty retrieval list");
    size_t same = 0;
    for (int t : retrieved_types) {
        if (t == query_type) ++same;
    }
    return 1.0 - static_cast<double>(same) / static_cast<double>(retrieved_types.size());
}

// ---------------------------------------------------------------------------
// Intra-patient matching
// ---------------------------------------------------------------------------

namespace {

struct UnionFind {
    std::vector<int> parent;

    explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }

    int find(int x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }

    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

struct SuperNode {
    int64_t id;  // smallest member lesion_id, the global tie-breaker
    int64_t study;
    std::vector<int64_t> members;
    Vec embedding;  // arithmetic mean of member embeddings
};

}  // namespace

std::vector<std::vector<int64_t>> match_lesions(std::span<const PatientLesion> lesions,
                                                const MatchingConfig& cfg) {
    if (!(cfg.t1 > 0.0) || !(cfg.t2 > cfg.t1)) {
        throw ValidationError("matching: need 0 < t1 < t2");
    }
    if (lesions.empty()) return {};
    for (const auto& l : lesions) {
        if (l.patient_id != lesions.front().patient_id) {
            throw ValidationError("matching: lesions of mixed patients");
        }
    }
    const int n = static_cast<int>(lesions.size());

    // Merge: same-study nodes closer than t1, transitively.
    UnionFind uf(n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (lesions[i].study_id != lesions[j].study_id) continue;
            if (distance(lesions[i].embedding, lesions[j].embedding) < cfg.t1) uf.unite(i, j);
        }
    }
    std::map<int, SuperNode> roots;
    for (int i = 0; i < n; ++i) {
        SuperNode& sn = roots[uf.find(i)];
        if (sn.members.empty()) {
            sn.id = lesions[i].lesion_id;
            sn.study = lesions[i].study_id;
            sn.embedding.assign(lesions[i].embedding.size(), 0.0);
        }
        sn.id = std::min(sn.id, lesions[i].lesion_id);
        sn.members.push_back(lesions[i].lesion_id);
        for (size_t d = 0; d < sn.embedding.size(); ++d) sn.embedding[d] += lesions[i].embedding[d];
    }
    std::vector<SuperNode> nodes;
    nodes.reserve(roots.size());
    for (auto& [root, sn] : roots) {
        for (double& v : sn.embedding) v /= static_cast<double>(sn.members.size());
        nodes.push_back(std::move(sn));
    }
    const int m = static_cast<int>(nodes.size());

    // Threshold: the post-threshold graph, edges with d <= t2.
    struct Edge {
        int u, w;
        double d;
    };
    std::vector<Edge> edges;
    for (int u = 0; u < m; ++u) {
        for (int w = u + 1; w < m; ++w) {
            const double d = distance(nodes[u].embedding, nodes[w].embedding);
            if (d <= cfg.t2) edges.push_back({u, w, d});
        }
    }

    // Exclusion: per (node, target study) keep only the closest edge, ties
    // toward the smaller node id; an edge survives when it wins the slot at
    // both endpoints. All comparisons run against the post-threshold graph.
    auto better = [&](const Edge& a, int a_other, const Edge& b, int b_other) {
        if (a.d != b.d) return a.d < b.d;
        return nodes[a_other].id < nodes[b_other].id;
    };
    std::map<std::pair<int, int64_t>, int> slot_best;  // (node, study) -> edge index
    for (int e = 0; e < static_cast<int>(edges.size()); ++e) {
        const Edge& ed = edges[e];
        const std::pair<int, int64_t> slots[2] = {{ed.u, nodes[ed.w].study},
                                                  {ed.w, nodes[ed.u].study}};
        const int others[2] = {ed.w, ed.u};
        for (int side = 0; side < 2; ++side) {
            auto [it, inserted] = slot_best.try_emplace(slots[side], e);
            if (!inserted) {
                const Edge& cur = edges[it->second];
                const int cur_other = cur.u == slots[side].first ? cur.w : cur.u;
                if (better(ed, others[side], cur, cur_other)) it->second = e;
            }
        }
    }
    UnionFind groups(m);
    for (int e = 0; e < static_cast<int>(edges.size()); ++e) {
        const Edge& ed = edges[e];
        const auto u_slot = slot_best.find({ed.u, nodes[ed.w].study});
        const auto w_slot = slot_best.find({ed.w, nodes[ed.u].study});
        if (u_slot->second == e && w_slot->second == e) groups.unite(ed.u, ed.w);
    }

    // Extraction: connected components, expanded back to lesion ids.
    std::map<int, std::vector<int64_t>> comps;
    for (int u = 0; u < m; ++u) {
        auto& members = comps[groups.find(u)];
        members.insert(members.end(), nodes[u].members.begin(), nodes[u].members.end());
    }
    std::vector<std::vector<int64_t>> out;
    out.reserve(comps.size());
    for (auto& [root, members] : comps) {
        std::sort(members.begin(), members.end());
        out.push_back(std::move(members));
    }
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return out;
}

// ---------------------------------------------------------------------------
// Pairwise precision / recall
// ---------------------------------------------------------------------------

namespace {

std::map<int64_t, int> group_map(const std::vector<std::vector<int64_t>>& groups,
                                 const char* which) {
    std::map<int64_t, int> gm;
    for (size_t g = 0; g < groups.size(); ++g) {
        for (int64_t id : groups[g]) {
            if (!gm.emplace(id, static_cast<int>(g)).second) {
                throw ValidationError(std::string("pairwise_pr: lesion ") + std::to_string(id) +
                                      " appears twice in " + which);
            }
        }
    }
    return gm;
}

int64_t pairs_of(int64_t c) { return c * (c - 1) / 2; }

}  // namespace

PairCounts pair_counts(const std::vector<std::vector<int64_t>>& predicted,
                       const std::vector<std::vector<int64_t>>& truth) {
    const auto pm = group_map(predicted, "predicted");
    const auto tm = group_map(truth, "truth");
    if (pm.size() != tm.size()) {
        throw ValidationError("pairwise_pr: partitions cover different lesion sets");
    }
    for (const auto& [id, g] : pm) {
        if (!tm.count(id)) {
            throw ValidationError("pairwise_pr: lesion " + std::to_string(id) +
                                  " missing from truth");
        }
    }

    // Contingency counts; exact integer arithmetic, identical to enumerating
    // all unordered pairs.
    std::map<std::pair<int, int>, int64_t> cell;
    std::map<int, int64_t> pred_sizes, truth_sizes;
    for (const auto& [id, pg] : pm) {
        const int tg = tm.at(id);
        ++cell[{pg, tg}];
        ++pred_sizes[pg];
        ++truth_sizes[tg];
    }
    int64_t tp = 0, pred_pairs = 0, truth_pairs = 0;
    for (const auto& [key, c] : cell) tp += pairs_of(c);
    for (const auto& [g, c] : pred_sizes) pred_pairs += pairs_of(c);
    for (const auto& [g, c] : truth_sizes) truth_pairs += pairs_of(c);
    return PairCounts{tp, pred_pairs - tp, truth_pairs - tp};
}

PrResult pr_from_counts(const PairCounts& c) {
    PrResult r;
    r.counts = c;
    r.precision = (c.tp + c.fp) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fp) : 1.0;
    r.recall = (c.tp + c.fn) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fn) : 1.0;
    r.f1 = (r.precision + r.recall) > 0.0
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;
    return r;
}

PrResult pairwise_pr(const std::vector<std::vector<int64_t>>& predicted,
                     const std::vector<std::vector<int64_t>>& truth) {
    return pr_from_counts(pair_counts(predicted, truth));
}

// ---------------------------------------------------------------------------
// PR curve and AUC
// ---------------------------------------------------------------------------

PrCurve pr_curve_auc(std::span<const MatchingCase> cases, double t1,
                     std::span<const double> t2_sweep) {
    if (t2_sweep.size() < 2) throw ValidationError("pr_curve_auc: need at least 2 sweep values");
    PrCurve curve;
    for (double t2 : t2_sweep) {
        PairCounts total;
        for (const auto& c : cases) {
            total += pair_counts(match_lesions(c.lesions, {t1, t2}), c.truth_groups);
        }
        const PrResult pr = pr_from_counts(total);
        curve.points.push_back({t2, pr.precision, pr.recall});
    }

    // Trapezoid over recall. Duplicate recalls collapse to their best
    // precision; the left end is anchored at recall 0 with the precision of
    // the lowest-recall point, and nothing is extrapolated past the largest
    // observed recall.
    std::map<double, double> by_recall;
    for (const auto& p : curve.points) {
        auto [it, inserted] = by_recall.try_emplace(p.recall, p.precision);
        if (!inserted) it->second = std::max(it->second, p.precision);
    }
    std::vector<std::pair<double, double>> pts(by_recall.begin(), by_recall.end());
    if (pts.front().first > 0.0) {
        pts.insert(pts.begin(), {0.0, pts.front().second});
    }
    double auc = 0.0;
    for (size_t i = 0; i + 1 < pts.size(); ++i) {
        auc += (pts[i + 1].first - pts[i].first) * 0.5 * (pts[i].second + pts[i + 1].second);
    }
    curve.auc = auc;
    return curve;
}

// ---------------------------------------------------------------------------
// Clustering quality
// ---------------------------------------------------------------------------

namespace {

int nearest_centroid(const Vec& x, const std::vector<Vec>& centroids) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t c = 0; c < centroids.size(); ++c) {
        const double d = squared_distance(x, centroids[c]);
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(c);
        }
    }
    return best;
}

KmeansResult kmeans_once(const std::vector<Vec>& points, int k, Rng& rng, int max_iters) {
    const int n = static_cast<int>(points.size());

    // k-means++ seeding.
    std::vector<Vec> centroids;
    centroids.reserve(k);
    centroids.push_back(points[rng.index(n)]);
    std::vector<double> d2(n);
    while (static_cast<int>(centroids.size()) < k) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const Vec& c : centroids) best = std::min(best, squared_distance(points[i], c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) {
            centroids.push_back(points[rng.index(n)]);  // all points covered exactly
            continue;
        }
        double target = rng.uniform() * total;
        int chosen = n - 1;
        for (int i = 0; i < n; ++i) {
            target -= d2[i];
            if (target <= 0.0) {
                chosen = i;
                break;
            }
        }
        centroids.push_back(points[chosen]);
    }

    std::vector<int> assignment(n, -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            const int c = nearest_centroid(points[i], centroids);
            if (c != assignment[i]) {
                assignment[i] = c;
                changed = true;
            }
        }
        // Re-seed emptied clusters from the farthest point; stealing can
        // empty another cluster, so iterate (bounded by k).
        std::vector<int> counts(k, 0);
        for (int a : assignment) ++counts[a];
        for (int guard = 0; guard < k; ++guard) {
            int empty = -1;
            for (int c = 0; c < k; ++c) {
                if (counts[c] == 0) {
                    empty = c;
                    break;
                }
            }
            if (empty < 0) break;
            int far = 0;
            double far_d = -1.0;
            for (int i = 0; i < n; ++i) {
                const double d = squared_distance(points[i], centroids[assignment[i]]);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            centroids[empty] = points[far];
            --counts[assignment[far]];
            assignment[far] = empty;
            counts[empty] = 1;
            changed = true;
        }
        const size_t dim = points.front().size();
        for (int c = 0; c < k; ++c) centroids[c].assign(dim, 0.0);
        for (int i = 0; i < n; ++i) {
            for (size_t d = 0; d < dim; ++d) centroids[assignment[i]][d] += points[i][d];
        }
        for (int c = 0; c < k; ++c) {
            for (double& v : centroids[c]) v /= counts[c];
        }
        if (!changed) break;
    }

    KmeansResult res;
    res.assignment = std::move(assignment);
    res.centroids = std::move(centroids);
    for (int i = 0; i < n; ++i) {
        res.inertia += squared_distance(points[i], res.centroids[res.assignment[i]]);
    }
    return res;
}

}  // namespace

KmeansResult kmeans(const std::vector<Vec>& points, int k, Rng& rng, int restarts, int max_iters) {
    if (k < 1 || static_cast<size_t>(k) > points.size()) {
        throw ValidationError("kmeans: k out of range");
    }
    KmeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        KmeansResult run = kmeans_once(points, k, rng, max_iters);
        if (run.inertia < best.inertia) best = std::move(run);
    }
    return best;
}

double purity(std::span<const int> clusters, std::span<const int> labels) {
    if (clusters.size() != labels.size() || clusters.empty()) {
        throw std::invalid_argument("purity: mismatched or empty inputs");
    }
    std::map<int, std::map<int, int64_t>> contingency;
    for (size_t i = 0; i < clusters.size(); ++i) ++contingency[clusters[i]][labels[i]];
    int64_t agree = 0;
    for (const auto& [c, row] : contingency) {
        int64_t mx = 0;
        for (const auto& [l, cnt] : row) mx = std::max(mx, cnt);
        agree += mx;
    }
    return static_cast<double>(agree) / static_cast<double>(clusters.size());
}

double nmi(std::span<const int> clusters, std::span<const int> labels) {
    if (clusters.size() != labels.size() || clusters.empty()) {
        throw std::invalid_argument("nmi: mismatched or empty inputs");
    }
    const double n = static_cast<double>(clusters.size());
    std::map<int, int64_t> cn, ln;
    std::map<std::pair<int, int>, int64_t> joint;
    for (size_t i = 0; i < clusters.size(); ++i) {
        ++cn[clusters[i]];
        ++ln[labels[i]];
        ++joint[{clusters[i], labels[i]}];
    }
    double hc = 0.0, hl = 0.0, mi = 0.0;
    for (const auto& [c, cnt] : cn) {
        const double p = cnt / n;
        hc -= p * std::log(p);
    }
    for (const auto& [l, cnt] : ln) {
        const double p = cnt / n;
        hl -= p * std::log(p);
    }
    for (const auto& [cl, cnt] : joint) {
        const double p = cnt / n;
        const double pc = cn[cl.first] / n;
        const double pl = ln[cl.second] / n;
        mi += p * std::log(p / (pc * pl));
    }
    if (hc + hl == 0.0) return 1.0;  // both partitions trivial, hence identical
    return 2.0 * mi / (hc + hl);
}

ClusteringEval kmeans_purity_nmi(const std::vector<Vec>& points, std::span<const int> labels,
                                 int k, Rng& rng, int restarts) {
    const KmeansResult km = kmeans(points, k, rng, restarts);
    return ClusteringEval{purity(km.assignment, labels), nmi(km.assignment, labels)};
}

}  // namespace lg
