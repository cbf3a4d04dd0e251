#pragma once

// Literal, phase-by-phase reference for intra-patient matching, used as an
// oracle against the production implementation. Written for transparency:
// plain lists, repeated scans, explicit set comprehension for the exclusion
// rule, breadth-first component extraction.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <vector>

#include "lg/graph.hpp"
#include "lg/model.hpp"

struct NaiveSuperNode {
    int64_t id;     // smallest member lesion id
    int64_t study;
    std::vector<int64_t> members;
    lg::Vec mean;
};

struct NaiveEdge {
    int u, w;
    double d;
};

struct NaiveMatchResult {
    std::vector<NaiveSuperNode> nodes;
    std::vector<NaiveEdge> kept;  // edges surviving threshold + exclusion
    std::vector<std::vector<int64_t>> groups;
};

inline NaiveMatchResult naive_match(const std::vector<lg::PatientLesion>& lesions,
                                    const lg::MatchingConfig& cfg) {
    NaiveMatchResult res;
    const int n = static_cast<int>(lesions.size());
    if (n == 0) return res;

    // Phase 1: merge. Components of the graph whose edges are same-study
    // pairs closer than t1, found by breadth-first search.
    std::vector<std::vector<int>> adj(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            if (lesions[i].study_id != lesions[j].study_id) continue;
            if (lg::distance(lesions[i].embedding, lesions[j].embedding) < cfg.t1) {
                adj[i].push_back(j);
            }
        }
    }
    std::vector<int> component(n, -1);
    int n_comp = 0;
    for (int i = 0; i < n; ++i) {
        if (component[i] >= 0) continue;
        std::deque<int> queue{i};
        component[i] = n_comp;
        while (!queue.empty()) {
            const int u = queue.front();
            queue.pop_front();
            for (int v : adj[u]) {
                if (component[v] < 0) {
                    component[v] = n_comp;
                    queue.push_back(v);
                }
            }
        }
        ++n_comp;
    }
    res.nodes.resize(n_comp);
    for (auto& sn : res.nodes) sn.id = -1;
    for (int i = 0; i < n; ++i) {
        NaiveSuperNode& sn = res.nodes[component[i]];
        if (sn.id < 0 || lesions[i].lesion_id < sn.id) sn.id = lesions[i].lesion_id;
        sn.study = lesions[i].study_id;
        sn.members.push_back(lesions[i].lesion_id);
        if (sn.mean.empty()) sn.mean.assign(lesions[i].embedding.size(), 0.0);
        for (size_t d = 0; d < sn.mean.size(); ++d) sn.mean[d] += lesions[i].embedding[d];
    }
    for (auto& sn : res.nodes) {
        for (double& v : sn.mean) v /= static_cast<double>(sn.members.size());
        std::sort(sn.members.begin(), sn.members.end());
    }

    // Phase 2: threshold.
    std::vector<NaiveEdge> edges;
    for (int u = 0; u < n_comp; ++u) {
        for (int w = u + 1; w < n_comp; ++w) {
            const double d = lg::distance(res.nodes[u].mean, res.nodes[w].mean);
            if (!(d > cfg.t2)) edges.push_back({u, w, d});
        }
    }

    // Phase 3: exclusion, literally: drop <i,j> when some kept edge <i,k>
    // into j's study is closer (ties kept toward the smaller node id),
    // evaluated simultaneously against the post-threshold edge list.
    auto removed = std::vector<bool>(edges.size(), false);
    for (size_t e = 0; e < edges.size(); ++e) {
        for (size_t f = 0; f < edges.size(); ++f) {
            if (e == f) continue;
            const int pivots_e[2] = {edges[e].u, edges[e].w};
            const int others_e[2] = {edges[e].w, edges[e].u};
            const int pivots_f[2] = {edges[f].u, edges[f].w};
            const int others_f[2] = {edges[f].w, edges[f].u};
            for (int a = 0; a < 2; ++a) {
                for (int b = 0; b < 2; ++b) {
                    if (pivots_e[a] != pivots_f[b]) continue;
                    const int j = others_e[a];
                    const int k = others_f[b];
                    if (res.nodes[j].study != res.nodes[k].study) continue;
                    if (edges[f].d < edges[e].d ||
                        (edges[f].d == edges[e].d && res.nodes[k].id < res.nodes[j].id)) {
                        removed[e] = true;
                    }
                }
            }
        }
    }
    for (size_t e = 0; e < edges.size(); ++e) {
        if (!removed[e]) res.kept.push_back(edges[e]);
    }

    // Phase 4: extraction.
    std::vector<std::vector<int>> gadj(n_comp);
    for (const auto& e : res.kept) {
        gadj[e.u].push_back(e.w);
        gadj[e.w].push_back(e.u);
    }
    std::vector<int> gcomp(n_comp, -1);
    int ng = 0;
    for (int i = 0; i < n_comp; ++i) {
        if (gcomp[i] >= 0) continue;
        std::deque<int> queue{i};
        gcomp[i] = ng;
        while (!queue.empty()) {
            const int u = queue.front();
            queue.pop_front();
            for (int v : gadj[u]) {
                if (gcomp[v] < 0) {
                    gcomp[v] = ng;
                    queue.push_back(v);
                }
            }
        }
        ++ng;
    }
    res.groups.assign(ng, {});
    for (int i = 0; i < n_comp; ++i) {
        res.groups[gcomp[i]].insert(res.groups[gcomp[i]].end(), res.nodes[i].members.begin(),
                                    res.nodes[i].members.end());
    }
    for (auto& g : res.groups) std::sort(g.begin(), g.end());
    std::sort(res.groups.begin(), res.groups.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
    return res;
}

// Random matching instance: up to max_lesions lesions over up to max_studies
// studies, low-dimensional embeddings so distance collisions actually occur.
inline std::vector<lg::PatientLesion> random_matching_instance(lg::Rng& rng, int max_lesions,
                                                               int max_studies) {
    const int n = 1 + static_cast<int>(rng.index(max_lesions));
    const int studies = 1 + static_cast<int>(rng.index(max_studies));
    std::vector<lg::PatientLesion> lesions;
    for (int i = 0; i < n; ++i) {
        lg::PatientLesion l;
        l.lesion_id = i;
        l.patient_id = 0;
        l.study_id = rng.index(studies);
        l.embedding = {rng.uniform(0.0, 0.6), rng.uniform(0.0, 0.6)};
        lesions.push_back(l);
    }
    return lesions;
}
