#include "lg/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "lg/errors.hpp"

namespace lg {

std::vector<int> training_pool(const Dataset& ds) {
    std::vector<int> pool;
    for (size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        if (r.split == Split::unlabeled && r.cues.type_label.has_value()) {
            pool.push_back(static_cast<int>(i));
        }
    }
    return pool;
}

namespace {

void check_sampler_config(const SamplerConfig& cfg) {
    if (!(cfg.t_low > 0.0) || !(cfg.t_low < cfg.t_high)) {
        throw ValidationError("sampler: need 0 < t_low < t_high");
    }
    if (cfg.max_redraws < 0) throw ValidationError("sampler: max_redraws must be >= 0");
}

const char* kSlotNames[4] = {"B", "C", "D", "E"};

}  // namespace

Sequence sample_sequence(const Dataset& ds, std::span<const int> pool, const SamplerConfig& cfg,
                         Rng& rng) {
    check_sampler_config(cfg);
    if (pool.size() < 5) throw Error("sample_sequence: pool smaller than a sequence");
    {
        std::set<int> classes;
        for (int idx : pool) {
            if (ds.records[idx].cues.type_label) classes.insert(*ds.records[idx].cues.type_label);
        }
        if (classes.size() < 2) throw Error("sample_sequence: need at least two pseudo-label classes");
    }

    std::vector<int> candidates;
    int starving_slot = -1;
    for (int attempt = 0; attempt <= cfg.max_redraws; ++attempt) {
        const int a = pool[rng.index(pool.size())];
        const auto& ra = ds.records[a];
        if (!ra.cues.type_label) continue;
        const int label_a = *ra.cues.type_label;

        Sequence seq{a, -1, -1, -1, -1};
        bool starved = false;
        for (int slot = 0; slot < 4 && !starved; ++slot) {
            candidates.clear();
            for (int idx : pool) {
                if (idx == seq.a || idx == seq.b || idx == seq.c || idx == seq.d) continue;
                const auto& r = ds.records[idx];
                if (!r.cues.type_label) continue;
                if (cfg.forbid_same_patient && r.patient_id == ra.patient_id) continue;
                const bool same_type = *r.cues.type_label == label_a;
                switch (slot) {
                    case 0:  // B: same type, similar location and size
                        if (same_type && location_distance(ra.cues, r.cues) < cfg.t_low &&
                            size_distance(ra.cues, r.cues) < cfg.t_low) {
                            candidates.push_back(idx);
                        }
                        break;
                    case 1:  // C: same type, similar location, dissimilar size
                        if (same_type && location_distance(ra.cues, r.cues) < cfg.t_low &&
                            size_distance(ra.cues, r.cues) > cfg.t_high) {
                            candidates.push_back(idx);
                        }
                        break;
                    case 2:  // D: same type, dissimilar location
                        if (same_type && location_distance(ra.cues, r.cues) > cfg.t_high) {
                            candidates.push_back(idx);
                        }
                        break;
                    case 3:  // E: different type
                        if (!same_type) candidates.push_back(idx);
                        break;
                }
            }
            if (candidates.empty()) {
                starving_slot = slot;
                starved = true;
                break;
            }
            const int pick = candidates[rng.index(candidates.size())];
            switch (slot) {
                case 0: seq.b = pick; break;
                case 1: seq.c = pick; break;
                case 2: seq.d = pick; break;
                case 3: seq.e = pick; break;
            }
        }
        if (!starved) return seq;
    }
    throw Error(std::string("sample_sequence: no candidate for slot ") +
                kSlotNames[starving_slot >= 0 ? starving_slot : 0] + " after " +
                std::to_string(cfg.max_redraws) + " anchor redraws (degenerate cue distribution)");
}

TripletLossResult hierarchical_triplet_loss(const std::vector<std::array<Vec, 5>>& embeddings,
                                            const MarginConfig& m) {
    if (!(m.m1 > 0.0 && m.m1 < m.m2 && m.m2 < m.m3)) {
        throw ValidationError("margins must satisfy 0 < m1 < m2 < m3");
    }
    const size_t S = embeddings.size();
    TripletLossResult res;
    res.min_hinge_distance = std::numeric_limits<double>::infinity();
    if (S == 0) return res;

    const double scale = 1.0 / (2.0 * static_cast<double>(S));
    res.grads.resize(S);
    for (size_t s = 0; s < S; ++s) {
        const auto& e = embeddings[s];
        const size_t dim = e[0].size();
        for (int r = 0; r < 5; ++r) res.grads[s][r].assign(dim, 0.0);

        const double d2_ab = squared_distance(e[0], e[1]);
        const double d2_ac = squared_distance(e[0], e[2]);
        const double d2_ad = squared_distance(e[0], e[3]);
        const double d2_ae = squared_distance(e[0], e[4]);

        // Each active hinge max(0, d2_ax - d2_ay + margin) contributes
        // 2*scale*((y - x) ...) through d(d2)/d(embedding).
        struct Term {
            int x, y;  // roles of the positive and negative squared distance
            double arg;
        };
        const Term terms[3] = {{1, 2, d2_ab - d2_ac + m.m1},
                               {2, 3, d2_ac - d2_ad + m.m2},
                               {3, 4, d2_ad - d2_ae + m.m3}};
        for (const Term& t : terms) {
            res.min_hinge_distance = std::min(res.min_hinge_distance, std::abs(t.arg));
            if (t.arg <= 0.0) continue;  // inactive (or exactly at the hinge)
            res.loss += scale * t.arg;
            const Vec& a = e[0];
            const Vec& x = e[t.x];
            const Vec& y = e[t.y];
            Vec& ga = res.grads[s][0];
            Vec& gx = res.grads[s][t.x];
            Vec& gy = res.grads[s][t.y];
            for (size_t j = 0; j < dim; ++j) {
                const double ax = a[j] - x[j];
                const double ay = a[j] - y[j];
                ga[j] += 2.0 * scale * (ax - ay);
                gx[j] += -2.0 * scale * ax;
                gy[j] += 2.0 * scale * ay;
            }
        }
    }
    return res;
}

std::vector<TrainHistoryRow> train_triplet(const Dataset& ds, std::span<const int> pool, Mlp& net,
                                           const SGDConfig& sgd, const SamplerConfig& sampler,
                                           const MarginConfig& margins, Rng& rng) {
    if (margins.sequences_per_batch <= 0) {
        throw ValidationError("sequences_per_batch must be positive");
    }
    std::vector<TrainHistoryRow> history;
    history.reserve(sgd.max_iterations);

    const int S = margins.sequences_per_batch;
    MlpGrads velocity = zero_grads(net);
    auto update_velocity = [&](const MlpGrads& grads) {
        for (size_t l = 0; l < velocity.weights.size(); ++l) {
            for (size_t k = 0; k < velocity.weights[l].a.size(); ++k) {
                velocity.weights[l].a[k] =
                    sgd.momentum * velocity.weights[l].a[k] + grads.weights[l].a[k];
            }
            for (size_t k = 0; k < velocity.biases[l].size(); ++k) {
                velocity.biases[l][k] = sgd.momentum * velocity.biases[l][k] + grads.biases[l][k];
            }
        }
    };
    std::vector<Vec> inputs;
    std::vector<std::array<Vec, 5>> embs(S);
    for (int iter = 0; iter < sgd.max_iterations; ++iter) {
        inputs.clear();
        for (int s = 0; s < S; ++s) {
            const Sequence q = sample_sequence(ds, pool, sampler, rng);
            const int roles[5] = {q.a, q.b, q.c, q.d, q.e};
            for (int idx : roles) inputs.push_back(ds.records[idx].feature);
        }
        ForwardCache cache = forward_batch(net, inputs);
        for (int s = 0; s < S; ++s) {
            for (int r = 0; r < 5; ++r) embs[s][r] = cache.outputs[static_cast<size_t>(s) * 5 + r];
        }
        TripletLossResult lr_res = hierarchical_triplet_loss(embs, margins);
        std::vector<Vec> grad_out(inputs.size());
        for (int s = 0; s < S; ++s) {
            for (int r = 0; r < 5; ++r) grad_out[static_cast<size_t>(s) * 5 + r] = lr_res.grads[s][r];
        }
        MlpGrads grads = backward(net, cache, grad_out);
        update_velocity(grads);
        sgd_step(net, velocity, sgd, iter);
        history.push_back({iter, lr_res.loss, learning_rate_at(sgd, iter)});
    }
    return history;
}

}  // namespace lg
