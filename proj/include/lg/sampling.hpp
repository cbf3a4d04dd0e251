#pragma once

#include <array>
#include <span>
#include <vector>

#include "lg/model.hpp"
#include "lg/net.hpp"
#include "lg/rng.hpp"

namespace lg {

struct SamplerConfig {
    double t_low = 0.02;   // cue distance below which location/size count as similar
    double t_high = 0.1;   // cue distance above which they count as dissimilar
    int max_redraws = 50;  // anchor redraws before reporting starvation
    bool forbid_same_patient = false;
};

struct MarginConfig {
    double m1 = 0.1;
    double m2 = 0.2;
    double m3 = 0.4;
    int sequences_per_batch = 24;
};

// Ordered quintuple of record indices with hierarchically relaxing
// similarity to the anchor A:
//   B same type, similar location, similar size;
//   C same type, similar location, dissimilar size;
//   D same type, dissimilar location;
//   E different type.
// Cue distances inside (t_low, t_high] qualify as neither.
struct Sequence {
    int a, b, c, d, e;
};

// Draws one sequence. Anchors whose candidate sets starve are redrawn up to
// cfg.max_redraws times; afterwards an Error names the starving slot. The
// candidate pool must contain at least two type classes.
Sequence sample_sequence(const Dataset& ds, std::span<const int> pool, const SamplerConfig& cfg,
                         Rng& rng);

struct TripletLossResult {
    double loss = 0.0;
    // grads[s][r]: gradient of the loss w.r.t. the embedding of role r
    // (0=A .. 4=E) in sequence s.
    std::vector<std::array<Vec, 5>> grads;
    double min_hinge_distance = 0.0;  // min |hinge argument| over all terms
};

// Mean over sequences of the three hinge terms on squared embedding
// distances, with margins m1 <= ABC, m2 <= ACD, m3 <= ADE:
//   (1/2S) sum_s [ max(0, d2_AB - d2_AC + m1)
//                + max(0, d2_AC - d2_AD + m2)
//                + max(0, d2_AD - d2_AE + m3) ].
// A hinge exactly at zero contributes zero gradient.
TripletLossResult hierarchical_triplet_loss(const std::vector<std::array<Vec, 5>>& embeddings,
                                            const MarginConfig& m);

struct TrainHistoryRow {
    int iteration;
    double loss;
    double lr;
};

// Runs max_iterations mini-batches of sequences_per_batch sequences drawn
// from `pool`, updating `net` in place by SGD with classical momentum on
// the batch gradients. Deterministic under a fixed rng. Returns the
// per-iteration loss history.
std::vector<TrainHistoryRow> train_triplet(const Dataset& ds, std::span<const int> pool, Mlp& net,
                                           const SGDConfig& sgd, const SamplerConfig& sampler,
                                           const MarginConfig& margins, Rng& rng);

// Record indices eligible for triplet training: unlabeled split with an
// assigned pseudo-label. Seed records carry trusted labels but are held out
// of the triplet batches.
std::vector<int> training_pool(const Dataset& ds);

}  // namespace lg
