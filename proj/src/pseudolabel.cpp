#include "lg/pseudolabel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lg/errors.hpp"

namespace lg {

namespace {

// Neighbor selection is stable under reference permutations: sorted by
// (distance, reference label, then nothing else observable). Ties at the
// k-th position are resolved toward the smaller distance/label pair, which
// is permutation-invariant because equal keys are interchangeable for the
// vote and the mean-distance tie-break.
struct Neighbor {
    double dist;
    int label;
};

}  // namespace

int KnnClassifier::predict(const Vec& query) const {
    std::vector<Neighbor> nb(references.size());
    for (size_t i = 0; i < references.size(); ++i) {
        nb[i] = {distance(references[i], query), labels[i]};
    }
    const size_t kk = static_cast<size_t>(k);
    std::partial_sort(nb.begin(), nb.begin() + kk, nb.end(), [](const Neighbor& a, const Neighbor& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        return a.label < b.label;
    });

    std::vector<int> votes(n_classes, 0);
    std::vector<double> dist_sum(n_classes, 0.0);
    for (size_t i = 0; i < kk; ++i) {
        ++votes[nb[i].label];
        dist_sum[nb[i].label] += nb[i].dist;
    }
    int best = -1;
    for (int c = 0; c < n_classes; ++c) {
        if (votes[c] == 0) continue;
        if (best < 0) {
            best = c;
            continue;
        }
        if (votes[c] > votes[best]) {
            best = c;
        } else if (votes[c] == votes[best]) {
            const double mean_c = dist_sum[c] / votes[c];
            const double mean_b = dist_sum[best] / votes[best];
            if (mean_c < mean_b) best = c;  // equal means keep the smaller class index
        }
    }
    return best;
}

KnnClassifier fit_knn(const std::vector<Vec>& references, const std::vector<int>& labels, int k,
                      int n_classes) {
    if (references.size() != labels.size() || references.empty()) {
        throw ValidationError("knn: empty or mismatched references");
    }
    if (k < 1 || static_cast<size_t>(k) > references.size()) {
        throw ValidationError("knn: k must be in [1, reference count]");
    }
    std::vector<int> counts(n_classes, 0);
    for (int l : labels) {
        if (l < 0 || l >= n_classes) throw ValidationError("knn: label out of range");
        ++counts[l];
    }
    for (int c = 0; c < n_classes; ++c) {
        if (counts[c] == 0) {
            throw ValidationError("knn: class " + std::to_string(c) + " has no seed references");
        }
    }
    return KnnClassifier{references, labels, k, n_classes};
}

std::vector<int> knn_assign(const KnnClassifier& knn, const std::vector<Vec>& queries) {
    std::vector<int> out(queries.size());
    for (size_t i = 0; i < queries.size(); ++i) out[i] = knn.predict(queries[i]);
    return out;
}

std::vector<int> fit_and_assign(Dataset& ds, const std::vector<Vec>& vectors, int k, int n_classes) {
    if (vectors.size() != ds.records.size()) {
        throw std::invalid_argument("fit_and_assign: one vector per record required");
    }
    std::vector<Vec> refs;
    std::vector<int> ref_labels;
    for (size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        if (r.split != Split::seed) continue;
        if (!r.cues.type_label) {
            throw ValidationError("seed lesion " + std::to_string(r.lesion_id) + " has no label");
        }
        refs.push_back(vectors[i]);
        ref_labels.push_back(*r.cues.type_label);
    }
    const KnnClassifier knn = fit_knn(refs, ref_labels, k, n_classes);

    std::vector<int> assigned(ds.records.size());
    for (size_t i = 0; i < ds.records.size(); ++i) {
        auto& r = ds.records[i];
        if (r.split == Split::seed) {
            assigned[i] = *r.cues.type_label;  // seed labels are never overwritten
        } else {
            assigned[i] = knn.predict(vectors[i]);
            r.cues.type_label = assigned[i];
        }
    }
    return assigned;
}

// ---------------------------------------------------------------------------
// Softmax evaluation classifier
// ---------------------------------------------------------------------------

int softmax_predict(const Matrix& weights, const Vec& x) {
    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < weights.rows; ++c) {
        double s = weights(c, weights.cols - 1);  // bias
        for (int j = 0; j + 1 < weights.cols; ++j) s += weights(c, j) * x[j];
        if (s > best_score) {
            best_score = s;
            best = c;
        }
    }
    return best;
}

SoftmaxResult softmax_classify(const std::vector<Vec>& train_x, const std::vector<int>& train_y,
                               const std::vector<Vec>& test_x, const std::vector<int>& test_y,
                               int n_classes) {
    if (train_x.empty() || train_x.size() != train_y.size()) {
        throw ValidationError("softmax: empty or mismatched training set");
    }
    if (n_classes < 2) throw ValidationError("softmax: need at least two classes");
    const int d = static_cast<int>(train_x.front().size());
    const int n = static_cast<int>(train_x.size());

    Matrix w(n_classes, d + 1);  // last column is the bias
    auto eval = [&](const Matrix& wm, Matrix* grad) {
        double loss = 0.0;
        if (grad) *grad = Matrix(n_classes, d + 1);
        Vec logits(n_classes);
        for (int i = 0; i < n; ++i) {
            const Vec& x = train_x[i];
            double mx = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < n_classes; ++c) {
                double s = wm(c, d);
                for (int j = 0; j < d; ++j) s += wm(c, j) * x[j];
                logits[c] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (int c = 0; c < n_classes; ++c) z += std::exp(logits[c] - mx);
            loss += -(logits[train_y[i]] - mx - std::log(z));
            if (grad) {
                for (int c = 0; c < n_classes; ++c) {
                    const double p = std::exp(logits[c] - mx) / z;
                    const double delta = p - (c == train_y[i] ? 1.0 : 0.0);
                    for (int j = 0; j < d; ++j) (*grad)(c, j) += delta * x[j];
                    (*grad)(c, d) += delta;
                }
            }
        }
        loss /= n;
        if (grad) {
            for (double& g : grad->a) g /= n;
        }
        return loss;
    };

    SoftmaxResult res;
    constexpr int kMaxIters = 10000;
    constexpr double kGradTol = 1e-6;
    double lr = 1.0;
    Matrix grad;
    double loss = eval(w, &grad);
    int iter = 0;
    for (; iter < kMaxIters; ++iter) {
        double gnorm = 0.0;
        for (double g : grad.a) gnorm += g * g;
        gnorm = std::sqrt(gnorm);
        res.final_grad_norm = gnorm;
        if (gnorm < kGradTol) {
            res.converged = true;
            break;
        }
        // Backtracking step: shrink until the loss does not increase.
        Matrix w_next = w;
        double loss_next;
        while (true) {
            for (size_t kidx = 0; kidx < w.a.size(); ++kidx) {
                w_next.a[kidx] = w.a[kidx] - lr * grad.a[kidx];
            }
            loss_next = eval(w_next, nullptr);
            if (!std::isfinite(loss_next)) {
                throw Error("softmax: diverged, final gradient norm " + std::to_string(gnorm));
            }
            if (loss_next <= loss || lr < 1e-12) break;
            lr *= 0.5;
        }
        w = w_next;
        loss = eval(w, &grad);
        lr = std::min(lr * 1.1, 64.0);
    }
    res.iterations = iter;
    res.weights = w;

    res.confusion = Matrix(n_classes, n_classes);
    res.predicted.resize(test_x.size());
    int correct = 0;
    for (size_t i = 0; i < test_x.size(); ++i) {
        const int p = softmax_predict(w, test_x[i]);
        res.predicted[i] = p;
        if (i < test_y.size()) {
            res.confusion(test_y[i], p) += 1.0;
            if (p == test_y[i]) ++correct;
        }
    }
    res.accuracy = test_y.empty() ? 0.0 : static_cast<double>(correct) / test_y.size();
    return res;
}

RefineResult refine(Dataset& ds, Mlp& net, const SGDConfig& sgd, const SamplerConfig& sampler,
                    const MarginConfig& margins, int knn_k, int n_classes,
                    int finetune_iterations, Rng& rng) {
    std::vector<Vec> embs(ds.records.size());
    for (size_t i = 0; i < ds.records.size(); ++i) {
        embs[i] = forward_one(net, ds.records[i].feature);
    }
    RefineResult res;
    res.pseudo_labels = fit_and_assign(ds, embs, knn_k, n_classes);

    const SGDConfig ft{sgd.lr_after_drop, sgd.lr_after_drop, 0, finetune_iterations};
    const std::vector<int> pool = training_pool(ds);
    res.finetune_history = train_triplet(ds, pool, net, ft, sampler, margins, rng);
    return res;
}

double pseudo_label_accuracy(const Dataset& ds, std::span<const int> reference_labels) {
    if (reference_labels.size() != ds.records.size()) {
        throw std::invalid_argument("pseudo_label_accuracy: one reference label per record");
    }
    size_t total = 0, correct = 0;
    for (size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        if (r.split != Split::unlabeled || !r.cues.type_label) continue;
        ++total;
        if (*r.cues.type_label == reference_labels[i]) ++correct;
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

}  // namespace lg
