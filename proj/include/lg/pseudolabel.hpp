#pragma once

#include <span>
#include <vector>

#include "lg/model.hpp"
#include "lg/net.hpp"
#include "lg/sampling.hpp"

namespace lg {

// Majority vote over the k nearest references (Euclidean). Vote ties are
// broken by the smaller mean distance among the tied classes' neighbors,
// then by the smaller class index.
struct KnnClassifier {
    std::vector<Vec> references;
    std::vector<int> labels;
    int k = 5;
    int n_classes = 0;

    int predict(const Vec& query) const;
};

// Throws ValidationError when a class in [0, n_classes) has no reference or
// k exceeds the reference count.
KnnClassifier fit_knn(const std::vector<Vec>& references, const std::vector<int>& labels, int k,
                      int n_classes);

std::vector<int> knn_assign(const KnnClassifier& knn, const std::vector<Vec>& queries);

// Fits a k-NN classifier on the seed split of `ds` (using record features or
// the given per-record vectors) and writes pseudo-labels into the cue vector
// of every non-seed record. Seed labels are never overwritten. Returns the
// assigned label per record (seed labels included).
std::vector<int> fit_and_assign(Dataset& ds, const std::vector<Vec>& vectors, int k, int n_classes);

struct SoftmaxResult {
    std::vector<int> predicted;
    double accuracy = 0.0;
    Matrix confusion;  // [true class x predicted class]
    Matrix weights;    // [class x (dim + 1)], last column is the bias
    int iterations = 0;
    double final_grad_norm = 0.0;
    bool converged = false;
};

int softmax_predict(const Matrix& weights, const Vec& x);

// Multinomial logistic regression trained by full-batch gradient descent
// with an adaptive step, stopping at gradient norm < 1e-6 or 10k iterations.
// Throws Error on divergence (non-finite loss), reporting the gradient norm.
SoftmaxResult softmax_classify(const std::vector<Vec>& train_x, const std::vector<int>& train_y,
                               const std::vector<Vec>& test_x, const std::vector<int>& test_y,
                               int n_classes);

struct RefineResult {
    std::vector<int> pseudo_labels;  // per record, after re-assignment
    std::vector<TrainHistoryRow> finetune_history;
};

// One round of iterative refinement: embed every record with the trained
// net, refit the seed classifier on the embeddings, reassign pseudo-labels,
// then fine-tune the net at the post-drop learning rate. Runs exactly once
// per call and unconditionally fine-tunes, even at a pseudo-label fixed
// point.
RefineResult refine(Dataset& ds, Mlp& net, const SGDConfig& sgd, const SamplerConfig& sampler,
                    const MarginConfig& margins, int knn_k, int n_classes,
                    int finetune_iterations, Rng& rng);

// Pseudo-label accuracy of non-seed training records against reference
// labels, used to track refinement progress.
double pseudo_label_accuracy(const Dataset& ds, std::span<const int> reference_labels);

}  // namespace lg
