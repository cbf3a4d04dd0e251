#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lg/model.hpp"
#include "lg/rng.hpp"

namespace lg {

struct Matrix {
    int rows = 0, cols = 0;
    Vec a;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

    double& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }
};

struct SGDConfig {
    double learning_rate = 0.002;
    double lr_after_drop = 0.0002;
    int drop_iteration = 2000;
    int max_iterations = 3000;
    double momentum = 0.9;  // classical momentum on the mini-batch gradients
};

inline double learning_rate_at(const SGDConfig& cfg, int iteration) {
    return iteration < cfg.drop_iteration ? cfg.learning_rate : cfg.lr_after_drop;
}

// Feed-forward embedder: input -> hidden layers (ReLU) -> linear output,
// followed by L2 normalization when l2_output is set. The body-part
// regressor reuses the same machinery with a 1-d un-normalized output.
struct Mlp {
    std::vector<int> layer_dims;  // input, hidden..., output
    std::vector<Matrix> weights;  // per layer, [out x in]
    std::vector<Vec> biases;      // per layer, [out]
    bool l2_output = true;

    int input_dim() const { return layer_dims.front(); }
    int output_dim() const { return layer_dims.back(); }
    int n_layers() const { return static_cast<int>(weights.size()); }
    size_t parameter_count() const;
};

// Glorot-uniform initialization: U(-sqrt(6/(fan_in+fan_out)), +...).
Mlp make_mlp(const std::vector<int>& layer_dims, bool l2_output, Rng& rng);

// Norm floor added before dividing, so a zero pre-normalization vector maps
// to zero output instead of NaN.
inline constexpr double kNormEpsilon = 1e-12;

struct ForwardCache {
    std::vector<Vec> inputs;
    // pre[l][i], act[l][i]: pre-activation and activation of item i after
    // layer l (act of the last layer is the pre-normalization output).
    std::vector<std::vector<Vec>> pre;
    std::vector<std::vector<Vec>> act;
    std::vector<Vec> outputs;      // post L2 normalization when enabled
    std::vector<double> norms;     // pre-normalization L2 norms
    double min_kink_distance = 0;  // min |pre-activation| over hidden ReLU units
};

Vec forward_one(const Mlp& p, std::span<const double> x);
Embedding forward(const Mlp& p, std::span<const double> x);
ForwardCache forward_batch(const Mlp& p, const std::vector<Vec>& inputs);

struct MlpGrads {
    std::vector<Matrix> weights;
    std::vector<Vec> biases;
};

MlpGrads zero_grads(const Mlp& p);
void accumulate(MlpGrads& into, const MlpGrads& g);

// Exact gradients of the composed map, including the L2-normalization
// Jacobian (I - uu^T)/|v|. grad_wrt_outputs[i] is dLoss/d(output of item i);
// returns dLoss/d(parameters) summed over the batch.
MlpGrads backward(const Mlp& p, const ForwardCache& cache, const std::vector<Vec>& grad_wrt_outputs);

// p <- p - lr(iteration) * grads. Throws Error on non-finite gradients.
void sgd_step(Mlp& p, const MlpGrads& grads, const SGDConfig& cfg, int iteration);

// -------------------------------------------------------------------------
// Finite-difference audit
// -------------------------------------------------------------------------

struct LossEval {
    double loss = 0.0;
    MlpGrads grads;
    // Distance to the nearest non-smooth point (ReLU kink or loss hinge);
    // batches too close to one are re-drawn before differencing.
    double min_kink_distance = 0.0;
};

// Evaluates loss and analytic parameter gradients at the given parameters,
// for whatever batch the closure captured.
using ParamLossFn = std::function<LossEval(const Mlp&)>;

// Draws a fresh batch and returns the loss closure over it.
using BatchLossGen = std::function<ParamLossFn(Rng&)>;

// Central finite differences over every parameter. Relative error per
// parameter is |analytic - numeric| / max(1e-8, |analytic| + |numeric|);
// the maximum over parameters is returned.
double grad_check(const Mlp& p, const BatchLossGen& make_loss, Rng& rng, double fd_step = 1e-5);

// -------------------------------------------------------------------------
// Checkpoints: binary "LGM1" file (dims, then per-layer weights and biases
// as little-endian f64) plus a JSON sidecar at path + ".json" carrying
// l2_output, the training config and the iteration count.
// -------------------------------------------------------------------------

void save_checkpoint(const Mlp& p, const std::string& path, const std::string& sidecar_json);
Mlp load_checkpoint(const std::string& path);
std::string load_checkpoint_sidecar(const std::string& path);

}  // namespace lg
