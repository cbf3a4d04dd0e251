#include "lg/net.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "binio.hpp"
#include "lg/errors.hpp"

namespace lg {

size_t Mlp::parameter_count() const {
    size_t n = 0;
    for (int l = 0; l < n_layers(); ++l) n += weights[l].a.size() + biases[l].size();
    return n;
}

Mlp make_mlp(const std::vector<int>& layer_dims, bool l2_output, Rng& rng) {
    if (layer_dims.size() < 2) throw ValidationError("mlp needs at least input and output dims");
    for (int d : layer_dims) {
        if (d <= 0) throw ValidationError("mlp layer dims must be positive");
    }
    Mlp p;
    p.layer_dims = layer_dims;
    p.l2_output = l2_output;
    for (size_t l = 0; l + 1 < layer_dims.size(); ++l) {
        const int fan_in = layer_dims[l];
        const int fan_out = layer_dims[l + 1];
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        Matrix w(fan_out, fan_in);
        for (double& v : w.a) v = rng.uniform(-bound, bound);
        p.weights.push_back(std::move(w));
        p.biases.emplace_back(fan_out, 0.0);
    }
    return p;
}

namespace {

void affine(const Matrix& w, const Vec& b, const Vec& x, Vec& out) {
    out.assign(b.begin(), b.end());
    for (int i = 0; i < w.rows; ++i) {
        double s = out[i];
        const double* row = &w.a[static_cast<size_t>(i) * w.cols];
        for (int j = 0; j < w.cols; ++j) s += row[j] * x[j];
        out[i] = s;
    }
}

}  // namespace

ForwardCache forward_batch(const Mlp& p, const std::vector<Vec>& inputs) {
    const int L = p.n_layers();
    ForwardCache c;
    c.inputs = inputs;
    c.pre.assign(L, {});
    c.act.assign(L, {});
    c.outputs.resize(inputs.size());
    c.norms.resize(inputs.size());
    c.min_kink_distance = std::numeric_limits<double>::infinity();

    for (int l = 0; l < L; ++l) {
        c.pre[l].resize(inputs.size());
        c.act[l].resize(inputs.size());
    }
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (static_cast<int>(inputs[i].size()) != p.input_dim()) {
            throw std::invalid_argument("forward: input dim mismatch");
        }
        const Vec* prev = &inputs[i];
        for (int l = 0; l < L; ++l) {
            affine(p.weights[l], p.biases[l], *prev, c.pre[l][i]);
            if (l + 1 < L) {
                Vec& a = c.act[l][i];
                a = c.pre[l][i];
                for (double& v : a) {
                    c.min_kink_distance = std::min(c.min_kink_distance, std::abs(v));
                    if (v < 0.0) v = 0.0;
                }
            } else {
                c.act[l][i] = c.pre[l][i];
            }
            prev = &c.act[l][i];
        }
        const Vec& v = c.act[L - 1][i];
        double s = 0.0;
        for (double x : v) s += x * x;
        s = std::sqrt(s);
        c.norms[i] = s;
        if (p.l2_output) {
            // The normalization is singular at v = 0; treat small norms as a
            // kink so gradient audits re-draw such batches.
            c.min_kink_distance = std::min(c.min_kink_distance, s);
            const double n = s + kNormEpsilon;
            Vec y(v.size());
            for (size_t j = 0; j < v.size(); ++j) y[j] = v[j] / n;
            c.outputs[i] = std::move(y);
        } else {
            c.outputs[i] = v;
        }
    }
    return c;
}

Vec forward_one(const Mlp& p, std::span<const double> x) {
    std::vector<Vec> batch{Vec(x.begin(), x.end())};
    return forward_batch(p, batch).outputs[0];
}

Embedding forward(const Mlp& p, std::span<const double> x) {
    return Embedding{forward_one(p, x)};
}

MlpGrads zero_grads(const Mlp& p) {
    MlpGrads g;
    for (int l = 0; l < p.n_layers(); ++l) {
        g.weights.emplace_back(p.weights[l].rows, p.weights[l].cols);
        g.biases.emplace_back(p.biases[l].size(), 0.0);
    }
    return g;
}

void accumulate(MlpGrads& into, const MlpGrads& g) {
    for (size_t l = 0; l < into.weights.size(); ++l) {
        for (size_t k = 0; k < into.weights[l].a.size(); ++k) into.weights[l].a[k] += g.weights[l].a[k];
        for (size_t k = 0; k < into.biases[l].size(); ++k) into.biases[l][k] += g.biases[l][k];
    }
}

MlpGrads backward(const Mlp& p, const ForwardCache& cache,
                  const std::vector<Vec>& grad_wrt_outputs) {
    const int L = p.n_layers();
    if (grad_wrt_outputs.size() != cache.inputs.size()) {
        throw std::invalid_argument("backward: batch size mismatch");
    }
    MlpGrads g = zero_grads(p);

    Vec dz, dprev;
    for (size_t i = 0; i < cache.inputs.size(); ++i) {
        const Vec& gy = grad_wrt_outputs[i];
        if (gy.size() != cache.outputs[i].size()) {
            throw std::invalid_argument("backward: gradient dim mismatch");
        }

        // Through the normalization: y = v / (|v| + eps), so
        // dL/dv = gy/n - (gy . v) v / (|v| n^2).
        Vec dv(gy.size());
        if (p.l2_output) {
            const double s = cache.norms[i];
            if (s == 0.0) {
                std::fill(dv.begin(), dv.end(), 0.0);  // norm kink; subgradient 0
            } else {
                const double n = s + kNormEpsilon;
                const Vec& v = cache.act[L - 1][i];
                double dot = 0.0;
                for (size_t j = 0; j < v.size(); ++j) dot += gy[j] * v[j];
                const double coef = dot / (s * n * n);
                for (size_t j = 0; j < v.size(); ++j) dv[j] = gy[j] / n - coef * v[j];
            }
        } else {
            dv = gy;
        }

        dz = std::move(dv);
        for (int l = L - 1; l >= 0; --l) {
            if (l + 1 < L) {
                // ReLU gate; a dead unit (pre <= 0) passes no gradient.
                const Vec& z = cache.pre[l][i];
                for (size_t j = 0; j < dz.size(); ++j) {
                    if (z[j] <= 0.0) dz[j] = 0.0;
                }
            }
            const Vec& a_prev = (l == 0) ? cache.inputs[i] : cache.act[l - 1][i];
            Matrix& gw = g.weights[l];
            for (int r = 0; r < gw.rows; ++r) {
                const double d = dz[r];
                if (d == 0.0) continue;
                double* row = &gw.a[static_cast<size_t>(r) * gw.cols];
                for (int cidx = 0; cidx < gw.cols; ++cidx) row[cidx] += d * a_prev[cidx];
                g.biases[l][r] += d;
            }
            if (l > 0) {
                const Matrix& w = p.weights[l];
                dprev.assign(w.cols, 0.0);
                for (int r = 0; r < w.rows; ++r) {
                    const double d = dz[r];
                    if (d == 0.0) continue;
                    const double* row = &w.a[static_cast<size_t>(r) * w.cols];
                    for (int cidx = 0; cidx < w.cols; ++cidx) dprev[cidx] += d * row[cidx];
                }
                dz = dprev;
            }
        }
    }
    return g;
}

void sgd_step(Mlp& p, const MlpGrads& grads, const SGDConfig& cfg, int iteration) {
    const double lr = learning_rate_at(cfg, iteration);
    for (int l = 0; l < p.n_layers(); ++l) {
        for (size_t k = 0; k < p.weights[l].a.size(); ++k) {
            const double gv = grads.weights[l].a[k];
            if (!std::isfinite(gv)) {
                throw Error("sgd_step: non-finite gradient in layer " + std::to_string(l) +
                            " weights at iteration " + std::to_string(iteration));
            }
            p.weights[l].a[k] -= lr * gv;
        }
        for (size_t k = 0; k < p.biases[l].size(); ++k) {
            const double gv = grads.biases[l][k];
            if (!std::isfinite(gv)) {
                throw Error("sgd_step: non-finite gradient in layer " + std::to_string(l) +
                            " biases at iteration " + std::to_string(iteration));
            }
            p.biases[l][k] -= lr * gv;
        }
    }
}

namespace {

// A parameter whose analytic gradient is tiny but nonzero cannot be checked
// by central differences: the difference quotient is pure rounding noise
// while the 1e-8 denominator floor keeps the relative error large. Exactly
// dead parameters are safe (both sides are exactly zero).
bool well_conditioned(const MlpGrads& g) {
    // Rejection band: gradients big enough to be real but too small for a
    // difference quotient to resolve above rounding noise. Exact zeros and
    // cancellation residue below the band are handled by the noise gate in
    // the probe.
    constexpr double kBandLo = 1e-13;
    constexpr double kBandHi = 1e-5;
    auto in_band = [](double v) {
        const double a = std::abs(v);
        return a > kBandLo && a < kBandHi;
    };
    for (const auto& w : g.weights) {
        for (double v : w.a) {
            if (in_band(v)) return false;
        }
    }
    for (const auto& b : g.biases) {
        for (double v : b) {
            if (in_band(v)) return false;
        }
    }
    return true;
}

}  // namespace

double grad_check(const Mlp& p, const BatchLossGen& make_loss, Rng& rng, double fd_step) {
    // Batches near a ReLU kink, a hinge boundary or the normalization
    // singularity are re-drawn; the loss is only piecewise smooth and central
    // differences would straddle the joint. Ill-conditioned batches (a tiny
    // but nonzero gradient somewhere) are re-drawn for the same reason.
    constexpr double kKinkGuard = 1e-2;
    constexpr int kMaxDraws = 200;

    ParamLossFn loss_fn;
    LossEval base;
    double best_margin = -1.0;
    ParamLossFn best_fn;
    LossEval best_eval;
    for (int draw = 0; draw < kMaxDraws; ++draw) {
        loss_fn = make_loss(rng);
        base = loss_fn(p);
        if (base.min_kink_distance >= kKinkGuard && well_conditioned(base.grads)) break;
        if (base.min_kink_distance > best_margin) {
            best_margin = base.min_kink_distance;
            best_fn = loss_fn;
            best_eval = base;
        }
        if (draw == kMaxDraws - 1) {
            loss_fn = best_fn;
            base = best_eval;
        }
    }

    Mlp q = p;
    double max_rel = 0.0;
    auto probe = [&](double& param, double analytic) {
        const double save = param;
        param = save + fd_step;
        const double up = loss_fn(q).loss;
        param = save - fd_step;
        const double down = loss_fn(q).loss;
        param = save;
        // Differences within a few ulps of the loss are measurement noise,
        // not signal (a parameter the loss is invariant to still perturbs
        // the rounding of downstream arithmetic).
        double diff = up - down;
        const double noise_floor =
            16.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(up), std::abs(down));
        if (std::abs(diff) <= noise_floor) diff = 0.0;
        const double numeric = diff / (2.0 * fd_step);
        const double rel =
            std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        max_rel = std::max(max_rel, rel);
    };
    for (int l = 0; l < q.n_layers(); ++l) {
        for (size_t k = 0; k < q.weights[l].a.size(); ++k) {
            probe(q.weights[l].a[k], base.grads.weights[l].a[k]);
        }
        for (size_t k = 0; k < q.biases[l].size(); ++k) {
            probe(q.biases[l][k], base.grads.biases[l][k]);
        }
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {
constexpr char kModelMagic[4] = {'L', 'G', 'M', '1'};
}

void save_checkpoint(const Mlp& p, const std::string& path, const std::string& sidecar_json) {
    std::ofstream out(path, std::ios::binary);
    if (!out.is_open()) throw Error("cannot create '" + path + "'");
    out.write(kModelMagic, 4);
    binio::put_u32(out, static_cast<uint32_t>(p.layer_dims.size()));
    for (int d : p.layer_dims) binio::put_u32(out, static_cast<uint32_t>(d));
    for (int l = 0; l < p.n_layers(); ++l) {
        for (double v : p.weights[l].a) binio::put_f64(out, v);
        for (double v : p.biases[l]) binio::put_f64(out, v);
    }
    if (!out) throw Error("write failed on '" + path + "'");

    std::ofstream side(path + ".json", std::ios::binary);
    if (!side.is_open()) throw Error("cannot create '" + path + ".json'");
    side << sidecar_json << '\n';
}

Mlp load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) throw ValidationError("cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kModelMagic, 4) != 0) {
        throw ValidationError(path + ": bad magic, expected LGM1");
    }
    const uint32_t n_dims = binio::get_u32(in);
    if (!in || n_dims < 2 || n_dims > 64) throw ValidationError(path + ": bad layer count");
    Mlp p;
    p.layer_dims.resize(n_dims);
    for (uint32_t i = 0; i < n_dims; ++i) p.layer_dims[i] = static_cast<int>(binio::get_u32(in));
    for (uint32_t l = 0; l + 1 < n_dims; ++l) {
        Matrix w(p.layer_dims[l + 1], p.layer_dims[l]);
        for (double& v : w.a) v = binio::get_f64(in);
        Vec b(p.layer_dims[l + 1]);
        for (double& v : b) v = binio::get_f64(in);
        if (!in) throw ValidationError(path + ": truncated parameter data");
        p.weights.push_back(std::move(w));
        p.biases.push_back(std::move(b));
    }

    std::ifstream side(path + ".json");
    if (side.is_open()) {
        nlohmann::json j = nlohmann::json::parse(side, nullptr, false);
        if (!j.is_discarded() && j.contains("l2_output")) {
            p.l2_output = j["l2_output"].get<bool>();
        }
    }
    return p;
}

std::string load_checkpoint_sidecar(const std::string& path) {
    std::ifstream side(path + ".json");
    if (!side.is_open()) return "{}";
    std::string s((std::istreambuf_iterator<char>(side)), std::istreambuf_iterator<char>());
    return s;
}

}  // namespace lg
