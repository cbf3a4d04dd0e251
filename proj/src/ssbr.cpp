#include "lg/ssbr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lg/csv.hpp"
#include "lg/errors.hpp"

namespace lg {

void validate(const SSBRConfig& cfg) {
    if (cfg.m_slices < 2) throw ValidationError("ssbr: m_slices must be >= 2");
    if (cfg.volumes_per_batch <= 0) throw ValidationError("ssbr: volumes_per_batch must be positive");
    if (cfg.slices_per_batch != cfg.m_slices * cfg.volumes_per_batch) {
        throw ValidationError("ssbr: slices_per_batch must equal m_slices * volumes_per_batch");
    }
    if (cfg.learning_rate <= 0.0) throw ValidationError("ssbr: learning_rate must be positive");
    if (cfg.max_iterations < 0) throw ValidationError("ssbr: max_iterations must be >= 0");
    if (cfg.oversample_factor < 1) throw ValidationError("ssbr: oversample_factor must be >= 1");
}

int64_t feasible_slice_sets(int n_slices, int m) {
    if (m < 2) throw ValidationError("sample_slice_set: m must be >= 2");
    int64_t total = 0;
    for (int k = 1; static_cast<int64_t>(k) * (m - 1) <= n_slices - 1; ++k) {
        total += n_slices - static_cast<int64_t>(k) * (m - 1);
    }
    return total;
}

std::vector<int> sample_slice_set(int n_slices, int m, Rng& rng) {
    const int64_t total = feasible_slice_sets(n_slices, m);
    if (total <= 0) {
        throw Error("sample_slice_set: volume with " + std::to_string(n_slices) +
                    " slices too short for m=" + std::to_string(m));
    }
    int64_t t = static_cast<int64_t>(rng.index(static_cast<size_t>(total)));
    int k = 1;
    while (t >= n_slices - static_cast<int64_t>(k) * (m - 1)) {
        t -= n_slices - static_cast<int64_t>(k) * (m - 1);
        ++k;
    }
    const int j = static_cast<int>(t);
    std::vector<int> idx(m);
    for (int i = 0; i < m; ++i) idx[i] = j + k * i;
    return idx;
}

double smooth_l1(double x) {
    const double ax = std::abs(x);
    return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

double smooth_l1_grad(double x) {
    if (x > 1.0) return 1.0;
    if (x < -1.0) return -1.0;
    return x;
}

namespace {

double log_sigmoid(double x) {
    // -log(1 + e^-x), stable on both tails.
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

SsbrLossResult ssbr_loss(const std::vector<Vec>& scores) {
    SsbrLossResult res;
    res.min_kink_distance = std::numeric_limits<double>::infinity();
    res.grads.resize(scores.size());
    for (size_t v = 0; v < scores.size(); ++v) {
        const Vec& s = scores[v];
        const int m = static_cast<int>(s.size());
        res.grads[v].assign(s.size(), 0.0);
        Vec& g = res.grads[v];

        for (int i = 0; i + 1 < m; ++i) {
            const double x = s[i + 1] - s[i];
            res.order_loss -= log_sigmoid(x);
            const double d = sigmoid(x) - 1.0;  // d(-log sigmoid)/dx
            g[i + 1] += d;
            g[i] -= d;
        }
        for (int i = 0; i + 2 < m; ++i) {
            const double u = (s[i + 2] - s[i + 1]) - (s[i + 1] - s[i]);
            res.dist_loss += smooth_l1(u);
            res.min_kink_distance = std::min(res.min_kink_distance, std::abs(std::abs(u) - 1.0));
            const double d = smooth_l1_grad(u);
            g[i + 2] += d;
            g[i + 1] -= 2.0 * d;
            g[i] += d;
        }
    }
    res.loss = res.order_loss + res.dist_loss;
    return res;
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw std::invalid_argument("pearson_r: need two equally sized samples");
    }
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) return 0.0;  // constant input: treat as uncorrelated
    return sxy / std::sqrt(sxx * syy);
}

double score_slice(const Mlp& regressor, const Vec& slice_features) {
    return forward_one(regressor, slice_features)[0];
}

std::vector<double> score_volume(const Mlp& regressor, const Volume& v) {
    ForwardCache cache = forward_batch(regressor, v.slice_features);
    std::vector<double> out(v.slice_features.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = cache.outputs[i][0];
    return out;
}

namespace {

void train_phase(const std::vector<Volume>& volumes, std::span<const size_t> multiset,
                 Mlp& regressor, const SSBRConfig& cfg, Rng& rng) {
    const SGDConfig sgd{cfg.learning_rate, cfg.learning_rate, 0, cfg.max_iterations};
    std::vector<Vec> inputs;
    std::vector<Vec> scores(cfg.volumes_per_batch);
    std::vector<std::vector<int>> picked(cfg.volumes_per_batch);

    for (int iter = 0; iter < cfg.max_iterations; ++iter) {
        inputs.clear();
        for (int b = 0; b < cfg.volumes_per_batch; ++b) {
            const Volume& vol = volumes[multiset[rng.index(multiset.size())]];
            picked[b] = sample_slice_set(static_cast<int>(vol.slice_features.size()),
                                         cfg.m_slices, rng);
            for (int idx : picked[b]) inputs.push_back(vol.slice_features[idx]);
        }
        ForwardCache cache = forward_batch(regressor, inputs);
        for (int b = 0; b < cfg.volumes_per_batch; ++b) {
            scores[b].resize(cfg.m_slices);
            for (int i = 0; i < cfg.m_slices; ++i) {
                scores[b][i] = cache.outputs[static_cast<size_t>(b) * cfg.m_slices + i][0];
            }
        }
        SsbrLossResult loss = ssbr_loss(scores);
        std::vector<Vec> grad_out(inputs.size(), Vec(1, 0.0));
        for (int b = 0; b < cfg.volumes_per_batch; ++b) {
            for (int i = 0; i < cfg.m_slices; ++i) {
                grad_out[static_cast<size_t>(b) * cfg.m_slices + i][0] = loss.grads[b][i];
            }
        }
        MlpGrads grads = backward(regressor, cache, grad_out);
        sgd_step(regressor, grads, sgd, iter);
    }
}

}  // namespace

SsbrTrainReport train_ssbr(const std::vector<Volume>& volumes, Mlp& regressor,
                           const SSBRConfig& cfg, Rng& rng) {
    validate(cfg);
    if (regressor.output_dim() != 1) throw ValidationError("ssbr: regressor output dim must be 1");

    std::vector<size_t> eligible;
    for (size_t i = 0; i < volumes.size(); ++i) {
        if (static_cast<int>(volumes[i].slice_features.size()) >= cfg.m_slices) {
            eligible.push_back(i);
        }
    }
    if (static_cast<int>(eligible.size()) < cfg.volumes_per_batch) {
        throw ValidationError("ssbr: need at least " + std::to_string(cfg.volumes_per_batch) +
                              " eligible volumes, have " + std::to_string(eligible.size()));
    }

    SsbrTrainReport report;
    train_phase(volumes, eligible, regressor, cfg, rng);

    report.phase1_r.reserve(eligible.size());
    for (size_t vi : eligible) {
        const std::vector<double> s = score_volume(regressor, volumes[vi]);
        std::vector<double> idx(s.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<double>(i);
        const double r = pearson_r(idx, s);
        report.phase1_r.push_back(r);
        if (r < cfg.hard_r_threshold) report.hard.push_back(vi);
    }

    report.resampled = eligible;
    for (size_t vi : report.hard) {
        for (int c = 1; c < cfg.oversample_factor; ++c) report.resampled.push_back(vi);
    }
    if (!report.hard.empty()) {
        regressor = make_mlp(regressor.layer_dims, false, rng);
        train_phase(volumes, report.resampled, regressor, cfg, rng);
        report.phase2_ran = true;
    }
    return report;
}

double ScoreNormalizer::z(double score) const {
    const double t = (score - p1) / (p99 - p1);
    return std::clamp(t, 0.0, 1.0);
}

double percentile(std::span<const double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of empty sample");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

ScoreNormalizer fit_score_normalizer(std::span<const double> scores) {
    ScoreNormalizer n;
    n.p1 = percentile(scores, 0.01);
    n.p99 = percentile(scores, 0.99);
    if (!(n.p99 > n.p1)) {
        throw ValidationError("score normalization: constant scores, cannot map to [0,1]");
    }
    return n;
}

std::pair<double, double> fit_two_thresholds(std::span<const double> scores,
                                             std::span<const int> region_labels) {
    if (scores.size() != region_labels.size() || scores.empty()) {
        throw std::invalid_argument("fit_two_thresholds: mismatched or empty inputs");
    }
    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // One pass per boundary: walking the threshold past a sample flips its
    // predicted side, so the error count updates incrementally.
    auto best_boundary = [&](auto is_upper_class) {
        size_t err = 0;  // threshold below every sample: all predicted upper
        for (size_t i : order) {
            if (!is_upper_class(region_labels[i])) ++err;
        }
        double best_th = scores[order.front()] - 1.0;
        size_t best_err = err;
        for (size_t pos = 0; pos < order.size(); ++pos) {
            const size_t i = order[pos];
            err += is_upper_class(region_labels[i]) ? 1 : -1;
            // candidate threshold between this sample and the next distinct value
            if (pos + 1 < order.size() && scores[order[pos + 1]] == scores[i]) continue;
            const double th = pos + 1 < order.size()
                                  ? 0.5 * (scores[i] + scores[order[pos + 1]])
                                  : scores[i] + 1.0;
            if (err < best_err) {
                best_err = err;
                best_th = th;
            }
        }
        return best_th;
    };

    double th1 = best_boundary([](int c) { return c >= 1; });
    double th2 = best_boundary([](int c) { return c >= 2; });
    if (th2 < th1) std::swap(th1, th2);
    return {th1, th2};
}

double three_way_accuracy(std::span<const double> scores, std::span<const int> region_labels,
                          double th1, double th2) {
    if (scores.size() != region_labels.size() || scores.empty()) {
        throw std::invalid_argument("three_way_accuracy: mismatched or empty inputs");
    }
    size_t correct = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        const int predicted = scores[i] > th2 ? 2 : (scores[i] > th1 ? 1 : 0);
        if (predicted == region_labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

std::vector<Volume> read_volumes_csv(const std::string& path) {
    csv::Reader reader(path);
    const int c_vol = reader.required_column("volume_id");
    const int c_pat = reader.required_column("patient_id");
    const int c_study = reader.required_column("study_id");
    const int c_series = reader.required_column("series_id");
    const int c_split = reader.required_column("split");
    const int c_slice = reader.required_column("slice_idx");
    const int c_z = reader.required_column("true_z");
    std::vector<int> feat_cols;
    for (size_t i = 0; i < reader.header().size(); ++i) {
        if (reader.header()[i].rfind("s_", 0) == 0) feat_cols.push_back(static_cast<int>(i));
    }
    if (feat_cols.empty()) throw ValidationError(path + ": no slice feature columns (s_*)");

    std::vector<Volume> volumes;
    std::vector<std::string> f;
    int64_t expected_slice = 0;
    while (reader.next(f)) {
        const int64_t vol_id = csv::parse_int(f[c_vol]);
        if (volumes.empty() || volumes.back().volume_id != vol_id) {
            Volume v;
            v.volume_id = vol_id;
            v.patient_id = csv::parse_int(f[c_pat]);
            v.study_id = csv::parse_int(f[c_study]);
            v.series_id = csv::parse_int(f[c_series]);
            v.split = split_from_string(f[c_split]);
            volumes.push_back(std::move(v));
            expected_slice = 0;
        }
        const int64_t slice = csv::parse_int(f[c_slice]);
        if (slice != expected_slice) {
            throw ValidationError(path + " line " + std::to_string(reader.line_number()) +
                                  ": slices of volume " + std::to_string(vol_id) +
                                  " must be contiguous from 0");
        }
        ++expected_slice;
        Vec feat(feat_cols.size());
        for (size_t j = 0; j < feat_cols.size(); ++j) feat[j] = csv::parse_double(f[feat_cols[j]]);
        volumes.back().slice_features.push_back(std::move(feat));
        if (!f[c_z].empty()) volumes.back().true_z.push_back(csv::parse_double(f[c_z]));
    }
    for (const auto& v : volumes) {
        if (!v.true_z.empty() && v.true_z.size() != v.slice_features.size()) {
            throw ValidationError(path + ": volume " + std::to_string(v.volume_id) +
                                  " has true_z for only some slices");
        }
    }
    return volumes;
}

void write_volumes_csv(const std::vector<Volume>& volumes, const std::string& path) {
    if (volumes.empty()) throw ValidationError("write_volumes_csv: no volumes");
    const size_t dim = volumes.front().slice_features.empty()
                           ? 0
                           : volumes.front().slice_features.front().size();
    csv::Writer w(path);
    std::vector<std::string> header{"volume_id", "patient_id", "study_id",
                                    "series_id", "split",      "slice_idx",
                                    "true_z"};
    for (size_t j = 0; j < dim; ++j) header.push_back("s_" + std::to_string(j));
    w.write_row(header);
    for (const auto& v : volumes) {
        for (size_t i = 0; i < v.slice_features.size(); ++i) {
            std::vector<std::string> row{
                csv::format(v.volume_id),
                csv::format(v.patient_id),
                csv::format(v.study_id),
                csv::format(v.series_id),
                std::string(split_to_string(v.split)),
                csv::format(static_cast<int64_t>(i)),
                v.true_z.empty() ? std::string() : csv::format(v.true_z[i])};
            for (double x : v.slice_features[i]) row.push_back(csv::format(x));
            w.write_row(row);
        }
    }
}

std::vector<SliceScoreRow> read_scores_csv(const std::string& path) {
    csv::Reader reader(path);
    const int c_vol = reader.required_column("volume_id");
    const int c_slice = reader.required_column("slice_idx");
    const int c_score = reader.required_column("score");
    const int c_z = reader.required_column("z");
    std::vector<SliceScoreRow> rows;
    std::vector<std::string> f;
    while (reader.next(f)) {
        rows.push_back({csv::parse_int(f[c_vol]), csv::parse_int(f[c_slice]),
                        csv::parse_double(f[c_score]), csv::parse_double(f[c_z])});
    }
    return rows;
}

void write_scores_csv(const std::vector<SliceScoreRow>& rows, const std::string& path) {
    csv::Writer w(path);
    w.write_row({"volume_id", "slice_idx", "score", "z"});
    for (const auto& r : rows) {
        w.write_row({csv::format(r.volume_id), csv::format(r.slice_idx), csv::format(r.score),
                     csv::format(r.z)});
    }
}

}  // namespace lg
