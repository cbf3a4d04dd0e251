#include "lg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>

#include <json.hpp>

#include "lg/csv.hpp"
#include "lg/errors.hpp"

namespace lg {

namespace {

using njson = nlohmann::ordered_json;

// Reads known keys from a JSON object and rejects everything else.
class ObjectReader {
public:
    ObjectReader(const njson& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ValidationError("config: '" + name_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->get<T>();
        } catch (const njson::exception& e) {
            throw ValidationError("config: bad value for '" + name_ + "." + key + "': " + e.what());
        }
        consumed_.insert(key);
    }

    void get_range(const char* key, IntRange& out) {
        std::vector<int> v;
        get(key, v);
        if (consumed_.count(key)) {
            if (v.size() != 2) {
                throw ValidationError("config: '" + name_ + "." + key + "' must be [lo, hi]");
            }
            out = IntRange{v[0], v[1]};
        }
    }

    const njson* section(const char* key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        consumed_.insert(key);
        return &*it;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!consumed_.count(k)) {
                throw ValidationError("config: unknown key '" + name_ + "." + k + "'");
            }
        }
    }

private:
    const njson& j_;
    std::string name_;
    std::set<std::string> consumed_;
};

njson range_json(const IntRange& r) { return njson::array({r.lo, r.hi}); }

const std::set<std::string> kSplitNames = {"seed", "val", "test", "unlabeled", "all"};

void validate(const RunConfig& cfg) {
    lg::validate(cfg.synthetic);
    lg::validate(cfg.ssbr);
    if (!(cfg.sampler.t_low > 0.0 && cfg.sampler.t_low < cfg.sampler.t_high)) {
        throw ValidationError("config: sampler needs 0 < t_low < t_high");
    }
    if (!(cfg.margins.m1 > 0.0 && cfg.margins.m1 < cfg.margins.m2 &&
          cfg.margins.m2 < cfg.margins.m3)) {
        throw ValidationError("config: margins must satisfy 0 < m1 < m2 < m3");
    }
    if (cfg.margins.sequences_per_batch < 1) {
        throw ValidationError("config: sequences_per_batch must be >= 1");
    }
    if (cfg.sgd.learning_rate <= 0.0 || cfg.sgd.lr_after_drop <= 0.0) {
        throw ValidationError("config: learning rates must be positive");
    }
    if (cfg.sgd.drop_iteration < 0 || cfg.sgd.drop_iteration > cfg.sgd.max_iterations) {
        throw ValidationError("config: need 0 <= drop_iteration <= max_iterations");
    }
    if (!(cfg.matching.t1 > 0.0 && cfg.matching.t2 > cfg.matching.t1)) {
        throw ValidationError("config: matching needs 0 < t1 < t2");
    }
    if (cfg.embedding_dim < 1) throw ValidationError("config: embedding_dim must be >= 1");
    for (int h : cfg.embedder_hidden) {
        if (h < 1) throw ValidationError("config: hidden dims must be >= 1");
    }
    if (cfg.knn_k < 1) throw ValidationError("config: knn_k must be >= 1");
    if (cfg.finetune_iterations < 0) throw ValidationError("config: finetune_iterations < 0");
    if (cfg.retrieval_k < 1) throw ValidationError("config: retrieval_k must be >= 1");
    if (cfg.eval_clusters < 1) throw ValidationError("config: eval_clusters must be >= 1");
    if (!kSplitNames.count(cfg.eval_split)) throw ValidationError("config: bad eval_split");
    if (!kSplitNames.count(cfg.match_split)) throw ValidationError("config: bad match_split");
    if (cfg.t2_sweep.size() < 2) throw ValidationError("config: t2_sweep needs >= 2 values");
    for (double t2 : cfg.t2_sweep) {
        if (t2 <= cfg.matching.t1) {
            throw ValidationError("config: every t2_sweep value must exceed matching.t1");
        }
    }
}

}  // namespace

RunConfig default_config() {
    RunConfig cfg;
    // 24 log-spaced inter-study thresholds spanning the unit sphere's
    // distance range.
    const int n = 24;
    const double lo = 0.105, hi = 2.0;
    for (int i = 0; i < n; ++i) {
        cfg.t2_sweep.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1)));
    }
    return cfg;
}

RunConfig config_from_json_text(const std::string& text) {
    njson j;
    try {
        j = njson::parse(text);
    } catch (const njson::exception& e) {
        throw ValidationError(std::string("config: parse error: ") + e.what());
    }
    RunConfig cfg = default_config();

    ObjectReader top(j, "config");
    top.get("rng_seed", cfg.rng_seed);

    if (const njson* s = top.section("synthetic")) {
        ObjectReader r(*s, "synthetic");
        r.get("n_types", cfg.synthetic.n_types);
        r.get("n_patients", cfg.synthetic.n_patients);
        r.get_range("studies_per_patient", cfg.synthetic.studies_per_patient);
        r.get_range("lesions_per_patient", cfg.synthetic.lesions_per_patient);
        r.get("feature_dim", cfg.synthetic.feature_dim);
        r.get("distractor_dims", cfg.synthetic.distractor_dims);
        r.get("distractor_sd", cfg.synthetic.distractor_sd);
        r.get("type_center_separation", cfg.synthetic.type_center_separation);
        r.get("feature_noise_sd", cfg.synthetic.feature_noise_sd);
        r.get("instance_offset_sd", cfg.synthetic.instance_offset_sd);
        r.get("cue_noise_sd", cfg.synthetic.cue_noise_sd);
        r.get("label_flip_rate", cfg.synthetic.label_flip_rate);
        r.get_range("series_per_study", cfg.synthetic.series_per_study);
        r.get("study_presence_prob", cfg.synthetic.study_presence_prob);
        r.get("seed_fraction", cfg.synthetic.seed_fraction);
        r.get("val_fraction", cfg.synthetic.val_fraction);
        r.get("test_fraction", cfg.synthetic.test_fraction);
        r.get("size_drift_max", cfg.synthetic.size_drift_max);
        r.get_range("slices_per_volume", cfg.synthetic.slices_per_volume);
        r.get("slice_feature_dim", cfg.synthetic.slice_feature_dim);
        r.get("slice_noise_sd", cfg.synthetic.slice_noise_sd);
        r.finish();
    }
    if (const njson* s = top.section("sampler")) {
        ObjectReader r(*s, "sampler");
        r.get("t_low", cfg.sampler.t_low);
        r.get("t_high", cfg.sampler.t_high);
        r.get("max_redraws", cfg.sampler.max_redraws);
        r.get("forbid_same_patient", cfg.sampler.forbid_same_patient);
        r.finish();
    }
    if (const njson* s = top.section("margins")) {
        ObjectReader r(*s, "margins");
        r.get("m1", cfg.margins.m1);
        r.get("m2", cfg.margins.m2);
        r.get("m3", cfg.margins.m3);
        r.get("sequences_per_batch", cfg.margins.sequences_per_batch);
        r.finish();
    }
    if (const njson* s = top.section("sgd")) {
        ObjectReader r(*s, "sgd");
        r.get("learning_rate", cfg.sgd.learning_rate);
        r.get("lr_after_drop", cfg.sgd.lr_after_drop);
        r.get("drop_iteration", cfg.sgd.drop_iteration);
        r.get("max_iterations", cfg.sgd.max_iterations);
        r.finish();
    }
    if (const njson* s = top.section("ssbr")) {
        ObjectReader r(*s, "ssbr");
        r.get("m_slices", cfg.ssbr.m_slices);
        r.get("volumes_per_batch", cfg.ssbr.volumes_per_batch);
        r.get("slices_per_batch", cfg.ssbr.slices_per_batch);
        r.get("learning_rate", cfg.ssbr.learning_rate);
        r.get("max_iterations", cfg.ssbr.max_iterations);
        r.get("hard_r_threshold", cfg.ssbr.hard_r_threshold);
        r.get("oversample_factor", cfg.ssbr.oversample_factor);
        r.get("hidden_dims", cfg.ssbr.hidden_dims);
        r.finish();
    }
    if (const njson* s = top.section("matching")) {
        ObjectReader r(*s, "matching");
        r.get("t1", cfg.matching.t1);
        r.get("t2", cfg.matching.t2);
        r.finish();
    }
    if (const njson* s = top.section("embedder")) {
        ObjectReader r(*s, "embedder");
        r.get("hidden_dims", cfg.embedder_hidden);
        r.get("embedding_dim", cfg.embedding_dim);
        r.finish();
    }
    if (const njson* s = top.section("train")) {
        ObjectReader r(*s, "train");
        r.get("knn_k", cfg.knn_k);
        r.get("finetune_iterations", cfg.finetune_iterations);
        r.finish();
    }
    if (const njson* s = top.section("eval")) {
        ObjectReader r(*s, "eval");
        r.get("retrieval_k", cfg.retrieval_k);
        r.get("exclude_same_patient", cfg.exclude_same_patient);
        r.get("clusters", cfg.eval_clusters);
        r.get("split", cfg.eval_split);
        r.get("match_split", cfg.match_split);
        r.get("t2_sweep", cfg.t2_sweep);
        r.finish();
    }
    if (const njson* s = top.section("paths")) {
        ObjectReader r(*s, "paths");
        PathsConfig& p = cfg.paths;
        r.get("annotations", p.annotations);
        r.get("annotations_z", p.annotations_z);
        r.get("features", p.features);
        r.get("ground_truth", p.ground_truth);
        r.get("volumes", p.volumes);
        r.get("normalizers", p.normalizers);
        r.get("ssbr_checkpoint", p.ssbr_checkpoint);
        r.get("scores", p.scores);
        r.get("checkpoint", p.checkpoint);
        r.get("loss_history", p.loss_history);
        r.get("pseudo_labels", p.pseudo_labels);
        r.get("embeddings", p.embeddings);
        r.get("baseline_embeddings", p.baseline_embeddings);
        r.get("retrieval", p.retrieval);
        r.get("matching", p.matching);
        r.get("pr_curve", p.pr_curve);
        r.get("match_summary", p.match_summary);
        r.get("eval", p.eval);
        r.get("eval_summary", p.eval_summary);
        r.finish();
    }
    top.finish();

    validate(cfg);
    return cfg;
}

std::string config_to_json_text(const RunConfig& cfg) {
    njson j;
    j["rng_seed"] = cfg.rng_seed;
    j["synthetic"] = {{"n_types", cfg.synthetic.n_types},
                      {"n_patients", cfg.synthetic.n_patients},
                      {"studies_per_patient", range_json(cfg.synthetic.studies_per_patient)},
                      {"lesions_per_patient", range_json(cfg.synthetic.lesions_per_patient)},
                      {"feature_dim", cfg.synthetic.feature_dim},
                      {"distractor_dims", cfg.synthetic.distractor_dims},
                      {"distractor_sd", cfg.synthetic.distractor_sd},
                      {"type_center_separation", cfg.synthetic.type_center_separation},
                      {"feature_noise_sd", cfg.synthetic.feature_noise_sd},
                      {"instance_offset_sd", cfg.synthetic.instance_offset_sd},
                      {"cue_noise_sd", cfg.synthetic.cue_noise_sd},
                      {"label_flip_rate", cfg.synthetic.label_flip_rate},
                      {"series_per_study", range_json(cfg.synthetic.series_per_study)},
                      {"study_presence_prob", cfg.synthetic.study_presence_prob},
                      {"seed_fraction", cfg.synthetic.seed_fraction},
                      {"val_fraction", cfg.synthetic.val_fraction},
                      {"test_fraction", cfg.synthetic.test_fraction},
                      {"size_drift_max", cfg.synthetic.size_drift_max},
                      {"slices_per_volume", range_json(cfg.synthetic.slices_per_volume)},
                      {"slice_feature_dim", cfg.synthetic.slice_feature_dim},
                      {"slice_noise_sd", cfg.synthetic.slice_noise_sd}};
    j["sampler"] = {{"t_low", cfg.sampler.t_low},
                    {"t_high", cfg.sampler.t_high},
                    {"max_redraws", cfg.sampler.max_redraws},
                    {"forbid_same_patient", cfg.sampler.forbid_same_patient}};
    j["margins"] = {{"m1", cfg.margins.m1},
                    {"m2", cfg.margins.m2},
                    {"m3", cfg.margins.m3},
                    {"sequences_per_batch", cfg.margins.sequences_per_batch}};
    j["sgd"] = {{"learning_rate", cfg.sgd.learning_rate},
                {"lr_after_drop", cfg.sgd.lr_after_drop},
                {"drop_iteration", cfg.sgd.drop_iteration},
                {"max_iterations", cfg.sgd.max_iterations}};
    j["ssbr"] = {{"m_slices", cfg.ssbr.m_slices},
                 {"volumes_per_batch", cfg.ssbr.volumes_per_batch},
                 {"slices_per_batch", cfg.ssbr.slices_per_batch},
                 {"learning_rate", cfg.ssbr.learning_rate},
                 {"max_iterations", cfg.ssbr.max_iterations},
                 {"hard_r_threshold", cfg.ssbr.hard_r_threshold},
                 {"oversample_factor", cfg.ssbr.oversample_factor},
                 {"hidden_dims", cfg.ssbr.hidden_dims}};
    j["matching"] = {{"t1", cfg.matching.t1}, {"t2", cfg.matching.t2}};
    j["embedder"] = {{"hidden_dims", cfg.embedder_hidden}, {"embedding_dim", cfg.embedding_dim}};
    j["train"] = {{"knn_k", cfg.knn_k}, {"finetune_iterations", cfg.finetune_iterations}};
    j["eval"] = {{"retrieval_k", cfg.retrieval_k},
                 {"exclude_same_patient", cfg.exclude_same_patient},
                 {"clusters", cfg.eval_clusters},
                 {"split", cfg.eval_split},
                 {"match_split", cfg.match_split},
                 {"t2_sweep", cfg.t2_sweep}};
    const PathsConfig& p = cfg.paths;
    j["paths"] = {{"annotations", p.annotations},
                  {"annotations_z", p.annotations_z},
                  {"features", p.features},
                  {"ground_truth", p.ground_truth},
                  {"volumes", p.volumes},
                  {"normalizers", p.normalizers},
                  {"ssbr_checkpoint", p.ssbr_checkpoint},
                  {"scores", p.scores},
                  {"checkpoint", p.checkpoint},
                  {"loss_history", p.loss_history},
                  {"pseudo_labels", p.pseudo_labels},
                  {"embeddings", p.embeddings},
                  {"baseline_embeddings", p.baseline_embeddings},
                  {"retrieval", p.retrieval},
                  {"matching", p.matching},
                  {"pr_curve", p.pr_curve},
                  {"match_summary", p.match_summary},
                  {"eval", p.eval},
                  {"eval_summary", p.eval_summary}};
    return j.dump(2);
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in.is_open()) throw ValidationError("cannot open config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return config_from_json_text(text);
}

RunConfig apply_overrides(const RunConfig& cfg,
                          std::span<const std::pair<std::string, std::string>> overrides) {
    njson j = njson::parse(config_to_json_text(cfg));
    for (const auto& [key, value] : overrides) {
        njson* node = &j;
        size_t start = 0;
        std::vector<std::string> parts;
        while (true) {
            const size_t dot = key.find('.', start);
            if (dot == std::string::npos) {
                parts.push_back(key.substr(start));
                break;
            }
            parts.push_back(key.substr(start, dot - start));
            start = dot + 1;
        }
        for (size_t i = 0; i + 1 < parts.size(); ++i) {
            if (!node->contains(parts[i])) {
                throw ValidationError("--set: unknown section '" + parts[i] + "' in '" + key + "'");
            }
            node = &(*node)[parts[i]];
        }
        njson parsed = njson::parse(value, nullptr, false);
        (*node)[parts.back()] = parsed.is_discarded() ? njson(value) : parsed;
    }
    // validated once, after every override is in place
    return config_from_json_text(j.dump());
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    const std::pair<std::string, std::string> kv{key, value};
    cfg = apply_overrides(cfg, std::span<const std::pair<std::string, std::string>>(&kv, 1));
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

namespace {

std::string pick_annotations(const RunConfig& cfg, const std::string& dir) {
    const std::string with_z = join_path(dir, cfg.paths.annotations_z);
    if (std::filesystem::exists(with_z)) return with_z;
    return join_path(dir, cfg.paths.annotations);
}

bool in_split(const LesionRecord& r, const std::string& split) {
    return split == "all" || split_to_string(r.split) == split;
}

void write_features_file(const Dataset& ds, const std::string& path) {
    if (path.size() > 4 && path.compare(path.size() - 4, 4, ".bin") == 0) {
        write_features_binary(ds, path);
    } else {
        write_features_csv(ds, path);
    }
}

int seed_class_count(const Dataset& ds) {
    int n_classes = 0;
    for (const auto& r : ds.records) {
        if (r.split == Split::seed && r.true_type) n_classes = std::max(n_classes, *r.true_type + 1);
    }
    if (n_classes < 2) throw ValidationError("need at least two labeled classes in the seed split");
    return n_classes;
}

std::vector<Vec> record_features(const Dataset& ds) {
    std::vector<Vec> out;
    out.reserve(ds.records.size());
    for (const auto& r : ds.records) {
        if (r.feature.empty()) {
            throw ValidationError("lesion " + std::to_string(r.lesion_id) + " has no features");
        }
        out.push_back(r.feature);
    }
    return out;
}

}  // namespace

Dataset load_dataset_raw(const RunConfig& cfg, const std::string& dir) {
    Dataset ds = parse_annotations(pick_annotations(cfg, dir), join_path(dir, cfg.paths.features));
    lg::validate(ds);
    return ds;
}

std::vector<Vec> l2_normalized_features(const Dataset& ds) {
    std::vector<Vec> out = record_features(ds);
    for (Vec& v : out) {
        double s = 0.0;
        for (double x : v) s += x * x;
        const double n = std::sqrt(s) + kNormEpsilon;
        for (double& x : v) x /= n;
    }
    return out;
}

void write_embeddings_csv(const std::vector<int64_t>& ids, const std::vector<Vec>& embeddings,
                          const std::string& path) {
    if (ids.size() != embeddings.size() || ids.empty()) {
        throw std::invalid_argument("write_embeddings_csv: bad inputs");
    }
    csv::Writer w(path);
    std::vector<std::string> header{"lesion_id"};
    for (size_t j = 0; j < embeddings.front().size(); ++j) header.push_back("e_" + std::to_string(j));
    w.write_row(header);
    for (size_t i = 0; i < ids.size(); ++i) {
        std::vector<std::string> row{csv::format(ids[i])};
        for (double v : embeddings[i]) row.push_back(csv::format(v));
        w.write_row(row);
    }
}

void read_embeddings_csv(const std::string& path, std::vector<int64_t>& ids,
                         std::vector<Vec>& embeddings) {
    csv::Reader reader(path);
    const int id_col = reader.required_column("lesion_id");
    const int dim = static_cast<int>(reader.header().size()) - 1;
    if (dim <= 0) throw ValidationError(path + ": no embedding columns");
    ids.clear();
    embeddings.clear();
    std::vector<std::string> f;
    while (reader.next(f)) {
        ids.push_back(csv::parse_int(f[id_col]));
        Vec e(dim);
        int j = 0;
        for (int c = 0; c < static_cast<int>(f.size()); ++c) {
            if (c == id_col) continue;
            e[j++] = csv::parse_double(f[c]);
        }
        embeddings.push_back(std::move(e));
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

void cmd_gen(const RunConfig& cfg, const std::string& dir) {
    std::filesystem::create_directories(dir);
    SyntheticConfig scfg = cfg.synthetic;
    scfg.rng_seed = derive_seed(cfg.rng_seed, "gen");
    const Cohort cohort = generate_cohort(scfg);
    write_annotations(cohort.dataset, join_path(dir, cfg.paths.annotations));
    write_features_file(cohort.dataset, join_path(dir, cfg.paths.features));
    write_ground_truth_csv(cohort.truth, join_path(dir, cfg.paths.ground_truth));
    write_volumes_csv(cohort.volumes, join_path(dir, cfg.paths.volumes));
}

void cmd_ingest(const RunConfig& cfg, const std::string& dir) {
    Dataset ds = parse_annotations(join_path(dir, cfg.paths.annotations),
                                   join_path(dir, cfg.paths.features));
    lg::validate(ds);
    const Dataset normalized = normalize_cues(ds);

    njson j;
    j["location_max"] = normalized.cue_normalizers.location_max;
    j["size_max"] = normalized.cue_normalizers.size_max;
    std::ofstream out(join_path(dir, cfg.paths.normalizers), std::ios::binary);
    if (!out.is_open()) throw Error("cannot create normalizers file");
    out << j.dump(2) << '\n';

    // Canonical rewrite of the raw inputs.
    write_annotations(ds, join_path(dir, cfg.paths.annotations));
    write_features_file(ds, join_path(dir, cfg.paths.features));
}

SsbrStageReport cmd_ssbr(const RunConfig& cfg, const std::string& dir) {
    const std::vector<Volume> volumes = read_volumes_csv(join_path(dir, cfg.paths.volumes));
    if (volumes.empty()) throw ValidationError("ssbr: no volumes");
    const int slice_dim = static_cast<int>(volumes.front().slice_features.front().size());

    std::vector<Volume> training;
    for (const auto& v : volumes) {
        if (v.split == Split::seed || v.split == Split::unlabeled) training.push_back(v);
    }

    Rng rng(derive_seed(cfg.rng_seed, "ssbr"));
    std::vector<int> dims{slice_dim};
    for (int h : cfg.ssbr.hidden_dims) dims.push_back(h);
    dims.push_back(1);
    Mlp regressor = make_mlp(dims, false, rng);

    SsbrStageReport report;
    report.train = train_ssbr(training, regressor, cfg.ssbr, rng);
    report.train_volumes = training.size();
    report.total_volumes = volumes.size();

    // Normalize training-set scores to the z coordinate; the same map is
    // applied to every volume afterwards.
    std::vector<double> train_scores;
    for (const auto& v : training) {
        for (double s : score_volume(regressor, v)) train_scores.push_back(s);
    }
    report.normalizer = fit_score_normalizer(train_scores);

    std::vector<SliceScoreRow> rows;
    std::map<std::tuple<int64_t, int64_t, int64_t>, const Volume*> by_key;
    std::map<int64_t, std::vector<double>> z_by_volume;
    for (const auto& v : volumes) {
        const std::vector<double> scores = score_volume(regressor, v);
        std::vector<double> zs(scores.size());
        for (size_t i = 0; i < scores.size(); ++i) {
            zs[i] = report.normalizer.z(scores[i]);
            rows.push_back({v.volume_id, static_cast<int64_t>(i), scores[i], zs[i]});
        }
        by_key[{v.patient_id, v.study_id, v.series_id}] = &v;
        z_by_volume[v.volume_id] = std::move(zs);
    }
    write_scores_csv(rows, join_path(dir, cfg.paths.scores));

    njson side;
    side["l2_output"] = false;
    side["layer_dims"] = regressor.layer_dims;
    side["iterations"] = cfg.ssbr.max_iterations * (report.train.phase2_ran ? 2 : 1);
    side["normalizer"] = {{"p1", report.normalizer.p1}, {"p99", report.normalizer.p99}};
    side["hard_volumes"] = report.train.hard.size();
    side["phase2_ran"] = report.train.phase2_ran;
    save_checkpoint(regressor, join_path(dir, cfg.paths.ssbr_checkpoint), side.dump(2));

    // Rewrite the lesion z coordinate from the predicted slice scores.
    Dataset ds = parse_annotations(join_path(dir, cfg.paths.annotations));
    for (auto& r : ds.records) {
        auto it = by_key.find({r.patient_id, r.study_id, r.series_id});
        if (it == by_key.end()) {
            throw ValidationError("ssbr: no volume for lesion " + std::to_string(r.lesion_id));
        }
        const auto& zs = z_by_volume[it->second->volume_id];
        if (r.slice_idx < 0 || static_cast<size_t>(r.slice_idx) >= zs.size()) {
            throw ValidationError("ssbr: slice_idx out of range for lesion " +
                                  std::to_string(r.lesion_id));
        }
        r.cues.location[2] = zs[r.slice_idx];
    }
    write_annotations(ds, join_path(dir, cfg.paths.annotations_z));
    return report;
}

TrainStageReport cmd_train(const RunConfig& cfg, const std::string& dir) {
    Dataset ds = normalize_cues(load_dataset_raw(cfg, dir));
    const int n_classes = seed_class_count(ds);

    {
        njson j;
        j["location_max"] = ds.cue_normalizers.location_max;
        j["size_max"] = ds.cue_normalizers.size_max;
        std::ofstream out(join_path(dir, cfg.paths.normalizers), std::ios::binary);
        if (!out.is_open()) throw Error("cannot create normalizers file");
        out << j.dump(2) << '\n';
    }

    // Ground truth, when present, is only used for progress reporting.
    std::vector<int> truth_labels;
    const std::string gt_path = join_path(dir, cfg.paths.ground_truth);
    if (std::filesystem::exists(gt_path)) {
        const GroundTruth gt = read_ground_truth_csv(gt_path);
        std::map<int64_t, int> by_id;
        for (const auto& row : gt.rows) by_id[row.lesion_id] = row.true_type;
        truth_labels.resize(ds.records.size(), -1);
        for (size_t i = 0; i < ds.records.size(); ++i) {
            auto it = by_id.find(ds.records[i].lesion_id);
            if (it != by_id.end()) truth_labels[i] = it->second;
        }
    }

    TrainStageReport report;

    // Initial pseudo-labels from raw input features.
    const std::vector<int> initial_labels =
        fit_and_assign(ds, record_features(ds), cfg.knn_k, n_classes);
    if (!truth_labels.empty()) {
        report.initial_pseudo_accuracy = pseudo_label_accuracy(ds, truth_labels);
    }

    Rng init_rng(derive_seed(cfg.rng_seed, "train-init"));
    std::vector<int> dims{ds.feature_dim};
    for (int h : cfg.embedder_hidden) dims.push_back(h);
    dims.push_back(cfg.embedding_dim);
    Mlp net = make_mlp(dims, true, init_rng);

    Rng train_rng(derive_seed(cfg.rng_seed, "train"));
    const std::vector<int> pool = training_pool(ds);
    std::vector<TrainHistoryRow> history =
        train_triplet(ds, pool, net, cfg.sgd, cfg.sampler, cfg.margins, train_rng);

    // One round of refinement: relabel on the learned embeddings, fine-tune
    // at the post-drop rate.
    Rng refine_rng(derive_seed(cfg.rng_seed, "refine"));
    RefineResult refined = refine(ds, net, cfg.sgd, cfg.sampler, cfg.margins, cfg.knn_k, n_classes,
                                  cfg.finetune_iterations, refine_rng);
    if (!truth_labels.empty()) {
        report.refined_pseudo_accuracy = pseudo_label_accuracy(ds, truth_labels);
    }
    for (const auto& row : refined.finetune_history) {
        history.push_back({row.iteration + cfg.sgd.max_iterations, row.loss, row.lr});
    }

    {
        csv::Writer w(join_path(dir, cfg.paths.loss_history));
        w.write_row({"iteration", "loss", "lr"});
        for (const auto& row : history) {
            w.write_row({csv::format(static_cast<int64_t>(row.iteration)), csv::format(row.loss),
                         csv::format(row.lr)});
        }
    }
    {
        csv::Writer w(join_path(dir, cfg.paths.pseudo_labels));
        w.write_row({"lesion_id", "pseudo_label", "stage"});
        for (size_t i = 0; i < ds.records.size(); ++i) {
            w.write_row({csv::format(ds.records[i].lesion_id),
                         csv::format(static_cast<int64_t>(initial_labels[i])), "initial"});
        }
        for (size_t i = 0; i < ds.records.size(); ++i) {
            w.write_row({csv::format(ds.records[i].lesion_id),
                         csv::format(static_cast<int64_t>(refined.pseudo_labels[i])), "refined"});
        }
    }

    const size_t window = std::min<size_t>(100, history.size());
    if (window > 0) {
        double first = 0.0, last = 0.0;
        for (size_t i = 0; i < window; ++i) {
            first += history[i].loss;
            last += history[history.size() - 1 - i].loss;
        }
        report.first_window_loss = first / window;
        report.last_window_loss = last / window;
    }

    njson side;
    side["l2_output"] = true;
    side["layer_dims"] = net.layer_dims;
    side["iterations"] = cfg.sgd.max_iterations + cfg.finetune_iterations;
    side["refinements"] = 1;
    side["sgd"] = {{"learning_rate", cfg.sgd.learning_rate},
                   {"lr_after_drop", cfg.sgd.lr_after_drop},
                   {"drop_iteration", cfg.sgd.drop_iteration},
                   {"max_iterations", cfg.sgd.max_iterations}};
    save_checkpoint(net, join_path(dir, cfg.paths.checkpoint), side.dump(2));
    return report;
}

void cmd_embed(const RunConfig& cfg, const std::string& dir, bool baseline) {
    const Dataset ds = load_dataset_raw(cfg, dir);
    std::vector<int64_t> ids;
    ids.reserve(ds.records.size());
    for (const auto& r : ds.records) ids.push_back(r.lesion_id);

    if (baseline) {
        write_embeddings_csv(ids, l2_normalized_features(ds),
                             join_path(dir, cfg.paths.baseline_embeddings));
        return;
    }
    const Mlp net = load_checkpoint(join_path(dir, cfg.paths.checkpoint));
    ForwardCache cache = forward_batch(net, record_features(ds));
    write_embeddings_csv(ids, cache.outputs, join_path(dir, cfg.paths.embeddings));
}

namespace {

// Embeddings joined to records of one split, in record order.
struct JoinedEmbeddings {
    std::vector<int> record_index;
    EmbeddingIndex index;
};

JoinedEmbeddings join_embeddings(const Dataset& ds, const std::string& embeddings_path,
                                 const std::string& split) {
    std::vector<int64_t> ids;
    std::vector<Vec> embs;
    read_embeddings_csv(embeddings_path, ids, embs);
    std::map<int64_t, const Vec*> by_id;
    for (size_t i = 0; i < ids.size(); ++i) by_id[ids[i]] = &embs[i];

    JoinedEmbeddings out;
    for (size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        if (!in_split(r, split)) continue;
        auto it = by_id.find(r.lesion_id);
        if (it == by_id.end()) {
            throw ValidationError("no embedding for lesion " + std::to_string(r.lesion_id));
        }
        out.record_index.push_back(static_cast<int>(i));
        out.index.lesion_ids.push_back(r.lesion_id);
        out.index.patient_ids.push_back(r.patient_id);
        out.index.embeddings.push_back(*it->second);
    }
    return out;
}

}  // namespace

void cmd_retrieve(const RunConfig& cfg, const std::string& dir,
                  const std::string& embeddings_file) {
    const Dataset ds = load_dataset_raw(cfg, dir);
    const JoinedEmbeddings je = join_embeddings(ds, join_path(dir, embeddings_file), cfg.eval_split);
    csv::Writer w(join_path(dir, cfg.paths.retrieval));
    w.write_row({"query_id", "rank", "retrieved_id", "distance"});
    for (size_t q = 0; q < je.index.size(); ++q) {
        const auto hits = retrieve(je.index, static_cast<int>(q), cfg.retrieval_k,
                                   cfg.exclude_same_patient);
        for (size_t rank = 0; rank < hits.size(); ++rank) {
            w.write_row({csv::format(je.index.lesion_ids[q]),
                         csv::format(static_cast<int64_t>(rank + 1)),
                         csv::format(hits[rank].lesion_id), csv::format(hits[rank].distance)});
        }
    }
}

MatchStageReport cmd_match(const RunConfig& cfg, const std::string& dir,
                           const std::string& embeddings_file) {
    const Dataset ds = load_dataset_raw(cfg, dir);
    const JoinedEmbeddings je = join_embeddings(ds, join_path(dir, embeddings_file),
                                                cfg.match_split);

    std::map<int64_t, std::vector<PatientLesion>> by_patient;
    for (size_t i = 0; i < je.index.size(); ++i) {
        const auto& r = ds.records[je.record_index[i]];
        by_patient[r.patient_id].push_back(
            {r.lesion_id, r.patient_id, r.study_id, je.index.embeddings[i]});
    }

    MatchStageReport report;
    report.patients = by_patient.size();
    {
        csv::Writer w(join_path(dir, cfg.paths.matching));
        w.write_row({"patient_id", "group_id", "lesion_id"});
        for (const auto& [patient, lesions] : by_patient) {
            const auto groups = match_lesions(lesions, cfg.matching);
            for (size_t g = 0; g < groups.size(); ++g) {
                for (int64_t id : groups[g]) {
                    w.write_row({csv::format(patient), csv::format(static_cast<int64_t>(g)),
                                 csv::format(id)});
                }
            }
        }
    }

    const std::string gt_path = join_path(dir, cfg.paths.ground_truth);
    if (!std::filesystem::exists(gt_path)) return report;
    const GroundTruth gt = read_ground_truth_csv(gt_path);
    std::map<int64_t, int64_t> instance_of;
    for (const auto& row : gt.rows) instance_of[row.lesion_id] = row.instance_id;

    std::vector<MatchingCase> cases;
    for (const auto& [patient, lesions] : by_patient) {
        MatchingCase c;
        c.lesions = lesions;
        std::map<int64_t, std::vector<int64_t>> truth;
        for (const auto& l : lesions) {
            auto it = instance_of.find(l.lesion_id);
            if (it == instance_of.end()) {
                throw ValidationError("ground truth missing lesion " + std::to_string(l.lesion_id));
            }
            truth[it->second].push_back(l.lesion_id);
        }
        for (auto& [inst, members] : truth) {
            std::sort(members.begin(), members.end());
            c.truth_groups.push_back(members);
        }
        cases.push_back(std::move(c));
    }

    const PrCurve curve = pr_curve_auc(cases, cfg.matching.t1, cfg.t2_sweep);
    report.auc = curve.auc;
    {
        csv::Writer w(join_path(dir, cfg.paths.pr_curve));
        w.write_row({"t2", "precision", "recall"});
        for (const auto& p : curve.points) {
            w.write_row({csv::format(p.t2), csv::format(p.precision), csv::format(p.recall)});
        }
    }
    {
        njson j;
        j["auc"] = curve.auc;
        j["t1"] = cfg.matching.t1;
        j["patients"] = report.patients;
        j["sweep_points"] = cfg.t2_sweep.size();
        std::ofstream out(join_path(dir, cfg.paths.match_summary), std::ios::binary);
        if (!out.is_open()) throw Error("cannot create match summary");
        out << j.dump(2) << '\n';
    }
    return report;
}

namespace {

struct MetricSelection {
    bool are = true, purity = true, nmi = true, accuracy = true;
};

MetricSelection parse_metrics(const std::string& metrics) {
    if (metrics.empty()) return {};
    MetricSelection sel{false, false, false, false};
    size_t start = 0;
    while (start <= metrics.size()) {
        const size_t comma = metrics.find(',', start);
        const std::string name = metrics.substr(
            start, comma == std::string::npos ? std::string::npos : comma - start);
        if (name == "are") {
            sel.are = true;
        } else if (name == "purity") {
            sel.purity = true;
        } else if (name == "nmi") {
            sel.nmi = true;
        } else if (name == "accuracy") {
            sel.accuracy = true;
        } else if (!name.empty()) {
            throw ValidationError("eval: unknown metric '" + name + "'");
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return sel;
}

EvalRow eval_representation(const RunConfig& cfg, const Dataset& ds,
                            const std::vector<Vec>& vectors, const std::string& name,
                            const MetricSelection& sel, uint64_t kmeans_seed) {
    EvalRow row;
    row.representation = name;

    // Evaluation subset: records of the eval split carrying a type label.
    std::vector<int> subset;
    for (size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        if (in_split(r, cfg.eval_split) && r.true_type) subset.push_back(static_cast<int>(i));
    }
    if (subset.size() < 2) throw ValidationError("eval: fewer than two labeled records in split");

    EmbeddingIndex index;
    std::vector<int> types;
    std::vector<Vec> points;
    for (int i : subset) {
        const auto& r = ds.records[i];
        index.lesion_ids.push_back(r.lesion_id);
        index.patient_ids.push_back(r.patient_id);
        index.embeddings.push_back(vectors[i]);
        types.push_back(*r.true_type);
        points.push_back(vectors[i]);
    }

    if (sel.are) {
        double sum_type = 0.0, sum_loc = 0.0, sum_size = 0.0;
        for (size_t q = 0; q < subset.size(); ++q) {
            const auto hits = retrieve(index, static_cast<int>(q), cfg.retrieval_k,
                                       cfg.exclude_same_patient);
            const auto& qrec = ds.records[subset[q]];
            std::vector<int> hit_types;
            std::vector<Vec> hit_locs, hit_sizes;
            for (const auto& h : hits) {
                const auto& rec = ds.records[subset[h.index]];
                hit_types.push_back(rec.true_type.value());
                hit_locs.emplace_back(rec.cues.location.begin(), rec.cues.location.end());
                hit_sizes.emplace_back(rec.cues.size.begin(), rec.cues.size.end());
            }
            sum_type += are_type(*qrec.true_type, hit_types);
            sum_loc += are_continuous(qrec.cues.location, hit_locs);
            sum_size += are_continuous(qrec.cues.size, hit_sizes);
        }
        row.are_type = sum_type / subset.size();
        row.are_location = sum_loc / subset.size();
        row.are_size = sum_size / subset.size();
    }

    if (sel.purity || sel.nmi) {
        Rng rng(kmeans_seed);
        const ClusteringEval ce = kmeans_purity_nmi(points, types, cfg.eval_clusters, rng);
        if (sel.purity) row.purity = ce.purity;
        if (sel.nmi) row.nmi = ce.nmi;
    }

    if (sel.accuracy) {
        std::vector<Vec> seed_x;
        std::vector<int> seed_y;
        for (size_t i = 0; i < ds.records.size(); ++i) {
            const auto& r = ds.records[i];
            if (r.split == Split::seed && r.true_type) {
                seed_x.push_back(vectors[i]);
                seed_y.push_back(*r.true_type);
            }
        }
        const int n_classes = seed_class_count(ds);
        const SoftmaxResult sm = softmax_classify(seed_x, seed_y, points, types, n_classes);
        row.accuracy = sm.accuracy;
    }
    return row;
}

std::string metric_field(double v) { return v < 0.0 ? std::string() : csv::format(v); }

}  // namespace

std::vector<EvalRow> cmd_eval(const RunConfig& cfg, const std::string& dir,
                              const std::string& metrics) {
    const MetricSelection sel = parse_metrics(metrics);
    const Dataset ds = normalize_cues(load_dataset_raw(cfg, dir));

    std::vector<EvalRow> rows;
    rows.push_back(eval_representation(cfg, ds, l2_normalized_features(ds), "baseline_features",
                                       sel, derive_seed(cfg.rng_seed, "eval-kmeans-baseline")));

    const std::string emb_path = join_path(dir, cfg.paths.embeddings);
    if (std::filesystem::exists(emb_path)) {
        std::vector<int64_t> ids;
        std::vector<Vec> embs;
        read_embeddings_csv(emb_path, ids, embs);
        std::map<int64_t, const Vec*> by_id;
        for (size_t i = 0; i < ids.size(); ++i) by_id[ids[i]] = &embs[i];
        std::vector<Vec> vectors(ds.records.size());
        for (size_t i = 0; i < ds.records.size(); ++i) {
            auto it = by_id.find(ds.records[i].lesion_id);
            if (it == by_id.end()) {
                throw ValidationError("no embedding for lesion " +
                                      std::to_string(ds.records[i].lesion_id));
            }
            vectors[i] = *it->second;
        }
        rows.push_back(eval_representation(cfg, ds, vectors, "trained_embedding", sel,
                                           derive_seed(cfg.rng_seed, "eval-kmeans")));
    }

    {
        csv::Writer w(join_path(dir, cfg.paths.eval));
        w.write_row({"representation", "are_type", "are_location", "are_size", "purity", "nmi",
                     "accuracy"});
        for (const auto& r : rows) {
            w.write_row({r.representation, metric_field(r.are_type), metric_field(r.are_location),
                         metric_field(r.are_size), metric_field(r.purity), metric_field(r.nmi),
                         metric_field(r.accuracy)});
        }
    }
    {
        njson j = njson::array();
        for (const auto& r : rows) {
            njson e;
            e["representation"] = r.representation;
            e["are_type"] = r.are_type;
            e["are_location"] = r.are_location;
            e["are_size"] = r.are_size;
            e["purity"] = r.purity;
            e["nmi"] = r.nmi;
            e["accuracy"] = r.accuracy;
            j.push_back(e);
        }
        std::ofstream out(join_path(dir, cfg.paths.eval_summary), std::ios::binary);
        if (!out.is_open()) throw Error("cannot create eval summary");
        out << j.dump(2) << '\n';
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Gradient audits
// ---------------------------------------------------------------------------

double audit_triplet_gradients(int trials, uint64_t seed) {
    Rng rng(derive_seed(seed, "gradcheck-triplet"));
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        const int d = 4 + t % 4;
        const int hidden = 4 + t % 3;
        const int e = 3 + t % 3;
        const Mlp net = make_mlp({d, hidden, e}, true, rng);
        const int S = 2;

        BatchLossGen gen = [d, S](Rng& r) -> ParamLossFn {
            auto batch = std::make_shared<std::vector<Vec>>();
            for (int i = 0; i < 5 * S; ++i) {
                Vec x(d);
                for (double& v : x) v = r.normal();
                batch->push_back(std::move(x));
            }
            return [batch, S](const Mlp& p) {
                const ForwardCache cache = forward_batch(p, *batch);
                std::vector<std::array<Vec, 5>> embs(S);
                for (int s = 0; s < S; ++s) {
                    for (int role = 0; role < 5; ++role) {
                        embs[s][role] = cache.outputs[static_cast<size_t>(s) * 5 + role];
                    }
                }
                const TripletLossResult lr = hierarchical_triplet_loss(embs, MarginConfig{});
                std::vector<Vec> grad_out(batch->size());
                for (int s = 0; s < S; ++s) {
                    for (int role = 0; role < 5; ++role) {
                        grad_out[static_cast<size_t>(s) * 5 + role] = lr.grads[s][role];
                    }
                }
                LossEval ev;
                ev.loss = lr.loss;
                ev.grads = backward(p, cache, grad_out);
                ev.min_kink_distance = std::min(cache.min_kink_distance, lr.min_hinge_distance);
                return ev;
            };
        };
        worst = std::max(worst, grad_check(net, gen, rng));
    }
    return worst;
}

double audit_ssbr_gradients(int trials, uint64_t seed) {
    Rng rng(derive_seed(seed, "gradcheck-ssbr"));
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        const int d = 3 + t % 4;
        const int hidden = 4 + t % 3;
        const Mlp net = make_mlp({d, hidden, 1}, false, rng);
        const int volumes = 2;
        const int m = 4;

        BatchLossGen gen = [d, volumes, m](Rng& r) -> ParamLossFn {
            auto batch = std::make_shared<std::vector<Vec>>();
            for (int i = 0; i < volumes * m; ++i) {
                Vec x(d);
                for (double& v : x) v = r.normal();
                batch->push_back(std::move(x));
            }
            return [batch, volumes, m](const Mlp& p) {
                const ForwardCache cache = forward_batch(p, *batch);
                std::vector<Vec> scores(volumes, Vec(m));
                for (int v = 0; v < volumes; ++v) {
                    for (int i = 0; i < m; ++i) {
                        scores[v][i] = cache.outputs[static_cast<size_t>(v) * m + i][0];
                    }
                }
                const SsbrLossResult lr = ssbr_loss(scores);
                std::vector<Vec> grad_out(batch->size(), Vec(1));
                for (int v = 0; v < volumes; ++v) {
                    for (int i = 0; i < m; ++i) {
                        grad_out[static_cast<size_t>(v) * m + i][0] = lr.grads[v][i];
                    }
                }
                LossEval ev;
                ev.loss = lr.loss;
                ev.grads = backward(p, cache, grad_out);
                ev.min_kink_distance = std::min(cache.min_kink_distance, lr.min_kink_distance);
                return ev;
            };
        };
        worst = std::max(worst, grad_check(net, gen, rng));
    }
    return worst;
}

}  // namespace lg
