#include <algorithm>
#include <cstdio>
#include <utility>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lg/errors.hpp"
#include "lg/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string dir = ".";
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON run configuration");
    cmd->add_option("--dir,--out", args.dir, "Workspace directory")->capture_default_str();
    cmd->add_option("--set", args.overrides,
                    "Override a config key, e.g. --set sgd.max_iterations=500");
}

lg::RunConfig resolve_config(const CommonArgs& args) {
    const lg::RunConfig cfg =
        args.config_path.empty() ? lg::default_config() : lg::load_config(args.config_path);
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& kv : args.overrides) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) {
            throw lg::ValidationError("--set expects key=value, got '" + kv + "'");
        }
        overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return lg::apply_overrides(cfg, overrides);
}

// Metrics go to the terminal with 4 significant digits; files keep full
// precision.
std::string fmt4(double v) {
    char b[32];
    std::snprintf(b, sizeof(b), "%.4g", v);
    return b;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"lesiongraph: lesion similarity embeddings from weak cues, with retrieval and "
                 "intra-patient matching"};
    app.require_subcommand(1);

    CommonArgs args;
    bool baseline = false;
    std::string embeddings_file;
    std::string metrics;
    int trials = 20;

    CLI::App* c_gen = app.add_subcommand("gen", "Generate a synthetic cohort");
    add_common(c_gen, args);
    CLI::App* c_ingest =
        app.add_subcommand("ingest", "Validate and canonicalize an annotation/feature pair");
    add_common(c_ingest, args);
    CLI::App* c_ssbr = app.add_subcommand(
        "ssbr", "Train the body-part regressor and rewrite lesion z coordinates");
    add_common(c_ssbr, args);
    CLI::App* c_train =
        app.add_subcommand("train", "Assign pseudo-labels, train the embedder, refine once");
    add_common(c_train, args);
    CLI::App* c_embed = app.add_subcommand("embed", "Write embeddings for every lesion");
    c_embed->add_flag("--baseline", baseline,
                      "Write L2-normalized raw features instead of the trained net's outputs");
    add_common(c_embed, args);
    CLI::App* c_retrieve =
        app.add_subcommand("retrieve", "Nearest-neighbor retrieval over the eval split");
    c_retrieve->add_option("--embeddings", embeddings_file, "Embeddings CSV inside --dir");
    add_common(c_retrieve, args);
    CLI::App* c_match = app.add_subcommand(
        "match", "Group records of the same lesion per patient; PR curve with ground truth");
    c_match->add_option("--embeddings", embeddings_file, "Embeddings CSV inside --dir");
    add_common(c_match, args);
    CLI::App* c_eval =
        app.add_subcommand("eval", "Retrieval, clustering and classification metrics");
    c_eval->add_option("--metrics", metrics, "Comma list of are,purity,nmi,accuracy (default all)");
    add_common(c_eval, args);
    CLI::App* c_gradcheck =
        app.add_subcommand("gradcheck", "Finite-difference audit of the loss gradients");
    c_gradcheck->add_option("--trials", trials, "Random nets per loss")->capture_default_str();
    add_common(c_gradcheck, args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help() << std::flush;
        return 1;
    }

    try {
        const lg::RunConfig cfg = resolve_config(args);
        const std::string& dir = args.dir;

        if (c_gen->parsed()) {
            lg::cmd_gen(cfg, dir);
            std::cout << "gen: wrote cohort to " << dir << "\n";
        } else if (c_ingest->parsed()) {
            lg::cmd_ingest(cfg, dir);
            std::cout << "ingest: validated and canonicalized " << cfg.paths.annotations << "\n";
        } else if (c_ssbr->parsed()) {
            const lg::SsbrStageReport rep = lg::cmd_ssbr(cfg, dir);
            std::vector<double> rs = rep.train.phase1_r;
            std::sort(rs.begin(), rs.end());
            const double median_r = rs.empty() ? 0.0 : rs[rs.size() / 2];
            std::cout << "ssbr: trained on " << rep.train_volumes << "/" << rep.total_volumes
                      << " volumes, median r " << fmt4(median_r) << ", hard "
                      << rep.train.hard.size() << ", phase2 "
                      << (rep.train.phase2_ran ? "ran" : "skipped") << "\n";
        } else if (c_train->parsed()) {
            const lg::TrainStageReport rep = lg::cmd_train(cfg, dir);
            std::cout << "train: loss " << fmt4(rep.first_window_loss) << " -> "
                      << fmt4(rep.last_window_loss);
            if (rep.initial_pseudo_accuracy >= 0.0) {
                std::cout << ", pseudo-label accuracy " << fmt4(rep.initial_pseudo_accuracy)
                          << " -> " << fmt4(rep.refined_pseudo_accuracy);
            }
            std::cout << "\n";
        } else if (c_embed->parsed()) {
            lg::cmd_embed(cfg, dir, baseline);
            std::cout << "embed: wrote "
                      << (baseline ? cfg.paths.baseline_embeddings : cfg.paths.embeddings) << "\n";
        } else if (c_retrieve->parsed()) {
            lg::cmd_retrieve(cfg, dir,
                             embeddings_file.empty() ? cfg.paths.embeddings : embeddings_file);
            std::cout << "retrieve: wrote " << cfg.paths.retrieval << "\n";
        } else if (c_match->parsed()) {
            const lg::MatchStageReport rep = lg::cmd_match(
                cfg, dir, embeddings_file.empty() ? cfg.paths.embeddings : embeddings_file);
            std::cout << "match: " << rep.patients << " patients";
            if (rep.auc >= 0.0) std::cout << ", AUC " << fmt4(rep.auc);
            std::cout << "\n";
        } else if (c_eval->parsed()) {
            const auto rows = lg::cmd_eval(cfg, dir, metrics);
            for (const auto& r : rows) {
                std::cout << r.representation << ": are_type " << fmt4(r.are_type)
                          << ", are_location " << fmt4(r.are_location) << ", are_size "
                          << fmt4(r.are_size) << ", purity " << fmt4(r.purity) << ", nmi "
                          << fmt4(r.nmi) << ", accuracy " << fmt4(r.accuracy) << "\n";
            }
        } else if (c_gradcheck->parsed()) {
            const double triplet = lg::audit_triplet_gradients(trials, cfg.rng_seed);
            const double ssbr = lg::audit_ssbr_gradients(trials, cfg.rng_seed);
            const double worst = std::max(triplet, ssbr);
            std::cout << "gradcheck: max relative error " << fmt4(worst) << " (triplet "
                      << fmt4(triplet) << ", ssbr " << fmt4(ssbr) << ")\n";
            return worst < 1e-4 ? 0 : 2;
        }
        return 0;
    } catch (const lg::ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
