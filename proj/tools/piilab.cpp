// Pipeline driver: generate the corpus, train the model, locate the PII-rich
// layer, train the sparse autoencoder, rank features, and evaluate defenses.
//
//   piilab gen-corpus --config cfg.json --stage-dir out/
//   piilab train-lm   --config cfg.json --stage-dir out/
//   ... harvest | probe | train-sae | rank | eval | report
//
// Stages verify upstream artifacts against the manifest and fail fast when
// anything is stale. PIILAB_OUT sets the default output root.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "piilab/pipeline.hpp"

using namespace piilab;

namespace {

struct Common {
    std::string config_path;
    std::string stage_dir;
    uint64_t seed_override = 0;
    bool has_seed = false;
    bool force = false;
};

RunConfig load_config(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : RunConfig::load(c.config_path);
    if (c.has_seed) cfg.seed = c.seed_override;
    return cfg;
}

std::string resolve_dir(const Common& c) {
    if (!c.stage_dir.empty()) return c.stage_dir;
    if (const char* env = std::getenv("PIILAB_OUT")) return std::string(env) + "/run";
    return "piilab_out/run";
}

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "JSON config file (defaults apply when omitted)");
    cmd->add_option("--stage-dir", c.stage_dir, "output directory for stage artifacts");
    cmd->add_option("--seed", c.seed_override, "override the config seed")->each([&](const std::string&) {
        c.has_seed = true;
    });
    cmd->add_flag("--force", c.force, "overwrite existing stage artifacts");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"piilab: email-leakage study pipeline for a small transformer LM"};
    app.require_subcommand(1);

    Common c;
    struct StageDef {
        const char* name;
        const char* help;
        void (*fn)(const RunConfig&, const std::string&, bool);
    };
    const StageDef stages[] = {
        {"gen-corpus", "generate datasets with planted emails", stage_gen_corpus},
        {"train-lm", "train the language model on the corpus", stage_train_lm},
        {"harvest", "cache residual activations of the probing docs", stage_harvest},
        {"probe", "train per-layer probes and select the intervention layer", stage_probe},
        {"train-sae", "train the k-sparse autoencoder at the selected layer", stage_train_sae},
        {"rank", "rank PII-associated features (latent and residual)", stage_rank},
        {"eval", "run the defense grid and write the report", stage_eval},
    };
    for (const auto& s : stages) add_common(app.add_subcommand(s.name, s.help), c);
    add_common(app.add_subcommand("report", "re-render the report table from records"), c);
    add_common(app.add_subcommand("run-all", "run every stage in order"), c);

    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig cfg = load_config(c);
        const std::string dir = resolve_dir(c);
        for (const auto& s : stages) {
            if (app.got_subcommand(s.name)) {
                s.fn(cfg, dir, c.force);
                std::cout << s.name << ": done (" << dir << ")\n";
                return 0;
            }
        }
        if (app.got_subcommand("report")) {
            std::ifstream in(dir + "/" + paths::report_records, std::ios::binary);
            if (!in) throw IoError("no report records in " + dir + "; run the eval stage first");
            std::stringstream ss;
            ss << in.rdbuf();
            EvalReport report = EvalReport::from_records(ss.str());
            std::cout << report.to_table();
            return 0;
        }
        if (app.got_subcommand("run-all")) {
            run_pipeline_to_dir(cfg, dir, c.force);
            std::ifstream in(dir + "/" + paths::report_table, std::ios::binary);
            std::cout << in.rdbuf();
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
