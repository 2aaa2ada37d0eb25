// Command-line entry point: stage subcommands over a JSON run configuration.

#include <cstdio>
#include <functional>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "steerlab/pipeline.hpp"

using steerlab::pipeline::ConfigError;
using steerlab::pipeline::RunConfig;

int main(int argc, char** argv) {
    CLI::App app{"steerlab: representation steering and concept detection on a toy LM"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_override;
    std::string judge_override;
    uint64_t seed_override = 0;
    bool has_seed = false;
    int jobs_override = 0;

    const std::map<std::string, std::function<void(const RunConfig&)>> stages = {
        {"gen", steerlab::pipeline::stage_gen},
        {"collect", steerlab::pipeline::stage_collect},
        {"train", steerlab::pipeline::stage_train},
        {"detect", steerlab::pipeline::stage_detect},
        {"steer", steerlab::pipeline::stage_steer},
        {"report", steerlab::pipeline::stage_report},
        {"run", steerlab::pipeline::run_pipeline},
    };
    const std::map<std::string, std::string> about = {
        {"gen", "generate the planted corpora and steering instructions"},
        {"collect", "collect hook-layer activations into datasets"},
        {"train", "fit every configured method"},
        {"detect", "score concept detection and write reports"},
        {"steer", "run factor sweeps, judge generations, select factors"},
        {"report", "emit projections and the artifact manifest"},
        {"run", "all stages in order"},
    };

    for (const auto& [name, _] : stages) {
        auto* sub = app.add_subcommand(name, about.at(name));
        sub->add_option("--config", config_path, "JSON run configuration")->required();
        sub->add_option("--seed", seed_override, "override the run seed")
            ->each([&](const std::string&) { has_seed = true; });
        sub->add_option("--out", out_override, "override the output directory");
        sub->add_option("--jobs", jobs_override, "worker threads for per-concept work");
        sub->add_option("--judge-endpoint", judge_override, "external judge URL");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = steerlab::pipeline::load_config(config_path);
        if (has_seed) cfg.seed = seed_override;
        if (!out_override.empty()) cfg.out_dir = out_override;
        if (jobs_override > 0) cfg.jobs = jobs_override;
        if (!judge_override.empty()) cfg.judge_endpoint = judge_override;

        for (const auto& [name, fn] : stages) {
            if (app.got_subcommand(name)) {
                fn(cfg);
                break;
            }
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
