#pragma once

// Run configuration and the end-to-end pipeline behind the CLI: corpus
// generation, activation collection, method training, detection and steering
// evaluation, reports, projections, and the artifact manifest.

#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/attribution.hpp"
#include "steerlab/corpus.hpp"
#include "steerlab/detect_eval.hpp"
#include "steerlab/learners.hpp"
#include "steerlab/saekit.hpp"
#include "steerlab/steer_eval.hpp"
#include "steerlab/toylm.hpp"

namespace steerlab::pipeline {

// exit code 2
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
// exit code 1; message names the failing module and concept
struct RunError : std::runtime_error {
    explicit RunError(const std::string& what) : std::runtime_error(what) {}
};

struct RunConfig {
    uint64_t seed = 7;
    std::string out_dir = "out";
    int jobs = 1;

    toylm::ToyLMConfig model;
    int layer = 1;
    std::vector<corpus::ConceptSpec> concepts;
    int n_train = 144;
    int n_eval = 72;
    double hard_negative_quota = 1.0 / 3.0;
    int extra_negatives = 360;

    std::vector<std::string> detect_methods;
    std::vector<std::string> steer_methods;
    std::string winrate_baseline;  // defaults to "sae" when steered, else first method
    detect_eval::Pooling pooling = detect_eval::Pooling::max;
    std::string factor_preset = "default";  // "default" | "clamp"
    std::vector<double> factor_grid;        // overrides the preset when non-empty
    std::string sae_intervention = "addition";  // addition | sae_clamp | sae_min_clamp

    int steer_instructions = 10;
    int steer_max_new = 24;
    int ig_steps = 50;

    int sae_z = 64;
    std::string sae_header;  // optional external SAE (header + blob paths)
    std::string sae_blob;

    std::string judge_endpoint;  // empty: deterministic mock judge

    learners::TrainConfig probe_cfg;
    learners::TrainConfig reft_cfg;
    learners::TrainConfig ssv_cfg;
    double bow_c = 100.0;
    attribution::HeadConfig head_cfg;

    std::vector<double> resolved_factor_grid() const;
    void validate() const;
};

RunConfig default_desk_config();
RunConfig parse_config_json(const std::string& json_text);
RunConfig load_config(const std::string& path);

// Pipeline stages; each reads its inputs from (and writes its outputs under)
// cfg.out_dir so stages can be re-run independently.
void stage_gen(const RunConfig& cfg);
void stage_collect(const RunConfig& cfg);
void stage_train(const RunConfig& cfg);
void stage_detect(const RunConfig& cfg);
void stage_steer(const RunConfig& cfg);
void stage_report(const RunConfig& cfg);

// All stages in order. Any failure still flushes a MANIFEST marked
// incomplete, then rethrows.
void run_pipeline(const RunConfig& cfg);

// Centered 2-D PCA of the dictionary vectors: CSV rows (concept_id, pc1, pc2).
void emit_projection(const std::vector<learners::ConceptSubspace>& dict,
                     const std::string& csv_path);

// Deterministic worker pool: runs fn(0..n-1) across `jobs` threads; results
// must be written to pre-assigned slots. First exception is rethrown.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn);

}  // namespace steerlab::pipeline
