#pragma once

// Steering evaluation: intervention construction, factor sweeps, judge
// scoring (deterministic mock plus an HTTP wire for external judges),
// harmonic-mean overall scores, split-based factor selection, winrates.

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/corpus.hpp"
#include "steerlab/learners.hpp"
#include "steerlab/saekit.hpp"
#include "steerlab/toylm.hpp"

namespace steerlab::steer_eval {

struct UnsupportedCombination : std::runtime_error {
    explicit UnsupportedCombination(const std::string& what) : std::runtime_error(what) {}
};
struct EmptySplit : std::runtime_error {
    explicit EmptySplit(const std::string& what) : std::runtime_error(what) {}
};
struct ConceptSetMismatch : std::runtime_error {
    explicit ConceptSetMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct JudgeUnavailable : std::runtime_error {
    explicit JudgeUnavailable(const std::string& what) : std::runtime_error(what) {}
};
struct UnparseableRating : std::runtime_error {
    explicit UnparseableRating(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// plans and interventions
// ---------------------------------------------------------------------------

enum class InterventionKind { addition, sae_clamp, sae_min_clamp };
std::string to_string(InterventionKind k);
InterventionKind intervention_from_string(const std::string& s);

struct SteeringPlan {
    std::string concept_id;
    std::string method;
    int layer = 1;
    InterventionKind kind = InterventionKind::addition;

    // addition from a subspace...
    learners::ConceptSubspace subspace;
    bool has_subspace = false;
    // ...or any kind from an SAE latent
    const saekit::SaeDictionary* sae = nullptr;
    int sae_latent = -1;

    std::vector<double> factor_grid;  // ascending, non-empty
    std::vector<corpus::LabeledSequence> instructions;
    std::vector<int> selection_idx;  // disjoint, exhaustive halves
    std::vector<int> holdout_idx;

    void validate() const;
    double max_activation() const;  // m_c (subspace) or m_f (SAE latent)
};

// Seeded half/half split of [0, n) into selection and holdout.
void split_instructions(int n, uint64_t seed, std::vector<int>& selection,
                        std::vector<int>& holdout);

// alpha = factor * m_c
double steering_magnitude(double factor, double m_c);

// addition: h + alpha*w (subspace vector or decoder row); clamp kinds
// delegate to saekit with target alpha = factor * m_f.
toylm::HookSpec build_intervention(const SteeringPlan& plan, double factor);

// ---------------------------------------------------------------------------
// judging
// ---------------------------------------------------------------------------

struct JudgeScores {
    int concept_score = 0;
    int instruct = 0;
    int fluency = 0;
    double overall = 0.0;
};

// 0 if any subscore is 0, else the harmonic mean 3/(1/c + 1/i + 1/f).
double harmonic_overall(int c, int i, int f);

struct MockJudgeConfig {
    double concept_rate_two = 0.08;   // planted-token frequency thresholds
    double concept_rate_one = 0.02;
    double keyword_recall_two = 0.5;  // instruction-keyword recall thresholds
    double keyword_recall_one = 0.2;
    int run_zero = 8;                 // fluency: max identical-token run
    int run_two = 3;
    double distinct_zero = 0.2;       // fluency: distinct-token ratio
    double distinct_two = 0.5;
};

JudgeScores mock_judge(std::span<const int> generation, const corpus::ConceptSpec& spec,
                       const corpus::LabeledSequence& instruction,
                       const MockJudgeConfig& cfg = {});

// One HTTP POST per subscore: JSON {template_id, concept, instruction,
// fragment} -> {text}; the rating is parsed from "Rating: [[k]]". Three
// attempts with exponential backoff.
JudgeScores external_judge(const std::string& endpoint, const std::string& generation_text,
                           const std::string& concept_text, const std::string& instruction_text,
                           int backoff_ms = 250);

// Parse helper (exposed for tests): last "Rating: [[k]]" in the text.
int parse_rating(const std::string& text);

using JudgeFn = std::function<JudgeScores(std::span<const int> generation,
                                          const corpus::ConceptSpec& spec,
                                          const corpus::LabeledSequence& instruction)>;

// ---------------------------------------------------------------------------
// sweep, selection, winrate
// ---------------------------------------------------------------------------

struct GenerationRecord {
    std::string concept_id;
    std::string method;
    int instruction_index = 0;
    double factor = 0.0;  // 0 marks the unsteered baseline row
    bool holdout = false;
    bool judged = false;  // false: judge unavailable/unparseable; never fabricated
    std::vector<int> tokens;
    JudgeScores scores;
};

uint64_t derive_generation_seed(uint64_t global_seed, const std::string& concept_id,
                                int instruction_index, int factor_index);

// One temperature-1.0 generation per (instruction, factor in the grid), plus
// factor-0 baseline rows when requested. Judge scores are left zeroed.
std::vector<GenerationRecord> run_factor_sweep(const toylm::ToyLM& model,
                                               const SteeringPlan& plan, int max_new,
                                               uint64_t seed, bool include_baseline = false);

// Scores every record; a judge failure (JudgeUnavailable / UnparseableRating)
// leaves that record unjudged and is counted in the return value.
int judge_records(std::vector<GenerationRecord>& records, const corpus::ConceptSpec& spec,
                  const SteeringPlan& plan, const JudgeFn& judge);

struct SelectResult {
    double factor = 0.0;
    double holdout_overall = 0.0;
};

// argmax over the grid of mean overall on the selection split (lowest factor
// on ties), scored on the holdout split. Baseline rows are ignored.
SelectResult select_and_score(const std::vector<GenerationRecord>& records,
                              const std::vector<double>& factor_grid);

// Mean over concepts of (1 win / 0.5 tie / 0 loss) * 100.
double winrate(const std::map<std::string, double>& method_scores,
               const std::map<std::string, double>& baseline_scores);

// ---------------------------------------------------------------------------
// report persistence: JSONL + CSV (method, concept, factor, c, i, f, overall)
// ---------------------------------------------------------------------------

struct ConceptSteeringSummary {
    std::string concept_id;
    std::string method;
    double selected_factor = 0.0;
    double holdout_overall = 0.0;
};

void write_records_jsonl(const std::vector<GenerationRecord>& records, const std::string& path);
void write_summary_csv(const std::vector<GenerationRecord>& records, const std::string& path);
void write_selection_csv(const std::vector<ConceptSteeringSummary>& rows,
                         const std::string& path);

// factor preset grids
std::vector<double> default_factor_grid();  // 14 factors, 0.2 .. 5.0
std::vector<double> clamp_factor_grid();    // 14 factors, 0.4 .. 100.0

}  // namespace steerlab::steer_eval
