#pragma once

// Concept-detection scoring and metrics: token scores, pooling, min-max
// normalization, AUROC, and the F1 threshold sweep with an imbalanced mode.

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/corpus.hpp"
#include "steerlab/learners.hpp"

namespace steerlab::detect_eval {

using corpus::ActivationDataset;
using learners::ConceptSubspace;

struct DimensionMismatch : std::runtime_error {
    explicit DimensionMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct EmptySequence : std::runtime_error {
    explicit EmptySequence(const std::string& what) : std::runtime_error(what) {}
};
struct MissingClass : std::runtime_error {
    explicit MissingClass(const std::string& what) : std::runtime_error(what) {}
};

enum class Pooling { max, mean };
std::string to_string(Pooling p);
Pooling pooling_from_string(const std::string& s);

// score_i = activation(h_i . w) with the subspace's declared activation
std::vector<double> token_detection_scores(const ConceptSubspace& sub,
                                           const ActivationDataset& ds);

double pool_sequence_score(std::span<const double> token_scores, Pooling mode);

// One pooled score per sequence of the dataset.
std::vector<double> pool_scores(const ActivationDataset& ds,
                                std::span<const double> token_scores, Pooling mode);

// (s - min) / (max - min); a constant vector maps to all zeros. m_c is the
// max raw token-level score (clamped at 0), the steering-magnitude statistic.
struct NormalizedScores {
    std::vector<double> values;
    double m_c = 0.0;
};
NormalizedScores minmax_normalize(std::span<const double> seq_scores,
                                  std::span<const double> token_scores);

// Probability that a random positive outscores a random negative, ties 0.5.
// Sort-based; equals the O(P*N) pairwise count exactly.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct F1Result {
    double threshold = 0.0;
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

// Threshold candidates are midpoints between adjacent sorted unique scores
// plus sentinels below/above every score; ties pick the lowest threshold.
// `extra_negative_scores` (imbalanced mode) are appended as negatives.
F1Result f1_sweep(std::span<const double> scores, std::span<const int> labels,
                  std::span<const double> extra_negative_scores = {});

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct DetectionReport {
    std::string concept_id;
    std::string method;
    std::string pooling;               // "max" | "mean" | "sequence"
    std::vector<double> raw_scores;    // per eval sequence
    std::vector<double> normalized;    // min-max normalized, in [0,1]
    std::vector<int> labels;
    double auroc = 0.0;
    double m_c = 0.0;
    F1Result f1_balanced;
    F1Result f1_imbalanced;
    long extra_negatives = 0;
};

// Full evaluation of a subspace on an eval dataset. Writes m_c back into the
// subspace. `extra_negative_pool` supplies the imbalanced-mode negatives; it
// is scored with the same subspace and pooling.
DetectionReport evaluate_subspace(ConceptSubspace& sub, const ActivationDataset& eval_ds,
                                  Pooling mode, const ActivationDataset* extra_negative_pool);

// Evaluation from precomputed sequence-level scores (bag-of-words and the
// gradient-attribution baselines plug in here).
DetectionReport evaluate_scores(const std::string& concept_id, const std::string& method,
                                const std::string& pooling, std::vector<double> seq_scores,
                                std::vector<int> labels,
                                std::span<const double> token_scores,
                                std::span<const double> extra_negative_scores);

void write_reports_jsonl(const std::vector<DetectionReport>& reports, const std::string& path);
// CSV columns: concept_id, method, auroc, f1_balanced, f1_imbalanced
void write_summary_csv(const std::vector<DetectionReport>& reports, const std::string& path);

}  // namespace steerlab::detect_eval
