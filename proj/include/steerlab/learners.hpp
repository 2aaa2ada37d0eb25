#pragma once

// Supervised dictionary-learning methods: DiffMean, PCA, LAT, Probe, SSV,
// ReFT-r1, bag-of-words, and affine subspace transport.

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/corpus.hpp"
#include "steerlab/numkit.hpp"
#include "steerlab/toylm.hpp"

namespace steerlab::learners {

using corpus::ActivationDataset;
using numkit::Matrix;

struct MissingClass : std::runtime_error {
    explicit MissingClass(const std::string& what) : std::runtime_error(what) {}
};
struct DegenerateDirection : std::runtime_error {
    explicit DegenerateDirection(const std::string& what) : std::runtime_error(what) {}
};
struct EmptyPositives : std::runtime_error {
    explicit EmptyPositives(const std::string& what) : std::runtime_error(what) {}
};
struct PairCountMismatch : std::runtime_error {
    explicit PairCountMismatch(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// ConceptSubspace
// ---------------------------------------------------------------------------

enum class DetectionActivation { identity, relu, jumprelu };

std::string to_string(DetectionActivation a);
DetectionActivation activation_from_string(const std::string& s);

struct ConceptSubspace {
    std::string concept_id;
    std::string method;
    std::vector<double> w;
    bool unit_norm = true;
    DetectionActivation activation = DetectionActivation::identity;
    double jump_theta = 0.0;  // jumprelu threshold
    double bias = 0.0;        // jumprelu pre-activation bias
    double max_activation = -1.0;  // m_c; filled by detect_eval, >= 0 once set

    int dim() const { return static_cast<int>(w.size()); }
};

// ---------------------------------------------------------------------------
// TrainConfig
// ---------------------------------------------------------------------------

struct TrainConfig {
    int epochs = 12;
    int batch = 8;            // rows for Probe, sequences for SSV / ReFT-r1
    double lr = 1e-2;
    double weight_decay = 0.0;
    double l1 = 5e-3;         // lambda, ReFT-r1 only
    int k = 4;                // top-k, ReFT-r1 only
    uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// closed-form fits on activation datasets
// ---------------------------------------------------------------------------

ConceptSubspace fit_diffmean(const ActivationDataset& ds);
ConceptSubspace fit_pca_subspace(const ActivationDataset& ds);
ConceptSubspace fit_lat(const ActivationDataset& ds, uint64_t seed);

// ---------------------------------------------------------------------------
// gradient-trained fits
// ---------------------------------------------------------------------------

ConceptSubspace fit_probe(const ActivationDataset& ds, const TrainConfig& cfg);

// Both LM-loss methods precompute the hook-layer states with the plain
// forward (they do not depend on the learned vector) and differentiate only
// through the downstream blocks.
ConceptSubspace fit_ssv(const toylm::ToyLM& model,
                        const std::vector<corpus::LabeledSequence>& train_seqs, int layer,
                        const TrainConfig& cfg);
ConceptSubspace fit_reft_r1(const toylm::ToyLM& model,
                            const std::vector<corpus::LabeledSequence>& train_seqs, int layer,
                            const TrainConfig& cfg);

// Exposed for the gradient-integrity checks: builds the full training loss of
// one batch as a graph node, with the learned vector as the single trainable
// leaf. `w0` seeds the leaf value.
int ssv_loss_node(numkit::DiffGraph& g, const toylm::ToyLM& model,
                  const std::vector<corpus::LabeledSequence>& batch, int layer,
                  std::span<const double> w0, int* w_leaf_out = nullptr);
int reft_r1_loss_node(numkit::DiffGraph& g, const toylm::ToyLM& model,
                      const std::vector<corpus::LabeledSequence>& batch, int layer,
                      std::span<const double> w0, double lambda, int k,
                      int* w_leaf_out = nullptr);
int probe_loss_node(numkit::DiffGraph& g, const ActivationDataset& ds,
                    std::span<const double> w0, int* w_leaf_out = nullptr);

// ---------------------------------------------------------------------------
// bag of words
// ---------------------------------------------------------------------------

struct BowClassifier {
    std::map<std::string, int> vocabulary;  // word -> feature index, frozen after fit
    std::vector<double> weights;
    double bias = 0.0;
    double c = 100.0;  // inverse regularization strength

    // sigmoid(w . counts + bias); unseen words are ignored
    double score_text(const std::string& text) const;
    double score_tokens(const corpus::VocabLayout& layout, std::span<const int> toks) const;
};

BowClassifier fit_bow(const corpus::VocabLayout& layout,
                      const std::vector<corpus::LabeledSequence>& train_seqs, double c,
                      uint64_t seed);

// ---------------------------------------------------------------------------
// affine subspace transport
// ---------------------------------------------------------------------------

struct AffineMap {
    Matrix a;                // [d_target, d_source]
    std::vector<double> b;   // d_target

    std::vector<double> apply(std::span<const double> v) const;
};

// Minimizes mean over pairs of 0.5*||Av+b-u||^2 + 0.5*(1 - cos(Av+b, u)),
// pairs matched by concept_id.
AffineMap fit_affine_transport(const std::vector<ConceptSubspace>& sources,
                               const std::vector<ConceptSubspace>& targets,
                               int max_steps = 2000, double grad_tol = 1e-6);

// ---------------------------------------------------------------------------
// subspace dictionary persistence
// ---------------------------------------------------------------------------
// JSON header (d, count, method, activation, per-concept metadata incl. m_c)
// plus a w.f32 blob of count x d little-endian floats.

void save_dictionary(const std::vector<ConceptSubspace>& subs, const std::string& header_path,
                     const std::string& blob_path);
std::vector<ConceptSubspace> load_dictionary(const std::string& header_path,
                                             const std::string& blob_path);

}  // namespace steerlab::learners
