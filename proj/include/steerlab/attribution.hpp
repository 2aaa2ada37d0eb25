#pragma once

// Gradient-based detection baselines: a trained classification head plus
// input-times-gradients and integrated-gradients token scores.

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/corpus.hpp"
#include "steerlab/numkit.hpp"
#include "steerlab/toylm.hpp"

namespace steerlab::attribution {

using numkit::Matrix;

// Two affine layers with a relu between; scalar logit output.
struct ClsHead {
    Matrix w1;                // [d, hidden]
    std::vector<double> b1;   // hidden
    std::vector<double> w2;   // hidden
    double b2 = 0.0;

    int in_dim() const { return w1.rows; }
    int hidden_dim() const { return w1.cols; }
    // logit and, optionally, d logit / d input
    double forward(std::span<const double> h, std::vector<double>* grad_h = nullptr) const;
};

struct HeadConfig {
    int hidden = 16;
    int epochs = 60;
    int batch = 16;
    double lr = 1e-2;
    uint64_t seed = 0;
};

ClsHead make_head(int d, int hidden, uint64_t seed);

// BCE on the last-token, last-layer representation; the base model is frozen.
ClsHead train_cls_head(const toylm::ToyLM& model,
                       const std::vector<corpus::LabeledSequence>& train_seqs,
                       const HeadConfig& cfg);

// g_i = sum over dimensions of |d head-logit / d h_i^l|.
std::vector<double> ixg_scores(const toylm::ToyLM& model, const ClsHead& head,
                               std::span<const int> tokens, int layer);

// Integrated gradients along the straight line from the baseline-token
// representation (broadcast to every position) to the layer-l states, midpoint
// rule with `steps` points. Score_i = sum_dims |(h_i - b) * mean-grad_i|.
std::vector<double> ig_scores(const toylm::ToyLM& model, const ClsHead& head,
                              std::span<const int> tokens, int layer, int steps);

// Core IG routine shared with the tests: F maps the full [n, d] state matrix
// to a scalar and its gradient. Returns per-token signed IG vectors.
using StateFn = std::function<double(const Matrix& states, Matrix* grad_out)>;
std::vector<std::vector<double>> ig_core(const StateFn& f, const Matrix& states,
                                         const Matrix& baseline, int steps);

// Signed IG sum (completeness check helper): sum_i sum_dims IG_i.
double ig_signed_sum(const std::vector<std::vector<double>>& ig);

// F(h^l) = head(last position after running blocks layer+1..m), as used by
// ixg/ig; exposed for the completeness test.
StateFn model_head_fn(const toylm::ToyLM& model, const ClsHead& head, int layer);

// Layer-l representation of the baseline space token, broadcast to n rows.
Matrix baseline_states(const toylm::ToyLM& model, int layer, int n);

}  // namespace steerlab::attribution
