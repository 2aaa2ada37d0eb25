#pragma once

// Deterministic small decoder-only transformer: hidden-state traces, a
// residual-stream intervention hook, LM loss on an autodiff graph, and
// seeded generation.

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/numkit.hpp"

namespace steerlab::toylm {

using numkit::Matrix;

struct InvalidConfig : std::runtime_error {
    explicit InvalidConfig(const std::string& what) : std::runtime_error(what) {}
};
struct TokenOutOfRange : std::runtime_error {
    explicit TokenOutOfRange(const std::string& what) : std::runtime_error(what) {}
};
struct SequenceTooLong : std::runtime_error {
    explicit SequenceTooLong(const std::string& what) : std::runtime_error(what) {}
};
struct EmptyResponse : std::runtime_error {
    explicit EmptyResponse(const std::string& what) : std::runtime_error(what) {}
};

// Reserved token ids. `space` doubles as the attribution baseline token.
namespace tokens {
constexpr int pad = 0;
constexpr int bos = 1;
constexpr int eos = 2;
constexpr int space = 3;
constexpr int reserved_count = 4;
}  // namespace tokens

struct ToyLMConfig {
    int vocab_size = 64;
    int dim = 32;
    int layers = 2;
    int heads = 4;
    int max_seq = 128;
    uint64_t seed = 12;
};

struct ToyLM {
    ToyLMConfig cfg;
    Matrix emb;  // [vocab, dim]; also the unembedding (tied): logits = h_final * emb^T
    Matrix pos;  // [max_seq, dim]
    struct Block {
        std::vector<double> ln1, ln2;  // rmsnorm gains, length dim
        Matrix wq, wk, wv, wo;         // [dim, dim]
        Matrix w1;                     // [dim, 4*dim]
        Matrix w2;                     // [4*dim, dim]
    };
    std::vector<Block> blocks;
    std::vector<double> lnf;  // final rmsnorm gain
};

ToyLM build_toy_lm(const ToyLMConfig& cfg);
uint64_t weight_checksum(const ToyLM& m);

// ---------------------------------------------------------------------------
// forward with optional residual-stream hook
// ---------------------------------------------------------------------------

// In-place edit of one position's d-vector in the residual stream.
using Intervention = std::function<void(std::span<double>)>;

struct HookSpec {
    int layer = 1;  // 1-based; applies to the residual output of this block
    Intervention fn;
};

struct HiddenTrace {
    std::vector<Matrix> hidden;  // layers+1 entries of [n, dim]; hidden[0] is the embedding stream
    Matrix logits;               // [n, vocab]
};

HiddenTrace forward_hidden(const ToyLM& m, std::span<const int> tokens,
                           const HookSpec* hook = nullptr);

// ---------------------------------------------------------------------------
// differentiable path
// ---------------------------------------------------------------------------

// A hook expressed as graph surgery: given the node holding the hooked layer's
// residual stream, return the node that replaces it.
struct GraphHook {
    int layer = 1;
    std::function<int(numkit::DiffGraph&, int states)> apply;
};

// Model weights registered once as graph leaves; forwards can then be built
// for many sequences on the same graph.
struct GraphModel {
    const ToyLM* model = nullptr;
    int emb = -1, pos = -1, lnf = -1;
    struct Layer {
        int ln1, wq, wk, wv, wo, ln2, w1, w2;
    };
    std::vector<Layer> layers;

    static GraphModel attach(numkit::DiffGraph& g, const ToyLM& m, bool weights_trainable = false);

    // Full forward from token ids; returns the logits node.
    int logits(numkit::DiffGraph& g, std::span<const int> toks,
               const GraphHook* hook = nullptr) const;
    // Resume from a [n, dim] node holding the residual stream after block
    // `from_layer` (1-based); runs the remaining blocks, final norm, unembed.
    int logits_from_states(numkit::DiffGraph& g, int states, int from_layer) const;
    // Same resume, stopping at the last block's residual output (no final
    // norm or unembedding).
    int final_states_from(numkit::DiffGraph& g, int states, int from_layer) const;
};

// Mean NLL over response positions only (rows before `prompt_len` are masked).
// `toks` is prompt followed by response.
int lm_nll_node(numkit::DiffGraph& g, const GraphModel& gm, std::span<const int> toks,
                int prompt_len, const GraphHook* hook = nullptr);

// Value-only evaluation through the plain forward path.
double lm_nll(const ToyLM& m, std::span<const int> prompt, std::span<const int> response,
              const HookSpec* hook = nullptr);

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

struct SampleMode {
    bool greedy = true;
    double temperature = 1.0;
    uint64_t seed = 0;

    static SampleMode make_greedy() { return {}; }
    static SampleMode make_temperature(double t, uint64_t seed) { return {false, t, seed}; }
};

// Returns only the newly generated tokens (at most max_new; stops after eos).
// pad is never produced; `banned` (length vocab) suppresses further ids.
std::vector<int> generate(const ToyLM& m, std::span<const int> prompt, const HookSpec* hook,
                          int max_new, const SampleMode& mode,
                          const std::vector<char>* banned = nullptr);

// ---------------------------------------------------------------------------
// persistence: JSON header + little-endian f64 blob, fixed serialization order
// ---------------------------------------------------------------------------

void save_model(const ToyLM& m, const std::string& header_path, const std::string& blob_path);
ToyLM load_model(const std::string& header_path, const std::string& blob_path);

}  // namespace steerlab::toylm
