#pragma once

// Planted-concept corpus generation, activation collection from the toy LM,
// and the on-disk ActivationDataset format (manifest.jsonl + acts.f32).

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "steerlab/numkit.hpp"
#include "steerlab/toylm.hpp"

namespace steerlab::corpus {

using numkit::Matrix;

struct QuotaInfeasible : std::runtime_error {
    explicit QuotaInfeasible(const std::string& what) : std::runtime_error(what) {}
};
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

enum class Genre { text, code, math };
enum class Label { positive, negative, hard_negative };

std::string to_string(Genre g);
std::string to_string(Label l);
Genre genre_from_string(const std::string& s);
Label label_from_string(const std::string& s);
inline int label_binary(Label l) { return l == Label::positive ? 1 : 0; }

// ---------------------------------------------------------------------------
// vocabulary layout
// ---------------------------------------------------------------------------
// ids 0..3 reserved (pad/bos/eos/space), 4..9 structural ("(" ")" "{" "}" "+"
// "="), 10 the contrast marker, background up to plant_start-1, and a fixed
// plantable region plant_start..vocab-1. Negatives never sample the plantable
// region or the marker, which keeps them concept-independent.
struct VocabLayout {
    int vocab_size = 64;
    int plant_start = 40;

    static constexpr int paren_open = 4;
    static constexpr int paren_close = 5;
    static constexpr int brace_open = 6;
    static constexpr int brace_close = 7;
    static constexpr int op_plus = 8;
    static constexpr int op_eq = 9;
    static constexpr int contrast_marker = 10;
    static constexpr int background_start = 11;

    static VocabLayout for_vocab(int vocab_size);

    bool is_background(int t) const { return t >= background_start && t < plant_start; }
    bool is_plantable(int t) const { return t >= plant_start && t < vocab_size; }
    int background_count() const { return plant_start - background_start; }

    // reversible token<->symbol table (whitespace-free symbols)
    std::string symbol(int t) const;
    int token_for(const std::string& symbol) const;
    std::string detokenize(std::span<const int> toks) const;

    // mask of ids negatives must not produce (plantable region + marker + bos)
    std::vector<char> negative_ban_mask() const;
};

// ---------------------------------------------------------------------------
// concepts and sequences
// ---------------------------------------------------------------------------

struct ConceptSpec {
    std::string concept_id;
    Genre genre = Genre::text;
    std::vector<int> planted_tokens;
    // Same surface ids as planted_tokens by default; hard negatives use them in
    // the contrast pattern (wrapped in the marker token).
    std::vector<int> contrast_tokens;
    double plant_rate = 0.25;

    const std::vector<int>& effective_contrast() const {
        return contrast_tokens.empty() ? planted_tokens : contrast_tokens;
    }
};

struct LabeledSequence {
    std::vector<int> instruction;  // starts with bos
    std::vector<int> response;     // ends with eos
    Label label = Label::negative;
    std::string concept_id;

    std::vector<int> full() const {
        std::vector<int> t(instruction);
        t.insert(t.end(), response.begin(), response.end());
        return t;
    }
};

// Pattern counters shared by the invariant checks and the mock judge.
// A planted-pattern occurrence is a planted token with no adjacent contrast
// marker; a contrast-pattern occurrence is one with an adjacent marker.
int count_planted_pattern(std::span<const int> response, const ConceptSpec& spec);
int count_contrast_pattern(std::span<const int> response, const ConceptSpec& spec);

// Distinct non-reserved, non-structural tokens of an instruction.
std::vector<int> instruction_keywords(const LabeledSequence& seq);

struct ConceptCorpus {
    std::vector<LabeledSequence> train;  // positives then negatives
    std::vector<LabeledSequence> eval;   // positives, negatives, hard negatives
};

// Deterministic planted corpus. Train is half positive / half negative with no
// hard negatives; eval adds a hard-negative quota (fraction of eval negatives).
// Negatives are sampled from the model and depend only on (seed, layout),
// never on the concept.
ConceptCorpus plant_concept_corpus(const toylm::ToyLM& model, const VocabLayout& layout,
                                   const ConceptSpec& spec, int n_train, int n_eval,
                                   uint64_t seed, double hard_negative_quota = 1.0 / 3.0);

// Extra concept-independent plain negatives (imbalanced-F1 pool).
std::vector<LabeledSequence> shared_negative_pool(const toylm::ToyLM& model,
                                                  const VocabLayout& layout, int count,
                                                  uint64_t seed);

// Instructions for steering evaluation (disjoint stream from corpus instructions).
std::vector<LabeledSequence> steering_instructions(const VocabLayout& layout, Genre genre,
                                                   const std::string& concept_id, int count,
                                                   uint64_t seed);

// ---------------------------------------------------------------------------
// activation collection
// ---------------------------------------------------------------------------

struct ActivationDataset {
    std::string concept_id;
    int layer = 1;
    std::string split;  // "train" | "eval"
    Matrix rows;        // one row per token, f32-rounded at collection
    std::vector<long> offsets;              // per-sequence first row
    std::vector<int> row_counts;            // per-sequence row count
    std::vector<Label> seq_labels;
    std::vector<std::vector<int>> seq_tokens;
    std::vector<int> row_labels;  // token-level 0/1, inherited from the sequence

    int seq_count() const { return static_cast<int>(offsets.size()); }
    long row_count_total() const { return rows.rows; }
};

ActivationDataset collect_activations(const toylm::ToyLM& model,
                                      const std::vector<LabeledSequence>& seqs, int layer,
                                      const std::string& split);

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

// dir/manifest.jsonl + dir/acts.f32 (row-major little-endian f32).
void save_dataset(const ActivationDataset& ds, const std::string& dir);
ActivationDataset load_dataset(const std::string& dir);

// LabeledSequence corpora as JSONL.
void save_sequences(const std::vector<LabeledSequence>& seqs, const std::string& path);
std::vector<LabeledSequence> load_sequences(const std::string& path);

}  // namespace steerlab::corpus
