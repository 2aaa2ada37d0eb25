#include "steerlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "steerlab/io.hpp"

namespace steerlab::corpus {

using numkit::Rng;
using toylm::SampleMode;
using toylm::ToyLM;
namespace tok = toylm::tokens;

std::string to_string(Genre g) {
    switch (g) {
        case Genre::text: return "text";
        case Genre::code: return "code";
        case Genre::math: return "math";
    }
    return "text";
}

std::string to_string(Label l) {
    switch (l) {
        case Label::positive: return "positive";
        case Label::negative: return "negative";
        case Label::hard_negative: return "hard_negative";
    }
    return "negative";
}

Genre genre_from_string(const std::string& s) {
    if (s == "text") return Genre::text;
    if (s == "code") return Genre::code;
    if (s == "math") return Genre::math;
    throw FormatError("unknown genre: " + s);
}

Label label_from_string(const std::string& s) {
    if (s == "positive") return Label::positive;
    if (s == "negative") return Label::negative;
    if (s == "hard_negative") return Label::hard_negative;
    throw FormatError("unknown label: " + s);
}

// ---------------------------------------------------------------------------
// VocabLayout
// ---------------------------------------------------------------------------

VocabLayout VocabLayout::for_vocab(int vocab_size) {
    if (vocab_size < 16) throw QuotaInfeasible("vocab too small for the corpus layout");
    VocabLayout l;
    l.vocab_size = vocab_size;
    l.plant_start = vocab_size - (3 * vocab_size) / 8;  // last 3/8 of ids are plantable
    return l;
}

std::string VocabLayout::symbol(int t) const {
    switch (t) {
        case tok::pad: return "<pad>";
        case tok::bos: return "<bos>";
        case tok::eos: return "<eos>";
        case tok::space: return "_";
        case paren_open: return "(";
        case paren_close: return ")";
        case brace_open: return "{";
        case brace_close: return "}";
        case op_plus: return "+";
        case op_eq: return "=";
        case contrast_marker: return "~";
    }
    if (t < 0 || t >= vocab_size) throw FormatError("symbol: token out of range");
    return (is_plantable(t) ? "k" : "w") + std::to_string(t);
}

int VocabLayout::token_for(const std::string& s) const {
    for (int t = 0; t < background_start; ++t)
        if (symbol(t) == s) return t;
    if ((s[0] == 'w' || s[0] == 'k') && s.size() > 1) {
        const int t = std::stoi(s.substr(1));
        if (t >= background_start && t < vocab_size && symbol(t) == s) return t;
    }
    throw FormatError("token_for: unknown symbol " + s);
}

std::string VocabLayout::detokenize(std::span<const int> toks) const {
    std::string out;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += symbol(toks[i]);
    }
    return out;
}

std::vector<char> VocabLayout::negative_ban_mask() const {
    std::vector<char> ban(vocab_size, 0);
    ban[tok::pad] = 1;
    ban[tok::bos] = 1;
    ban[contrast_marker] = 1;
    for (int t = plant_start; t < vocab_size; ++t) ban[t] = 1;
    return ban;
}

// ---------------------------------------------------------------------------
// pattern counters
// ---------------------------------------------------------------------------

namespace {

bool in_set(int t, const std::vector<int>& set) {
    return std::find(set.begin(), set.end(), t) != set.end();
}

bool marker_adjacent(std::span<const int> r, size_t i) {
    if (i > 0 && r[i - 1] == VocabLayout::contrast_marker) return true;
    if (i + 1 < r.size() && r[i + 1] == VocabLayout::contrast_marker) return true;
    return false;
}

}  // namespace

int count_planted_pattern(std::span<const int> response, const ConceptSpec& spec) {
    int n = 0;
    for (size_t i = 0; i < response.size(); ++i)
        if (in_set(response[i], spec.planted_tokens) && !marker_adjacent(response, i)) ++n;
    return n;
}

int count_contrast_pattern(std::span<const int> response, const ConceptSpec& spec) {
    int n = 0;
    for (size_t i = 0; i < response.size(); ++i)
        if (in_set(response[i], spec.effective_contrast()) && marker_adjacent(response, i)) ++n;
    return n;
}

std::vector<int> instruction_keywords(const LabeledSequence& seq) {
    std::vector<int> keys;
    for (int t : seq.instruction) {
        if (t < VocabLayout::background_start) continue;
        if (!in_set(t, keys)) keys.push_back(t);
    }
    return keys;
}

// ---------------------------------------------------------------------------
// generation pieces
// ---------------------------------------------------------------------------

namespace {

constexpr int kInstrMin = 4, kInstrMax = 8;
constexpr int kRespMin = 16, kRespMax = 28;
constexpr int kNegMaxNew = 24;

int background_token(Rng& rng, const VocabLayout& layout) {
    return VocabLayout::background_start +
           static_cast<int>(rng.below(static_cast<uint64_t>(layout.background_count())));
}

std::vector<int> make_instruction(Rng& rng, const VocabLayout& layout, Genre genre) {
    const int len = kInstrMin + static_cast<int>(rng.below(kInstrMax - kInstrMin + 1));
    std::vector<int> instr;
    instr.push_back(tok::bos);
    for (int i = 0; i < len; ++i) instr.push_back(background_token(rng, layout));
    // light genre flavor
    if (genre == Genre::code) instr.insert(instr.begin() + 1 + static_cast<int>(rng.below(len)),
                                           VocabLayout::paren_open);
    if (genre == Genre::math) instr.insert(instr.begin() + 1 + static_cast<int>(rng.below(len)),
                                           VocabLayout::op_eq);
    return instr;
}

int planted_token(Rng& rng, const ConceptSpec& spec) {
    return spec.planted_tokens[rng.below(spec.planted_tokens.size())];
}

// Positive responses place planted tokens under a genre template: text
// scatters singles (sometimes doubled, the way content words repeat), code
// brackets short runs, math pairs them with operators. Insertion
// probabilities are calibrated so the realized planted-token fraction of the
// response matches plant_rate for every genre.
std::vector<int> make_positive_response(Rng& rng, const VocabLayout& layout,
                                        const ConceptSpec& spec) {
    const int len = kRespMin + static_cast<int>(rng.below(kRespMax - kRespMin + 1));
    const double r_ = spec.plant_rate;
    std::vector<int> r;
    switch (spec.genre) {
        case Genre::text: {
            // event = p or p p (doubled with prob 0.5): 1.5 planted per 1.5 slots
            const double q = std::min(1.0, r_ / (1.5 - 0.5 * r_));
            while (static_cast<int>(r.size()) < len) {
                if (rng.uniform() < q) {
                    const int p = planted_token(rng, spec);
                    r.push_back(p);
                    if (rng.uniform() < 0.5) r.push_back(p);
                } else {
                    r.push_back(background_token(rng, layout));
                }
            }
            break;
        }
        case Genre::code: {
            // event = { p [p] }: 1.5 planted per 3.5 slots
            const double denom = 1.5 - 2.5 * r_;
            const double q = denom > 0.0 ? std::min(1.0, r_ / denom) : 1.0;
            while (static_cast<int>(r.size()) < len) {
                if (rng.uniform() < q) {
                    r.push_back(VocabLayout::brace_open);
                    r.push_back(planted_token(rng, spec));
                    if (rng.uniform() < 0.5) r.push_back(planted_token(rng, spec));
                    r.push_back(VocabLayout::brace_close);
                } else {
                    r.push_back(background_token(rng, layout));
                }
            }
            break;
        }
        case Genre::math: {
            // event = p op p: 2 planted per 3 slots
            const double denom = 2.0 - 2.0 * r_;
            const double q = denom > 0.0 ? std::min(1.0, r_ / denom) : 1.0;
            while (static_cast<int>(r.size()) < len) {
                if (rng.uniform() < q) {
                    r.push_back(planted_token(rng, spec));
                    r.push_back(rng.uniform() < 0.5 ? VocabLayout::op_plus : VocabLayout::op_eq);
                    r.push_back(planted_token(rng, spec));
                } else {
                    r.push_back(background_token(rng, layout));
                }
            }
            break;
        }
    }
    if (count_planted_pattern(r, spec) == 0) r[r.size() / 2] = planted_token(rng, spec);
    r.push_back(tok::eos);
    return r;
}

Genre sample_negative_genre(Rng& rng) {
    // 70/15/15 text/code/math
    const double u = rng.uniform();
    if (u < 0.70) return Genre::text;
    if (u < 0.85) return Genre::code;
    return Genre::math;
}

LabeledSequence make_plain_negative(const ToyLM& model, const VocabLayout& layout,
                                    const std::vector<char>& ban, Rng rng) {
    LabeledSequence seq;
    seq.label = Label::negative;
    seq.instruction = make_instruction(rng, layout, sample_negative_genre(rng));
    seq.response = toylm::generate(model, seq.instruction, nullptr, kNegMaxNew,
                                   SampleMode::make_temperature(1.0, rng.next_u64()), &ban);
    if (!seq.response.empty() && seq.response.back() == tok::eos) seq.response.pop_back();
    // keep responses non-degenerate
    while (static_cast<int>(seq.response.size()) < 4)
        seq.response.push_back(background_token(rng, layout));
    seq.response.push_back(tok::eos);
    return seq;
}

}  // namespace

std::vector<LabeledSequence> shared_negative_pool(const ToyLM& model, const VocabLayout& layout,
                                                  int count, uint64_t seed) {
    const auto ban = layout.negative_ban_mask();
    Rng base = Rng(seed).fork("shared-negatives");
    std::vector<LabeledSequence> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i)
        out.push_back(make_plain_negative(model, layout, ban, base.fork(static_cast<uint64_t>(i))));
    return out;
}

ConceptCorpus plant_concept_corpus(const ToyLM& model, const VocabLayout& layout,
                                   const ConceptSpec& spec, int n_train, int n_eval,
                                   uint64_t seed, double hard_negative_quota) {
    if (n_train % 2 != 0 || n_eval % 2 != 0)
        throw QuotaInfeasible("n_train and n_eval must be even");
    if (!(spec.plant_rate > 0.0 && spec.plant_rate <= 1.0))
        throw QuotaInfeasible("plant_rate must be in (0, 1]");
    if (spec.planted_tokens.empty()) throw QuotaInfeasible("no planted tokens");
    for (int t : spec.planted_tokens)
        if (!layout.is_plantable(t))
            throw QuotaInfeasible("planted token " + std::to_string(t) +
                                  " outside the plantable region");
    for (int t : spec.effective_contrast())
        if (!layout.is_plantable(t))
            throw QuotaInfeasible("contrast token " + std::to_string(t) +
                                  " outside the plantable region");

    const auto ban = layout.negative_ban_mask();
    Rng root(seed);
    ConceptCorpus out;

    // --- train: half positive, half negative, no hard negatives ---
    Rng pos_rng = root.fork("pos-train").fork(spec.concept_id);
    for (int i = 0; i < n_train / 2; ++i) {
        LabeledSequence s;
        s.label = Label::positive;
        s.concept_id = spec.concept_id;
        Rng r = pos_rng.fork(static_cast<uint64_t>(i));
        s.instruction = make_instruction(r, layout, spec.genre);
        s.response = make_positive_response(r, layout, spec);
        out.train.push_back(std::move(s));
    }
    Rng neg_train = root.fork("neg-train");  // concept-independent stream
    for (int i = 0; i < n_train / 2; ++i) {
        auto s = make_plain_negative(model, layout, ban, neg_train.fork(static_cast<uint64_t>(i)));
        s.concept_id = spec.concept_id;
        out.train.push_back(std::move(s));
    }

    // --- eval: positives, plain negatives, then the hard-negative quota ---
    const int n_eval_pos = n_eval / 2;
    const int n_eval_neg = n_eval / 2;
    const int n_hard = static_cast<int>(std::llround(hard_negative_quota * n_eval_neg));
    if (n_hard < 0 || n_hard > n_eval_neg) throw QuotaInfeasible("hard-negative quota out of range");

    Rng pos_eval = root.fork("pos-eval").fork(spec.concept_id);
    for (int i = 0; i < n_eval_pos; ++i) {
        LabeledSequence s;
        s.label = Label::positive;
        s.concept_id = spec.concept_id;
        Rng r = pos_eval.fork(static_cast<uint64_t>(i));
        s.instruction = make_instruction(r, layout, spec.genre);
        s.response = make_positive_response(r, layout, spec);
        out.eval.push_back(std::move(s));
    }
    Rng neg_eval = root.fork("neg-eval");  // concept-independent stream
    for (int i = 0; i < n_eval_neg - n_hard; ++i) {
        auto s = make_plain_negative(model, layout, ban, neg_eval.fork(static_cast<uint64_t>(i)));
        s.concept_id = spec.concept_id;
        out.eval.push_back(std::move(s));
    }
    Rng hard_rng = root.fork("hard-eval").fork(spec.concept_id);
    for (int i = 0; i < n_hard; ++i) {
        Rng r = hard_rng.fork(static_cast<uint64_t>(i));
        auto s = make_plain_negative(model, layout, ban, r.fork("base"));
        s.label = Label::hard_negative;
        s.concept_id = spec.concept_id;
        // one contrast occurrence in the middle: marker, token, marker
        const auto& contrast = spec.effective_contrast();
        const int c = contrast[r.below(contrast.size())];
        const size_t mid = s.response.size() / 2;
        s.response.insert(s.response.begin() + mid,
                          {VocabLayout::contrast_marker, c, VocabLayout::contrast_marker});
        out.eval.push_back(std::move(s));
    }
    return out;
}

std::vector<LabeledSequence> steering_instructions(const VocabLayout& layout, Genre genre,
                                                   const std::string& concept_id, int count,
                                                   uint64_t seed) {
    Rng base = Rng(seed).fork("steer-instructions").fork(concept_id);
    std::vector<LabeledSequence> out;
    for (int i = 0; i < count; ++i) {
        Rng r = base.fork(static_cast<uint64_t>(i));
        LabeledSequence s;
        s.concept_id = concept_id;
        s.label = Label::negative;
        s.instruction = make_instruction(r, layout, genre);
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// activation collection
// ---------------------------------------------------------------------------

ActivationDataset collect_activations(const ToyLM& model, const std::vector<LabeledSequence>& seqs,
                                      int layer, const std::string& split) {
    if (layer < 1 || layer > model.cfg.layers)
        throw FormatError("collect_activations: layer out of range");
    ActivationDataset ds;
    ds.layer = layer;
    ds.split = split;
    if (!seqs.empty()) ds.concept_id = seqs.front().concept_id;

    long total = 0;
    for (const auto& s : seqs) total += static_cast<long>(s.instruction.size() + s.response.size());
    ds.rows = Matrix(static_cast<int>(total), model.cfg.dim);

    long row = 0;
    for (const auto& s : seqs) {
        const auto toks = s.full();
        const auto trace = toylm::forward_hidden(model, toks);
        const Matrix& h = trace.hidden[layer];
        ds.offsets.push_back(row);
        ds.row_counts.push_back(h.rows);
        ds.seq_labels.push_back(s.label);
        ds.seq_tokens.push_back(toks);
        for (int i = 0; i < h.rows; ++i, ++row) {
            for (int j = 0; j < h.cols; ++j)
                ds.rows(static_cast<int>(row), j) =
                    static_cast<double>(static_cast<float>(h(i, j)));
            ds.row_labels.push_back(label_binary(s.label));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

void save_dataset(const ActivationDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::string manifest;
    for (int s = 0; s < ds.seq_count(); ++s) {
        nlohmann::json rec = {
            {"concept_id", ds.concept_id},
            {"label", to_string(ds.seq_labels[s])},
            {"layer", ds.layer},
            {"split", ds.split},
            {"tokens", ds.seq_tokens[s]},
            {"row_offset", ds.offsets[s]},
            {"row_count", ds.row_counts[s]},
        };
        manifest += rec.dump() + "\n";
    }
    io::write_file((fs::path(dir) / "manifest.jsonl").string(), manifest);

    std::vector<unsigned char> blob;
    blob.reserve(ds.rows.size() * 4);
    for (double x : ds.rows.data) io::append_f32_le(blob, static_cast<float>(x));
    io::write_file((fs::path(dir) / "acts.f32").string(), blob);
}

ActivationDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    ActivationDataset ds;
    const auto manifest_path = (fs::path(dir) / "manifest.jsonl").string();
    std::istringstream lines(io::read_text_file(manifest_path));
    std::string line;
    long expected_rows = 0;
    int line_no = 0;
    while (std::getline(lines, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        if (line_no == 1) {
            ds.concept_id = rec.at("concept_id").get<std::string>();
            ds.layer = rec.at("layer").get<int>();
            ds.split = rec.value("split", "train");
        }
        const long off = rec.at("row_offset").get<long>();
        const int cnt = rec.at("row_count").get<int>();
        if (off != expected_rows)
            throw FormatError("manifest line " + std::to_string(line_no) +
                              ": row_offset " + std::to_string(off) + " does not partition rows");
        ds.offsets.push_back(off);
        ds.row_counts.push_back(cnt);
        ds.seq_labels.push_back(label_from_string(rec.at("label").get<std::string>()));
        ds.seq_tokens.push_back(rec.at("tokens").get<std::vector<int>>());
        if (static_cast<long>(ds.seq_tokens.back().size()) != cnt)
            throw FormatError("manifest line " + std::to_string(line_no) +
                              ": token count != row_count");
        expected_rows += cnt;
    }
    if (expected_rows == 0) throw FormatError("empty manifest: " + manifest_path);

    const auto blob = io::read_file((fs::path(dir) / "acts.f32").string());
    if (blob.size() % (4 * static_cast<size_t>(expected_rows)) != 0)
        throw FormatError("acts.f32: expected a multiple of " + std::to_string(expected_rows * 4) +
                          " bytes, got " + std::to_string(blob.size()));
    const long dim = static_cast<long>(blob.size() / 4 / expected_rows);
    if (dim <= 0 || blob.size() != static_cast<size_t>(expected_rows) * dim * 4)
        throw FormatError("acts.f32: expected " + std::to_string(expected_rows * dim * 4) +
                          " bytes, got " + std::to_string(blob.size()));

    ds.rows = Matrix(static_cast<int>(expected_rows), static_cast<int>(dim));
    for (size_t i = 0; i < ds.rows.size(); ++i)
        ds.rows.data[i] = static_cast<double>(io::read_f32_le(&blob[i * 4]));
    for (int s = 0; s < ds.seq_count(); ++s)
        for (int r = 0; r < ds.row_counts[s]; ++r)
            ds.row_labels.push_back(label_binary(ds.seq_labels[s]));
    return ds;
}

void save_sequences(const std::vector<LabeledSequence>& seqs, const std::string& path) {
    std::string out;
    for (const auto& s : seqs) {
        nlohmann::json rec = {
            {"concept_id", s.concept_id},
            {"label", to_string(s.label)},
            {"instruction", s.instruction},
            {"response", s.response},
        };
        out += rec.dump() + "\n";
    }
    io::write_file(path, out);
}

std::vector<LabeledSequence> load_sequences(const std::string& path) {
    std::vector<LabeledSequence> out;
    std::istringstream lines(io::read_text_file(path));
    std::string line;
    int line_no = 0;
    while (std::getline(lines, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw FormatError(path + " line " + std::to_string(line_no) + ": " + e.what());
        }
        LabeledSequence s;
        s.concept_id = rec.at("concept_id").get<std::string>();
        s.label = label_from_string(rec.at("label").get<std::string>());
        s.instruction = rec.at("instruction").get<std::vector<int>>();
        s.response = rec.at("response").get<std::vector<int>>();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace steerlab::corpus
