#include "steerlab/steer_eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <regex>
#include <set>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "steerlab/io.hpp"

namespace steerlab::steer_eval {

using corpus::LabeledSequence;
using numkit::Rng;

std::string to_string(InterventionKind k) {
    switch (k) {
        case InterventionKind::addition: return "addition";
        case InterventionKind::sae_clamp: return "sae_clamp";
        case InterventionKind::sae_min_clamp: return "sae_min_clamp";
    }
    return "addition";
}

InterventionKind intervention_from_string(const std::string& s) {
    if (s == "addition") return InterventionKind::addition;
    if (s == "sae_clamp") return InterventionKind::sae_clamp;
    if (s == "sae_min_clamp") return InterventionKind::sae_min_clamp;
    throw corpus::FormatError("unknown intervention kind: " + s);
}

void SteeringPlan::validate() const {
    if (factor_grid.empty()) throw UnsupportedCombination("plan: empty factor grid");
    for (size_t i = 1; i < factor_grid.size(); ++i)
        if (factor_grid[i] <= factor_grid[i - 1])
            throw UnsupportedCombination("plan: factor grid must ascend");
    if (kind != InterventionKind::addition && (sae == nullptr || sae_latent < 0))
        throw UnsupportedCombination("plan: clamp interventions require an SAE latent");
    if (kind == InterventionKind::addition && !has_subspace && sae == nullptr)
        throw UnsupportedCombination("plan: no steering target");
    if (instructions.empty()) throw EmptySplit("plan: no instructions");
    std::set<int> seen;
    for (int i : selection_idx) seen.insert(i);
    for (int i : holdout_idx)
        if (!seen.insert(i).second) throw EmptySplit("plan: split halves overlap");
    if (seen.size() != instructions.size()) throw EmptySplit("plan: split not exhaustive");
}

double SteeringPlan::max_activation() const {
    if (kind == InterventionKind::addition && has_subspace) {
        return std::max(0.0, subspace.max_activation);
    }
    if (sae && sae_latent >= 0) return sae->max_act[sae_latent];
    throw UnsupportedCombination("plan: no steering target");
}

void split_instructions(int n, uint64_t seed, std::vector<int>& selection,
                        std::vector<int>& holdout) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    Rng rng = Rng(seed).fork("instruction-split");
    rng.shuffle(idx);
    selection.assign(idx.begin(), idx.begin() + n / 2);
    holdout.assign(idx.begin() + n / 2, idx.end());
    std::sort(selection.begin(), selection.end());
    std::sort(holdout.begin(), holdout.end());
}

double steering_magnitude(double factor, double m_c) {
    if (factor < 0.0) throw UnsupportedCombination("steering_magnitude: factor must be >= 0");
    if (m_c < 0.0) throw UnsupportedCombination("steering_magnitude: m_c must be >= 0");
    return factor * m_c;
}

toylm::HookSpec build_intervention(const SteeringPlan& plan, double factor) {
    plan.validate();
    const double alpha = steering_magnitude(factor, plan.max_activation());
    toylm::HookSpec hook;
    hook.layer = plan.layer;
    if (alpha == 0.0) {
        hook.fn = nullptr;  // identity
        return hook;
    }
    switch (plan.kind) {
        case InterventionKind::addition: {
            std::vector<double> dir;
            if (plan.has_subspace) {
                dir = plan.subspace.w;
            } else {
                dir.assign(plan.sae->w_dec.row_ptr(plan.sae_latent),
                           plan.sae->w_dec.row_ptr(plan.sae_latent) + plan.sae->d());
            }
            hook.fn = [dir, alpha](std::span<double> h) {
                for (size_t j = 0; j < h.size(); ++j) h[j] += alpha * dir[j];
            };
            break;
        }
        case InterventionKind::sae_clamp: {
            const saekit::SaeDictionary* dict = plan.sae;
            const int f = plan.sae_latent;
            hook.fn = [dict, f, alpha](std::span<double> h) {
                auto out = saekit::sae_clamp_intervene(*dict, f, {h.data(), h.size()}, alpha);
                std::copy(out.begin(), out.end(), h.begin());
            };
            break;
        }
        case InterventionKind::sae_min_clamp: {
            const saekit::SaeDictionary* dict = plan.sae;
            const int f = plan.sae_latent;
            hook.fn = [dict, f, alpha](std::span<double> h) {
                auto out =
                    saekit::sae_min_clamp_intervene(*dict, f, {h.data(), h.size()}, alpha);
                std::copy(out.begin(), out.end(), h.begin());
            };
            break;
        }
    }
    return hook;
}

// ---------------------------------------------------------------------------
// judging
// ---------------------------------------------------------------------------

double harmonic_overall(int c, int i, int f) {
    if (c < 0 || c > 2 || i < 0 || i > 2 || f < 0 || f > 2)
        throw UnsupportedCombination("harmonic_overall: subscores must be in {0,1,2}");
    if (c == 0 || i == 0 || f == 0) return 0.0;
    return 3.0 / (1.0 / c + 1.0 / i + 1.0 / f);
}

JudgeScores mock_judge(std::span<const int> generation, const corpus::ConceptSpec& spec,
                       const LabeledSequence& instruction, const MockJudgeConfig& cfg) {
    JudgeScores s;
    if (generation.empty()) return s;

    const double n = static_cast<double>(generation.size());
    const double concept_rate = corpus::count_planted_pattern(generation, spec) / n;
    if (concept_rate >= cfg.concept_rate_two) s.concept_score = 2;
    else if (concept_rate >= cfg.concept_rate_one) s.concept_score = 1;

    const auto keywords = corpus::instruction_keywords(instruction);
    if (!keywords.empty()) {
        int hit = 0;
        for (int k : keywords)
            if (std::find(generation.begin(), generation.end(), k) != generation.end()) ++hit;
        const double recall = static_cast<double>(hit) / keywords.size();
        if (recall >= cfg.keyword_recall_two) s.instruct = 2;
        else if (recall >= cfg.keyword_recall_one) s.instruct = 1;
    }

    std::set<int> distinct(generation.begin(), generation.end());
    const double distinct_ratio = static_cast<double>(distinct.size()) / n;
    int run = 1, max_run = 1;
    for (size_t i = 1; i < generation.size(); ++i) {
        run = generation[i] == generation[i - 1] ? run + 1 : 1;
        max_run = std::max(max_run, run);
    }
    if (max_run >= cfg.run_zero || distinct_ratio < cfg.distinct_zero) s.fluency = 0;
    else if (distinct_ratio >= cfg.distinct_two && max_run <= cfg.run_two) s.fluency = 2;
    else s.fluency = 1;

    s.overall = harmonic_overall(s.concept_score, s.instruct, s.fluency);
    return s;
}

int parse_rating(const std::string& text) {
    static const std::regex pattern(R"(Rating:\s*\[\[(\d+)\]\])");
    auto begin = std::sregex_iterator(text.begin(), text.end(), pattern);
    auto end = std::sregex_iterator();
    int rating = -1;
    for (auto it = begin; it != end; ++it) rating = std::stoi((*it)[1].str());
    if (rating < 0) throw UnparseableRating("no \"Rating: [[k]]\" in judge response");
    return rating;
}

namespace {

int judge_one_subscore(const std::string& endpoint, const std::string& template_id,
                       const std::string& concept_text, const std::string& instruction_text,
                       const std::string& fragment, int backoff_ms) {
    // split scheme://host:port/path
    std::string url = endpoint;
    const auto scheme = url.find("://");
    if (scheme != std::string::npos) url = url.substr(scheme + 3);
    std::string path = "/";
    const auto slash = url.find('/');
    if (slash != std::string::npos) {
        path = url.substr(slash);
        url = url.substr(0, slash);
    }

    nlohmann::json body = {
        {"template_id", template_id},
        {"concept", concept_text},
        {"instruction", instruction_text},
        {"fragment", fragment},
    };
    const std::string payload = body.dump();

    for (int attempt = 0; attempt < 3; ++attempt) {
        if (attempt > 0)
            std::this_thread::sleep_for(
                std::chrono::milliseconds(backoff_ms * (1 << (attempt - 1))));
        httplib::Client client(url);
        client.set_connection_timeout(5);
        client.set_read_timeout(30);
        auto res = client.Post(path, payload, "application/json");
        if (!res || res->status != 200) continue;
        nlohmann::json reply;
        try {
            reply = nlohmann::json::parse(res->body);
        } catch (const std::exception&) {
            throw UnparseableRating("judge reply is not JSON");
        }
        return parse_rating(reply.at("text").get<std::string>());
    }
    throw JudgeUnavailable("judge endpoint unreachable after 3 attempts: " + endpoint);
}

}  // namespace

JudgeScores external_judge(const std::string& endpoint, const std::string& generation_text,
                           const std::string& concept_text, const std::string& instruction_text,
                           int backoff_ms) {
    JudgeScores s;
    s.concept_score = judge_one_subscore(endpoint, "concept", concept_text, instruction_text,
                                         generation_text, backoff_ms);
    s.instruct = judge_one_subscore(endpoint, "instruct", concept_text, instruction_text,
                                    generation_text, backoff_ms);
    s.fluency = judge_one_subscore(endpoint, "fluency", concept_text, instruction_text,
                                   generation_text, backoff_ms);
    s.overall = harmonic_overall(s.concept_score, s.instruct, s.fluency);
    return s;
}

// ---------------------------------------------------------------------------
// sweep and selection
// ---------------------------------------------------------------------------

uint64_t derive_generation_seed(uint64_t global_seed, const std::string& concept_id,
                                int instruction_index, int factor_index) {
    uint64_t h = numkit::fnv1a(concept_id);
    const uint64_t parts[3] = {global_seed, static_cast<uint64_t>(instruction_index),
                               static_cast<uint64_t>(factor_index)};
    return numkit::fnv1a(parts, sizeof(parts), h);
}

std::vector<GenerationRecord> run_factor_sweep(const toylm::ToyLM& model,
                                               const SteeringPlan& plan, int max_new,
                                               uint64_t seed, bool include_baseline) {
    plan.validate();
    std::vector<GenerationRecord> records;
    std::vector<char> holdout_mask(plan.instructions.size(), 0);
    for (int i : plan.holdout_idx) holdout_mask[i] = 1;

    std::vector<double> factors = plan.factor_grid;
    if (include_baseline) factors.insert(factors.begin(), 0.0);

    for (size_t fi = 0; fi < factors.size(); ++fi) {
        const double factor = factors[fi];
        const int factor_index =
            include_baseline ? static_cast<int>(fi) - 1 : static_cast<int>(fi);
        toylm::HookSpec hook = factor > 0.0 ? build_intervention(plan, factor)
                                            : toylm::HookSpec{plan.layer, nullptr};
        const toylm::HookSpec* hook_ptr = hook.fn ? &hook : nullptr;
        for (size_t ii = 0; ii < plan.instructions.size(); ++ii) {
            GenerationRecord rec;
            rec.concept_id = plan.concept_id;
            rec.method = plan.method;
            rec.instruction_index = static_cast<int>(ii);
            rec.factor = factor;
            rec.holdout = holdout_mask[ii] != 0;
            const uint64_t gen_seed = derive_generation_seed(
                seed, plan.concept_id, static_cast<int>(ii), factor_index);
            rec.tokens = toylm::generate(model, plan.instructions[ii].instruction, hook_ptr,
                                         max_new, toylm::SampleMode::make_temperature(1.0, gen_seed));
            records.push_back(std::move(rec));
        }
    }
    return records;
}

int judge_records(std::vector<GenerationRecord>& records, const corpus::ConceptSpec& spec,
                  const SteeringPlan& plan, const JudgeFn& judge) {
    int skipped = 0;
    for (auto& rec : records) {
        try {
            rec.scores = judge(rec.tokens, spec, plan.instructions[rec.instruction_index]);
            rec.judged = true;
        } catch (const JudgeUnavailable&) {
            rec.judged = false;
            ++skipped;
        } catch (const UnparseableRating&) {
            rec.judged = false;
            ++skipped;
        }
    }
    return skipped;
}

SelectResult select_and_score(const std::vector<GenerationRecord>& records,
                              const std::vector<double>& factor_grid) {
    if (factor_grid.empty()) throw EmptySplit("select_and_score: empty grid");
    SelectResult out;
    double best_mean = -1.0;
    bool saw_selection = false;
    for (double factor : factor_grid) {
        double total = 0.0;
        long count = 0;
        for (const auto& r : records) {
            if (r.factor != factor || r.holdout || !r.judged) continue;
            total += r.scores.overall;
            ++count;
        }
        if (count == 0) continue;
        saw_selection = true;
        const double mean = total / count;
        if (mean > best_mean) {  // strict: ties keep the lowest factor
            best_mean = mean;
            out.factor = factor;
        }
    }
    if (!saw_selection) throw EmptySplit("select_and_score: no selection-split records");

    double total = 0.0;
    long count = 0;
    for (const auto& r : records) {
        if (r.factor != out.factor || !r.holdout || !r.judged) continue;
        total += r.scores.overall;
        ++count;
    }
    if (count == 0) throw EmptySplit("select_and_score: no holdout records at selected factor");
    out.holdout_overall = total / count;
    return out;
}

double winrate(const std::map<std::string, double>& method_scores,
               const std::map<std::string, double>& baseline_scores) {
    if (method_scores.size() != baseline_scores.size() || method_scores.empty())
        throw ConceptSetMismatch("winrate: concept sets differ");
    double wins = 0.0;
    for (const auto& [concept_id, score] : method_scores) {
        auto it = baseline_scores.find(concept_id);
        if (it == baseline_scores.end())
            throw ConceptSetMismatch("winrate: missing concept " + concept_id);
        if (score > it->second) wins += 1.0;
        else if (score == it->second) wins += 0.5;
    }
    return 100.0 * wins / static_cast<double>(method_scores.size());
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

void write_records_jsonl(const std::vector<GenerationRecord>& records, const std::string& path) {
    std::string out;
    for (const auto& r : records) {
        nlohmann::json rec = {
            {"concept_id", r.concept_id},
            {"method", r.method},
            {"instruction_index", r.instruction_index},
            {"factor", r.factor},
            {"holdout", r.holdout},
            {"judged", r.judged},
            {"tokens", r.tokens},
            {"concept_score", r.scores.concept_score},
            {"instruct_score", r.scores.instruct},
            {"fluency_score", r.scores.fluency},
            {"overall", r.scores.overall},
        };
        out += rec.dump() + "\n";
    }
    io::write_file(path, out);
}

void write_summary_csv(const std::vector<GenerationRecord>& records, const std::string& path) {
    std::string out = "method,concept,factor,c,i,f,overall\n";
    char buf[256];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.6g,%d,%d,%d,%.6f\n", r.method.c_str(),
                      r.concept_id.c_str(), r.factor, r.scores.concept_score, r.scores.instruct,
                      r.scores.fluency, r.scores.overall);
        out += buf;
    }
    io::write_file(path, out);
}

void write_selection_csv(const std::vector<ConceptSteeringSummary>& rows,
                         const std::string& path) {
    std::string out = "method,concept,selected_factor,holdout_overall\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.6g,%.6f\n", r.method.c_str(),
                      r.concept_id.c_str(), r.selected_factor, r.holdout_overall);
        out += buf;
    }
    io::write_file(path, out);
}

std::vector<double> default_factor_grid() {
    return {0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.5, 3.0, 4.0, 5.0};
}

std::vector<double> clamp_factor_grid() {
    return {0.4, 0.8, 1.2, 1.6, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0, 20.0, 40.0, 60.0, 100.0};
}

}  // namespace steerlab::steer_eval
