#include "steerlab/detect_eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "steerlab/io.hpp"

namespace steerlab::detect_eval {

std::string to_string(Pooling p) { return p == Pooling::max ? "max" : "mean"; }

Pooling pooling_from_string(const std::string& s) {
    if (s == "max") return Pooling::max;
    if (s == "mean") return Pooling::mean;
    throw corpus::FormatError("unknown pooling: " + s);
}

std::vector<double> token_detection_scores(const ConceptSubspace& sub,
                                           const ActivationDataset& ds) {
    if (sub.dim() != ds.rows.cols)
        throw DimensionMismatch("token_detection_scores: subspace dim " +
                                std::to_string(sub.dim()) + " vs rows dim " +
                                std::to_string(ds.rows.cols));
    std::vector<double> scores(ds.row_count_total());
    for (long r = 0; r < ds.row_count_total(); ++r) {
        const double* row = ds.rows.row_ptr(static_cast<int>(r));
        double s = numkit::dot({row, static_cast<size_t>(ds.rows.cols)}, sub.w);
        switch (sub.activation) {
            case learners::DetectionActivation::identity:
                break;
            case learners::DetectionActivation::relu:
                s = std::max(0.0, s);
                break;
            case learners::DetectionActivation::jumprelu: {
                const double pre = s + sub.bias;
                s = pre > sub.jump_theta ? pre : 0.0;
                break;
            }
        }
        scores[r] = s;
    }
    return scores;
}

double pool_sequence_score(std::span<const double> token_scores, Pooling mode) {
    if (token_scores.empty()) throw EmptySequence("pool_sequence_score: empty sequence");
    if (mode == Pooling::max) return *std::max_element(token_scores.begin(), token_scores.end());
    double s = 0.0;
    for (double x : token_scores) s += x;
    return s / static_cast<double>(token_scores.size());
}

std::vector<double> pool_scores(const ActivationDataset& ds,
                                std::span<const double> token_scores, Pooling mode) {
    std::vector<double> out;
    out.reserve(ds.seq_count());
    for (int s = 0; s < ds.seq_count(); ++s)
        out.push_back(pool_sequence_score(
            token_scores.subspan(static_cast<size_t>(ds.offsets[s]),
                                 static_cast<size_t>(ds.row_counts[s])),
            mode));
    return out;
}

NormalizedScores minmax_normalize(std::span<const double> seq_scores,
                                  std::span<const double> token_scores) {
    if (seq_scores.empty()) return {};
    NormalizedScores out;
    const auto [lo_it, hi_it] = std::minmax_element(seq_scores.begin(), seq_scores.end());
    const double lo = *lo_it, hi = *hi_it;
    out.values.reserve(seq_scores.size());
    for (double s : seq_scores)
        out.values.push_back(hi > lo ? (s - lo) / (hi - lo) : 0.0);
    double m = 0.0;
    for (double t : token_scores) m = std::max(m, t);
    out.m_c = m;
    return out;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DimensionMismatch("auroc: length mismatch");
    long p = 0, n = 0;
    for (int y : labels) (y == 1 ? p : n) += 1;
    if (p == 0 || n == 0) throw MissingClass("auroc: need both classes");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // average ranks within tie groups; AUROC = (R+ - P(P+1)/2) / (P*N)
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k)
            if (labels[order[k]] == 1) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    return (rank_sum_pos - 0.5 * static_cast<double>(p) * static_cast<double>(p + 1)) /
           (static_cast<double>(p) * static_cast<double>(n));
}

F1Result f1_sweep(std::span<const double> scores, std::span<const int> labels,
                  std::span<const double> extra_negative_scores) {
    if (scores.size() != labels.size()) throw DimensionMismatch("f1_sweep: length mismatch");
    std::vector<double> s(scores.begin(), scores.end());
    std::vector<int> y(labels.begin(), labels.end());
    for (double e : extra_negative_scores) {
        s.push_back(e);
        y.push_back(0);
    }
    long p = 0, n = 0;
    for (int v : y) (v == 1 ? p : n) += 1;
    if (p == 0 || n == 0) throw MissingClass("f1_sweep: need both classes");

    std::vector<double> uniq(s);
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

    std::vector<double> candidates;
    candidates.push_back(uniq.front() - 1.0);  // below everything: predict all positive
    for (size_t i = 0; i + 1 < uniq.size(); ++i)
        candidates.push_back(0.5 * (uniq[i] + uniq[i + 1]));
    candidates.push_back(uniq.back() + 1.0);  // above everything: predict none

    F1Result best;
    bool first = true;
    for (double thr : candidates) {
        long tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < s.size(); ++i) {
            const bool pred = s[i] > thr;
            if (pred && y[i] == 1) ++tp;
            else if (pred && y[i] == 0) ++fp;
            else if (!pred && y[i] == 1) ++fn;
        }
        const double precision = (tp + fp) > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
        const double recall = (tp + fn) > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
        const double f1 =
            (precision + recall) > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
        if (first || f1 > best.f1) {  // strict: ties keep the lowest threshold
            best = {thr, f1, precision, recall};
            first = false;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

namespace {

std::vector<int> sequence_labels(const ActivationDataset& ds) {
    std::vector<int> y;
    y.reserve(ds.seq_count());
    for (auto l : ds.seq_labels) y.push_back(corpus::label_binary(l));
    return y;
}

DetectionReport build_report(const std::string& concept_id, const std::string& method,
                             const std::string& pooling, std::vector<double> seq_scores,
                             std::vector<int> labels, std::span<const double> token_scores,
                             std::span<const double> extra_negative_scores) {
    DetectionReport rep;
    rep.concept_id = concept_id;
    rep.method = method;
    rep.pooling = pooling;
    rep.labels = std::move(labels);
    rep.raw_scores = std::move(seq_scores);
    auto norm = minmax_normalize(rep.raw_scores, token_scores);
    rep.normalized = std::move(norm.values);
    rep.m_c = norm.m_c;
    rep.auroc = auroc(rep.normalized, rep.labels);
    rep.f1_balanced = f1_sweep(rep.normalized, rep.labels);
    if (!extra_negative_scores.empty()) {
        // normalize the pool with the eval min-max so thresholds live on one scale
        const auto [lo_it, hi_it] =
            std::minmax_element(rep.raw_scores.begin(), rep.raw_scores.end());
        std::vector<double> extra_norm;
        extra_norm.reserve(extra_negative_scores.size());
        for (double e : extra_negative_scores)
            extra_norm.push_back(*hi_it > *lo_it ? (e - *lo_it) / (*hi_it - *lo_it) : 0.0);
        rep.f1_imbalanced = f1_sweep(rep.normalized, rep.labels, extra_norm);
        rep.extra_negatives = static_cast<long>(extra_negative_scores.size());
    } else {
        rep.f1_imbalanced = rep.f1_balanced;
    }
    return rep;
}

}  // namespace

DetectionReport evaluate_subspace(ConceptSubspace& sub, const ActivationDataset& eval_ds,
                                  Pooling mode, const ActivationDataset* extra_negative_pool) {
    const auto token_scores = token_detection_scores(sub, eval_ds);
    auto seq_scores = pool_scores(eval_ds, token_scores, mode);
    std::vector<double> extra;
    if (extra_negative_pool) {
        const auto pool_token = token_detection_scores(sub, *extra_negative_pool);
        extra = pool_scores(*extra_negative_pool, pool_token, mode);
    }
    auto rep = build_report(sub.concept_id, sub.method, to_string(mode), std::move(seq_scores),
                            sequence_labels(eval_ds), token_scores, extra);
    sub.max_activation = rep.m_c;
    return rep;
}

DetectionReport evaluate_scores(const std::string& concept_id, const std::string& method,
                                const std::string& pooling, std::vector<double> seq_scores,
                                std::vector<int> labels, std::span<const double> token_scores,
                                std::span<const double> extra_negative_scores) {
    return build_report(concept_id, method, pooling, std::move(seq_scores), std::move(labels),
                        token_scores, extra_negative_scores);
}

void write_reports_jsonl(const std::vector<DetectionReport>& reports, const std::string& path) {
    std::string out;
    for (const auto& r : reports) {
        nlohmann::json rec = {
            {"concept_id", r.concept_id},
            {"method", r.method},
            {"pooling", r.pooling},
            {"auroc", r.auroc},
            {"m_c", r.m_c},
            {"f1_balanced", r.f1_balanced.f1},
            {"f1_balanced_threshold", r.f1_balanced.threshold},
            {"f1_balanced_precision", r.f1_balanced.precision},
            {"f1_balanced_recall", r.f1_balanced.recall},
            {"f1_imbalanced", r.f1_imbalanced.f1},
            {"f1_imbalanced_threshold", r.f1_imbalanced.threshold},
            {"extra_negatives", r.extra_negatives},
            {"raw_scores", r.raw_scores},
            {"normalized_scores", r.normalized},
            {"labels", r.labels},
        };
        out += rec.dump() + "\n";
    }
    io::write_file(path, out);
}

void write_summary_csv(const std::vector<DetectionReport>& reports, const std::string& path) {
    std::string out = "concept_id,method,auroc,f1_balanced,f1_imbalanced\n";
    char buf[256];
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f\n", r.concept_id.c_str(),
                      r.method.c_str(), r.auroc, r.f1_balanced.f1, r.f1_imbalanced.f1);
        out += buf;
    }
    io::write_file(path, out);
}

}  // namespace steerlab::detect_eval
