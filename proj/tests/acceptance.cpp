// Acceptance suite: runs every gate criterion at its stated tolerance and
// prints one pass/fail line per criterion. Exits nonzero on any failure.

#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "oracles.hpp"
#include "steerlab/attribution.hpp"
#include "steerlab/detect_eval.hpp"
#include "steerlab/io.hpp"
#include "steerlab/learners.hpp"
#include "steerlab/pipeline.hpp"
#include "steerlab/saekit.hpp"
#include "steerlab/steer_eval.hpp"
#include "steerlab/toylm.hpp"

using namespace steerlab;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

void report(int criterion, const std::string& name, bool ok, const std::string& detail,
            double elapsed, double budget) {
    const bool in_budget = elapsed <= budget;
    if (!ok || !in_budget) ++failures;
    std::printf("[%s] criterion %2d: %s — %s (%.2fs / budget %.0fs)\n",
                ok && in_budget ? "PASS" : "FAIL", criterion, name.c_str(), detail.c_str(),
                elapsed, budget);
    std::fflush(stdout);
}

std::string fmt(const char* pattern, ...) {
    char buf[512];
    va_list args;
    va_start(args, pattern);
    std::vsnprintf(buf, sizeof(buf), pattern, args);
    va_end(args);
    return buf;
}

// ---------------------------------------------------------------------------
// 1. sort-based AUROC equals brute-force pairwise AUROC to 1e-12
// ---------------------------------------------------------------------------

void criterion_1() {
    const auto start = Clock::now();
    numkit::Rng rng(20260811);
    double worst = 0.0;
    int checked = 0;
    while (checked < 200) {
        const int n = 4 + static_cast<int>(rng.below(197));
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool has0 = false, has1 = false;
        for (int i = 0; i < n; ++i) {
            scores[i] = std::round(rng.normal() * 8.0) / 8.0;  // grid scores force ties
            labels[i] = rng.below(2) == 1;
            (labels[i] ? has1 : has0) = true;
        }
        if (!has0 || !has1) continue;
        ++checked;
        worst = std::max(worst, std::fabs(detect_eval::auroc(scores, labels) -
                                          oracles::auroc_pairwise(scores, labels)));
    }
    report(1, "metric oracle equivalence", worst <= 1e-12,
           fmt("max |sort - pairwise| = %.2e over 200 sets (tolerance 1e-12)", worst),
           seconds_since(start), 5.0);
}

// ---------------------------------------------------------------------------
// 2. power iteration matches the dense eigensolver oracle
// ---------------------------------------------------------------------------

void criterion_2() {
    const auto start = Clock::now();
    numkit::Rng rng(42);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const int rows = 2 + static_cast<int>(rng.below(31));
        const int cols = 2 + static_cast<int>(rng.below(15));
        numkit::Matrix x(rows, cols);
        for (double& v : x.data) v = rng.normal();
        const auto fast = numkit::top_principal_component(x);
        const auto oracle = oracles::top_eigvec_oracle(x);
        worst = std::max(worst, oracles::vec_dist_up_to_sign(fast, oracle));
    }
    report(2, "spectral oracle", worst <= 1e-6,
           fmt("max eigvec distance (up to sign) = %.2e over 50 matrices (tolerance 1e-6)",
               worst),
           seconds_since(start), 5.0);
}

// ---------------------------------------------------------------------------
// 3. finite differences on the Probe / SSV / ReFT-r1 losses
// ---------------------------------------------------------------------------

void criterion_3() {
    const auto start = Clock::now();
    auto model = toylm::build_toy_lm({});
    auto layout = corpus::VocabLayout::for_vocab(64);
    corpus::ConceptSpec spec;
    spec.concept_id = "fd";
    spec.genre = corpus::Genre::text;
    spec.planted_tokens = {40, 41, 42};
    spec.plant_rate = 0.45;
    auto corp = corpus::plant_concept_corpus(model, layout, spec, 8, 4, 7);
    auto train_ds = corpus::collect_activations(model, corp.train, 1, "train");
    std::vector<corpus::LabeledSequence> batch(corp.train.begin(), corp.train.begin() + 4);

    numkit::Rng rng(55);
    double worst = 0.0;
    std::string worst_loss = "-";
    for (int point = 0; point < 5; ++point) {
        std::vector<double> w(model.cfg.dim);
        for (double& x : w) x = 0.5 * rng.normal();

        numkit::DiffGraph probe_graph;
        const int probe_loss = learners::probe_loss_node(probe_graph, train_ds, w);
        const double probe_err = numkit::finite_diff_check(probe_graph, probe_loss, 1e-5);

        numkit::DiffGraph ssv_graph;
        const int ssv_loss = learners::ssv_loss_node(ssv_graph, model, batch, 1, w);
        const double ssv_err = numkit::finite_diff_check(ssv_graph, ssv_loss, 1e-5);

        numkit::DiffGraph reft_graph;
        const int reft_loss =
            learners::reft_r1_loss_node(reft_graph, model, batch, 1, w, 5e-3, 4);
        const double reft_err = numkit::finite_diff_check(reft_graph, reft_loss, 1e-5);

        if (probe_err > worst) worst = probe_err, worst_loss = "probe";
        if (ssv_err > worst) worst = ssv_err, worst_loss = "ssv";
        if (reft_err > worst) worst = reft_err, worst_loss = "reft_r1";
    }
    report(3, "gradient integrity", worst < 1e-4,
           fmt("max relative FD error = %.2e (%s) over 5 points x 3 losses (tolerance 1e-4)",
               worst, worst_loss.c_str()),
           seconds_since(start), 30.0);
}

// ---------------------------------------------------------------------------
// 4. IG completeness
// ---------------------------------------------------------------------------

void criterion_4() {
    const auto start = Clock::now();
    auto model = toylm::build_toy_lm({});
    auto head = attribution::make_head(model.cfg.dim, 16, 9);
    numkit::Rng rng(77);

    double worst_rel = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const int len = 4 + static_cast<int>(rng.below(8));
        std::vector<int> toks(len);
        toks[0] = toylm::tokens::bos;
        for (int i = 1; i < len; ++i) toks[i] = 11 + static_cast<int>(rng.below(50));
        const auto trace = toylm::forward_hidden(model, toks);
        const auto& states = trace.hidden[1];
        const auto baseline = attribution::baseline_states(model, 1, states.rows);
        auto f = attribution::model_head_fn(model, head, 1);
        const auto ig = attribution::ig_core(f, states, baseline, 200);
        const double lhs = attribution::ig_signed_sum(ig);
        const double rhs = f(states, nullptr) - f(baseline, nullptr);
        worst_rel = std::max(worst_rel, std::fabs(lhs - rhs) / std::max(1.0, std::fabs(rhs)));
    }

    // exactness for a linear head at a single step
    numkit::Matrix states(5, 8), baseline(5, 8), v(5, 8);
    for (double& x : states.data) x = rng.normal();
    for (double& x : baseline.data) x = rng.normal();
    for (double& x : v.data) x = rng.normal();
    attribution::StateFn linear = [&](const numkit::Matrix& s, numkit::Matrix* grad) {
        if (grad) *grad = v;
        double total = 0.0;
        for (size_t i = 0; i < s.size(); ++i) total += s.data[i] * v.data[i];
        return total;
    };
    double linear_err = 0.0;
    const auto ig_lin = attribution::ig_core(linear, states, baseline, 1);
    const double expect = linear(states, nullptr) - linear(baseline, nullptr);
    linear_err = std::fabs(attribution::ig_signed_sum(ig_lin) - expect);

    report(4, "IG completeness", worst_rel <= 1e-3 && linear_err <= 1e-9,
           fmt("max relative gap = %.2e over 10 sequences at 200 steps (tol 1e-3); linear "
               "head gap = %.2e (tol 1e-9)",
               worst_rel, linear_err),
           seconds_since(start), 30.0);
}

// ---------------------------------------------------------------------------
// 5. SAE clamp identity and min-clamp identity
// ---------------------------------------------------------------------------

void criterion_5() {
    const auto start = Clock::now();
    numkit::Rng rng(31);
    double worst_clamp = 0.0, worst_min = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int d = 4 + static_cast<int>(rng.below(20));
        const int z = 2 + static_cast<int>(rng.below(30));
        saekit::SaeDictionary dict;
        dict.w_enc = numkit::Matrix(d, z);
        dict.w_dec = numkit::Matrix(z, d);
        for (double& x : dict.w_enc.data) x = rng.normal(0.0, 0.5);
        for (double& x : dict.w_dec.data) x = rng.normal(0.0, 0.5);
        dict.b_enc.assign(z, 0.0);
        dict.theta.assign(z, 0.0);
        dict.max_act.assign(z, 1.0);

        std::vector<double> h(d);
        for (double& x : h) x = rng.normal();
        const int f = static_cast<int>(rng.below(z));
        const double zf = saekit::sae_latent(dict, f, h);

        const auto clamped = saekit::sae_clamp_intervene(dict, f, h, zf);
        for (int i = 0; i < d; ++i)
            worst_clamp = std::max(worst_clamp, std::fabs(clamped[i] - h[i]));

        const double below = zf - std::fabs(rng.normal()) - 1e-6;
        const auto min_clamped = saekit::sae_min_clamp_intervene(dict, f, h, below);
        for (int i = 0; i < d; ++i)
            worst_min = std::max(worst_min, std::fabs(min_clamped[i] - h[i]));
    }
    report(5, "SAE clamp identity", worst_clamp <= 1e-9 && worst_min <= 1e-9,
           fmt("max |clamp(z_f) - h| = %.2e, max |min-clamp(below) - h| = %.2e over 100 "
               "triples (tolerance 1e-9)",
               worst_clamp, worst_min),
           seconds_since(start), 5.0);
}

// ---------------------------------------------------------------------------
// 6 + 7 + 8: planted-corpus detection, steering, and SAE-A recovery
// ---------------------------------------------------------------------------

std::map<std::string, std::vector<double>> read_detection_aurocs(const std::string& csv_path) {
    std::map<std::string, std::vector<double>> by_method;
    std::istringstream in(io::read_text_file(csv_path));
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        std::istringstream row(line);
        std::string cid, method, auroc_s;
        std::getline(row, cid, ',');
        std::getline(row, method, ',');
        std::getline(row, auroc_s, ',');
        by_method[method].push_back(std::stod(auroc_s));
    }
    return by_method;
}

void criteria_6_7_8(const fs::path& out) {
    pipeline::RunConfig cfg = pipeline::default_desk_config();
    cfg.out_dir = out.string();
    cfg.jobs = 2;
    cfg.extra_negatives = 0;
    cfg.detect_methods = {"diffmean", "pca", "probe", "reft_r1"};
    cfg.steer_methods = {"diffmean", "reft_r1"};
    cfg.winrate_baseline = "reft_r1";

    // --- criterion 6: detection ---
    {
        const auto start = Clock::now();
        pipeline::stage_gen(cfg);
        pipeline::stage_collect(cfg);
        pipeline::stage_train(cfg);
        pipeline::stage_detect(cfg);
        const auto aurocs =
            read_detection_aurocs((out / "reports" / "detection_summary.csv").string());
        auto mean = [&](const std::string& m) {
            const auto& v = aurocs.at(m);
            double s = 0.0;
            for (double x : v) s += x;
            return s / v.size();
        };
        const double dm = mean("diffmean"), probe = mean("probe"), reft = mean("reft_r1"),
                     pca = mean("pca");
        const bool ok = dm >= 0.90 && probe >= 0.90 && reft >= 0.90 && dm > pca &&
                        probe > pca && reft > pca;
        report(6, "planted detection",
               ok,
               fmt("mean AUROC over 8 concepts: diffmean %.3f, probe %.3f, reft_r1 %.3f "
                   "(each needs >= 0.90 and > pca %.3f)",
                   dm, probe, reft, pca),
               seconds_since(start), 180.0);
    }

    // --- criterion 7: steering trends ---
    {
        const auto start = Clock::now();
        pipeline::stage_steer(cfg);

        std::map<std::pair<std::string, std::string>, double> selected_factor;
        {
            std::istringstream in(
                io::read_text_file((out / "reports" / "steering_selection.csv").string()));
            std::string line;
            std::getline(in, line);
            while (std::getline(in, line)) {
                std::istringstream row(line);
                std::string method, cid, factor_s, overall_s;
                std::getline(row, method, ',');
                std::getline(row, cid, ',');
                std::getline(row, factor_s, ',');
                std::getline(row, overall_s, ',');
                selected_factor[{method, cid}] = std::stod(factor_s);
            }
        }

        struct Acc {
            double total = 0.0;
            long count = 0;
            void add(double v) {
                total += v;
                ++count;
            }
            double mean() const { return count ? total / count : 0.0; }
        };
        std::map<std::pair<std::string, std::string>, Acc> concept_at_selected, concept_at_zero;
        std::map<std::string, Acc> instruct_small, instruct_large;
        const auto grid = cfg.resolved_factor_grid();
        const double f_small = grid.front(), f_large = grid.back();

        std::istringstream in(
            io::read_text_file((out / "reports" / "steering.jsonl").string()));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto rec = nlohmann::json::parse(line);
            const std::string method = rec.at("method").get<std::string>();
            const std::string cid = rec.at("concept_id").get<std::string>();
            const double factor = rec.at("factor").get<double>();
            const int c_score = rec.at("concept_score").get<int>();
            const int i_score = rec.at("instruct_score").get<int>();
            if (factor == 0.0) concept_at_zero[{method, cid}].add(c_score);
            if (factor == selected_factor.at({method, cid}))
                concept_at_selected[{method, cid}].add(c_score);
            if (factor == f_small) instruct_small[method].add(i_score);
            if (factor == f_large) instruct_large[method].add(i_score);
        }

        std::string detail;
        bool ok = true;
        for (const std::string method : {"diffmean", "reft_r1"}) {
            int improved = 0;
            for (const auto& spec : cfg.concepts) {
                const auto key = std::make_pair(method, spec.concept_id);
                if (concept_at_selected.at(key).mean() > concept_at_zero.at(key).mean())
                    ++improved;
            }
            const double small = instruct_small.at(method).mean();
            const double large = instruct_large.at(method).mean();
            const bool m_ok = improved >= 6 && large <= small;
            ok = ok && m_ok;
            detail += fmt("%s: concept up on %d/8, instruct %.2f@%.1f <= %.2f@%.1f; ",
                          method.c_str(), improved, large, f_large, small, f_small);
        }
        report(7, "planted steering", ok, detail, seconds_since(start), 300.0);
    }

    // --- criterion 8: SAE-A recovery from a planted dictionary ---
    {
        const auto start = Clock::now();
        const auto model = toylm::load_model((out / "model.json").string(),
                                             (out / "model.f64").string());
        std::map<std::string, std::vector<double>> directions;
        std::vector<corpus::ActivationDataset> trains;
        long total_rows = 0;
        for (const auto& spec : cfg.concepts) {
            auto ds = corpus::load_dataset(
                (out / "acts" / spec.concept_id / "train").string());
            std::vector<double> dir(cfg.model.dim, 0.0);
            for (int t : spec.planted_tokens)
                for (int i = 0; i < cfg.model.dim; ++i) dir[i] += model.emb(t, i);
            numkit::normalize(dir);
            directions[spec.concept_id] = std::move(dir);
            total_rows += ds.row_count_total();
            trains.push_back(std::move(ds));
        }
        numkit::Matrix reference(static_cast<int>(total_rows), cfg.model.dim);
        long row = 0;
        for (const auto& ds : trains)
            for (long r = 0; r < ds.row_count_total(); ++r, ++row)
                std::copy(ds.rows.row_ptr(static_cast<int>(r)),
                          ds.rows.row_ptr(static_cast<int>(r)) + ds.rows.cols,
                          reference.row_ptr(static_cast<int>(row)));
        auto planted = saekit::plant_sae(1234, cfg.model.dim, 64, directions, &reference);

        int recovered = 0;
        for (size_t i = 0; i < cfg.concepts.size(); ++i) {
            const auto& cid = cfg.concepts[i].concept_id;
            if (saekit::select_feature_auroc(planted.dict, trains[i]) ==
                planted.latent_of_concept.at(cid))
                ++recovered;
        }
        report(8, "SAE-A recovery", recovered == 8,
               fmt("planted latent recovered for %d/8 concepts (z = 64)", recovered),
               seconds_since(start), 60.0);
    }
}

// ---------------------------------------------------------------------------
// 9. winrate algebra
// ---------------------------------------------------------------------------

void criterion_9() {
    const auto start = Clock::now();
    numkit::Rng rng(2024);
    bool ok = true;
    std::map<std::string, double> a;
    for (int c = 0; c < 8; ++c) a["c" + std::to_string(c)] = rng.uniform() * 2.0;
    ok = ok && steer_eval::winrate(a, a) == 50.0;

    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        std::map<std::string, double> x, y;
        const int n = 2 + static_cast<int>(rng.below(12));
        for (int c = 0; c < n; ++c) {
            const std::string id = "c" + std::to_string(c);
            x[id] = std::round(rng.uniform() * 8.0) / 4.0;
            y[id] = std::round(rng.uniform() * 8.0) / 4.0;
        }
        worst = std::max(worst,
                         std::fabs(steer_eval::winrate(x, y) + steer_eval::winrate(y, x) - 100.0));
    }
    ok = ok && worst == 0.0;
    report(9, "winrate algebra", ok,
           fmt("winrate(A,A) = 50 exactly; max |w(A,B)+w(B,A)-100| = %.1e over 100 tables",
               worst),
           seconds_since(start), 5.0);
}

// ---------------------------------------------------------------------------
// 10. affine transport recovery
// ---------------------------------------------------------------------------

void criterion_10() {
    const auto start = Clock::now();
    numkit::Rng rng(606);
    const int d = 16;
    // fixed rotation: product of Givens rotations, plus an offset
    numkit::Matrix rot(d, d);
    for (int i = 0; i < d; ++i) rot(i, i) = 1.0;
    for (int g = 0; g < 24; ++g) {
        const int i = static_cast<int>(rng.below(d));
        int j = static_cast<int>(rng.below(d));
        if (i == j) j = (j + 1) % d;
        const double ang = rng.normal();
        const double c = std::cos(ang), s = std::sin(ang);
        for (int r = 0; r < d; ++r) {
            const double vi = rot(r, i), vj = rot(r, j);
            rot(r, i) = c * vi - s * vj;
            rot(r, j) = s * vi + c * vj;
        }
    }
    std::vector<double> offset(d);
    for (double& x : offset) x = 0.3 * rng.normal();

    std::vector<learners::ConceptSubspace> src(64), dst(64);
    for (int p = 0; p < 64; ++p) {
        src[p].concept_id = dst[p].concept_id = "p" + std::to_string(p);
        src[p].w.resize(d);
        for (double& x : src[p].w) x = rng.normal();
        numkit::normalize(src[p].w);
        dst[p].w.assign(d, 0.0);
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j < d; ++j) dst[p].w[i] += rot(i, j) * src[p].w[j];
            dst[p].w[i] += offset[i];
        }
    }
    const auto map = learners::fit_affine_transport(src, dst, 3000, 1e-7);
    double cos_sum = 0.0;
    for (int p = 0; p < 64; ++p) {
        const auto y = map.apply(src[p].w);
        cos_sum += numkit::dot(y, dst[p].w) / (numkit::norm(y) * numkit::norm(dst[p].w));
    }
    const double mean_cos = cos_sum / 64.0;
    report(10, "affine transport", mean_cos >= 0.99,
           fmt("mean cosine similarity of mapped vs true = %.5f over 64 rotated+offset pairs "
               "(needs >= 0.99)",
               mean_cos),
           seconds_since(start), 60.0);
}

// ---------------------------------------------------------------------------
// 11. determinism of the CLI `run`
// ---------------------------------------------------------------------------

void criterion_11() {
    const auto start = Clock::now();
#if !defined(STEERLAB_CLI_PATH) || !defined(STEERLAB_SMOKE_CONFIG)
    report(11, "determinism", false, "CLI path not wired into the build", 0.0, 360.0);
    return;
#else
    const fs::path out1 = fs::temp_directory_path() / "steerlab_acc_det1";
    const fs::path out2 = fs::temp_directory_path() / "steerlab_acc_det2";
    fs::remove_all(out1);
    fs::remove_all(out2);
    const std::string base = std::string(STEERLAB_CLI_PATH) + " run --config " +
                             STEERLAB_SMOKE_CONFIG + " --seed 7 --out ";
    const int rc1 = std::system((base + out1.string() + " > /dev/null 2>&1").c_str());
    const int rc2 = std::system((base + out2.string() + " > /dev/null 2>&1").c_str());

    bool identical = rc1 == 0 && rc2 == 0;
    std::string mismatch;
    if (identical) {
        std::vector<std::string> rels;
        for (const auto& e : fs::recursive_directory_iterator(out1))
            if (e.is_regular_file())
                rels.push_back(fs::relative(e.path(), out1).generic_string());
        std::sort(rels.begin(), rels.end());
        size_t count = 0;
        for (const auto& rel : rels) {
            if (!fs::exists(out2 / rel) ||
                io::read_file((out1 / rel).string()) != io::read_file((out2 / rel).string())) {
                identical = false;
                mismatch = rel;
                break;
            }
            ++count;
        }
        size_t count2 = 0;
        for (const auto& e : fs::recursive_directory_iterator(out2))
            if (e.is_regular_file()) ++count2;
        identical = identical && count == count2;
        if (identical) mismatch = fmt("%zu artifacts compared", count);
    } else {
        mismatch = fmt("cli exit codes %d / %d", rc1, rc2);
    }
    fs::remove_all(out1);
    fs::remove_all(out2);
    report(11, "determinism", identical,
           identical ? "two runs bit-identical (" + mismatch + ")"
                     : "runs differ: " + mismatch,
           seconds_since(start), 360.0);
#endif
}

// ---------------------------------------------------------------------------
// 12. no holdout leakage into factor selection
// ---------------------------------------------------------------------------

void criterion_12() {
    const auto start = Clock::now();
    numkit::Rng rng(99);
    const std::vector<double> grid = steer_eval::default_factor_grid();
    bool ok = true;
    for (int trial = 0; trial < 200 && ok; ++trial) {
        std::vector<steer_eval::GenerationRecord> records;
        for (double f : grid) {
            for (int i = 0; i < 6; ++i) {
                steer_eval::GenerationRecord r;
                r.factor = f;
                r.holdout = i >= 3;
                r.judged = true;
                r.scores.overall = std::round(rng.uniform() * 8.0) / 4.0;
                records.push_back(r);
            }
        }
        const double base = steer_eval::select_and_score(records, grid).factor;
        for (int perturb = 0; perturb < 5; ++perturb) {
            for (auto& r : records)
                if (r.holdout) r.scores.overall = std::round(rng.uniform() * 8.0) / 4.0;
            if (steer_eval::select_and_score(records, grid).factor != base) ok = false;
        }
    }
    report(12, "no holdout leakage", ok,
           ok ? "selected factor invariant under 1000 holdout perturbations"
              : "holdout perturbation changed the selected factor",
           seconds_since(start), 30.0);
}

}  // namespace

int main() {
    std::printf("steerlab acceptance suite\n");
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();

    const fs::path desk_out = fs::temp_directory_path() / "steerlab_acc_desk";
    fs::remove_all(desk_out);
    try {
        criteria_6_7_8(desk_out);
    } catch (const std::exception& e) {
        std::printf("[FAIL] criteria 6-8 aborted: %s\n", e.what());
        failures += 3;
    }
    fs::remove_all(desk_out);

    criterion_9();
    criterion_10();
    criterion_11();
    criterion_12();

    std::printf("%s: %d criterion failure(s)\n", failures == 0 ? "SUCCESS" : "FAILURE", failures);
    return failures == 0 ? 0 : 1;
}
