#include "steerlab/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "steerlab/io.hpp"

namespace steerlab::learners {

using corpus::LabeledSequence;
using numkit::AdamState;
using numkit::DiffGraph;
using numkit::Matrix;
using numkit::Rng;

namespace {

constexpr double kDegenerateTol = 1e-8;

std::vector<double> unit_random(int d, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(d);
    for (double& x : w) x = rng.normal();
    numkit::normalize(w, 0.0);
    return w;
}

void require_both_classes(const ActivationDataset& ds, const char* who) {
    bool pos = false, neg = false;
    for (int y : ds.row_labels) (y ? pos : neg) = true;
    if (!pos || !neg) throw MissingClass(std::string(who) + ": need both classes");
}

void renormalize(std::vector<double>& w) {
    double n = numkit::norm(w);
    if (!(n > 0.0)) throw DegenerateDirection("renormalize: zero vector");
    for (double& x : w) x /= n;
}

void validate_cfg(const TrainConfig& cfg) {
    if (cfg.epochs < 0 || cfg.batch < 1 || !(cfg.lr > 0.0) || cfg.l1 < 0.0 || cfg.k < 1)
        throw MissingClass("invalid train config");
}

}  // namespace

std::string to_string(DetectionActivation a) {
    switch (a) {
        case DetectionActivation::identity: return "identity";
        case DetectionActivation::relu: return "relu";
        case DetectionActivation::jumprelu: return "jumprelu";
    }
    return "identity";
}

DetectionActivation activation_from_string(const std::string& s) {
    if (s == "identity") return DetectionActivation::identity;
    if (s == "relu") return DetectionActivation::relu;
    if (s == "jumprelu") return DetectionActivation::jumprelu;
    throw corpus::FormatError("unknown activation: " + s);
}

// ---------------------------------------------------------------------------
// closed-form fits
// ---------------------------------------------------------------------------

ConceptSubspace fit_diffmean(const ActivationDataset& ds) {
    require_both_classes(ds, "fit_diffmean");
    const int d = ds.rows.cols;
    std::vector<double> mean_pos(d, 0.0), mean_neg(d, 0.0);
    long n_pos = 0, n_neg = 0;
    for (long r = 0; r < ds.row_count_total(); ++r) {
        const double* row = ds.rows.row_ptr(static_cast<int>(r));
        if (ds.row_labels[r] == 1) {
            ++n_pos;
            for (int j = 0; j < d; ++j) mean_pos[j] += row[j];
        } else {
            ++n_neg;
            for (int j = 0; j < d; ++j) mean_neg[j] += row[j];
        }
    }
    ConceptSubspace sub;
    sub.concept_id = ds.concept_id;
    sub.method = "diffmean";
    sub.w.resize(d);
    for (int j = 0; j < d; ++j) sub.w[j] = mean_pos[j] / n_pos - mean_neg[j] / n_neg;
    if (numkit::norm(sub.w) < kDegenerateTol)
        throw DegenerateDirection("fit_diffmean: class means coincide");
    renormalize(sub.w);
    return sub;
}

ConceptSubspace fit_pca_subspace(const ActivationDataset& ds) {
    const int d = ds.rows.cols;
    long n_pos = 0;
    for (int y : ds.row_labels) n_pos += y;
    if (n_pos < 2) throw numkit::DegenerateInput("fit_pca_subspace: need >= 2 positive rows");

    Matrix pos(static_cast<int>(n_pos), d);
    long r_out = 0;
    std::vector<double> mean(d, 0.0);
    for (long r = 0; r < ds.row_count_total(); ++r) {
        if (ds.row_labels[r] != 1) continue;
        const double* row = ds.rows.row_ptr(static_cast<int>(r));
        for (int j = 0; j < d; ++j) {
            pos(static_cast<int>(r_out), j) = row[j];
            mean[j] += row[j];
        }
        ++r_out;
    }
    for (int j = 0; j < d; ++j) mean[j] /= static_cast<double>(n_pos);
    for (int i = 0; i < pos.rows; ++i)
        for (int j = 0; j < d; ++j) pos(i, j) -= mean[j];

    ConceptSubspace sub;
    sub.concept_id = ds.concept_id;
    sub.method = "pca";
    sub.w = numkit::top_principal_component(pos);
    return sub;
}

ConceptSubspace fit_lat(const ActivationDataset& ds, uint64_t seed) {
    const long n = ds.row_count_total();
    if (n < 4) throw numkit::DegenerateInput("fit_lat: need >= 4 rows");
    const int d = ds.rows.cols;

    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);

    std::vector<double> deltas;
    long pairs = 0;
    for (long i = 0; i + 1 < n; i += 2) {
        const double* a = ds.rows.row_ptr(static_cast<int>(order[i]));
        const double* b = ds.rows.row_ptr(static_cast<int>(order[i + 1]));
        std::vector<double> diff(d);
        for (int j = 0; j < d; ++j) diff[j] = a[j] - b[j];
        const double nn = numkit::norm(diff);
        if (nn < 1e-12) continue;  // identical pair, normalized difference undefined
        for (int j = 0; j < d; ++j) deltas.push_back(diff[j] / nn);
        ++pairs;
    }
    if (pairs == 0) throw numkit::DegenerateInput("fit_lat: all pairwise differences are zero");

    Matrix delta(static_cast<int>(pairs), d, std::move(deltas));
    ConceptSubspace sub;
    sub.concept_id = ds.concept_id;
    sub.method = "lat";
    sub.w = numkit::top_principal_component(delta);  // uncentered PCA of the differences
    return sub;
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

int probe_loss_node(DiffGraph& g, const ActivationDataset& ds, std::span<const double> w0,
                    int* w_leaf_out) {
    const int w_leaf = g.leaf(Matrix::row_vector(w0), true, "w_probe");
    if (w_leaf_out) *w_leaf_out = w_leaf;
    const int h = g.leaf(ds.rows, false, "rows");
    const int scores = g.matmul_nt(h, w_leaf);  // [n,1]
    return g.bce_logits_mean(scores, ds.row_labels);
}

ConceptSubspace fit_probe(const ActivationDataset& ds, const TrainConfig& cfg) {
    validate_cfg(cfg);
    require_both_classes(ds, "fit_probe");
    const int d = ds.rows.cols;
    const long n = ds.row_count_total();

    ConceptSubspace sub;
    sub.concept_id = ds.concept_id;
    sub.method = "probe";
    sub.w = unit_random(d, cfg.seed);
    if (cfg.epochs == 0) return sub;

    const long steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    auto adam = AdamState::make(static_cast<size_t>(d),
                                {cfg.lr, cfg.epochs * steps_per_epoch}, cfg.weight_decay);
    Rng shuffle_rng = Rng(cfg.seed).fork("probe-batches");
    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (long start = 0; start < n; start += cfg.batch) {
            const long end = std::min(n, start + cfg.batch);
            ActivationDataset batch;
            batch.rows = Matrix(static_cast<int>(end - start), d);
            for (long i = start; i < end; ++i) {
                const double* src = ds.rows.row_ptr(static_cast<int>(order[i]));
                std::copy(src, src + d, batch.rows.row_ptr(static_cast<int>(i - start)));
                batch.row_labels.push_back(ds.row_labels[order[i]]);
            }
            DiffGraph g;
            int w_leaf = -1;
            const int loss = probe_loss_node(g, batch, sub.w, &w_leaf);
            g.backward(loss);
            numkit::adam_step(adam, sub.w, g.grad(w_leaf).data, &sub.w);
            renormalize(sub.w);
        }
    }
    return sub;
}

// ---------------------------------------------------------------------------
// LM-loss methods
// ---------------------------------------------------------------------------

namespace {

// Hook-layer states for one sequence, plus the CE targets for its response.
struct SeqStates {
    Matrix states;  // [n, d] residual stream at the hook layer (w-independent)
    std::vector<int> targets;
    bool positive = false;
};

SeqStates prepare_sequence(const toylm::ToyLM& model, const LabeledSequence& seq, int layer) {
    SeqStates out;
    const auto toks = seq.full();
    out.states = toylm::forward_hidden(model, toks).hidden[layer];
    const int n = static_cast<int>(toks.size());
    const int p = static_cast<int>(seq.instruction.size());
    out.targets.assign(n, -1);
    for (int i = p - 1; i < n - 1; ++i) out.targets[i] = toks[i + 1];
    out.positive = seq.label == corpus::Label::positive;
    return out;
}

int mean_of_nodes(DiffGraph& g, const std::vector<int>& nodes) {
    int acc = nodes[0];
    for (size_t i = 1; i < nodes.size(); ++i) acc = g.add(acc, nodes[i]);
    return g.scale(acc, 1.0 / static_cast<double>(nodes.size()));
}

}  // namespace

int ssv_loss_node(DiffGraph& g, const toylm::ToyLM& model,
                  const std::vector<LabeledSequence>& batch, int layer,
                  std::span<const double> w0, int* w_leaf_out) {
    auto gm = toylm::GraphModel::attach(g, model);
    const int w_leaf = g.leaf(Matrix::row_vector(w0), true, "w_ssv");
    if (w_leaf_out) *w_leaf_out = w_leaf;
    std::vector<int> terms;
    for (const auto& seq : batch) {
        auto prep = prepare_sequence(model, seq, layer);
        const int states = g.leaf(std::move(prep.states), false);
        const int hooked = g.add_rowvec(states, w_leaf);  // h_i + w at every position
        const int logits = gm.logits_from_states(g, hooked, layer);
        terms.push_back(g.ce_rows_mean(logits, prep.targets));
    }
    return mean_of_nodes(g, terms);
}

ConceptSubspace fit_ssv(const toylm::ToyLM& model, const std::vector<LabeledSequence>& train_seqs,
                        int layer, const TrainConfig& cfg) {
    validate_cfg(cfg);
    std::vector<LabeledSequence> positives;
    for (const auto& s : train_seqs)
        if (s.label == corpus::Label::positive) positives.push_back(s);
    if (positives.empty()) throw EmptyPositives("fit_ssv: no positive sequences");

    ConceptSubspace sub;
    sub.concept_id = positives.front().concept_id;
    sub.method = "ssv";
    sub.unit_norm = false;
    sub.activation = DetectionActivation::relu;
    sub.w.assign(model.cfg.dim, 0.0);
    if (cfg.epochs == 0) return sub;

    const long n = static_cast<long>(positives.size());
    const long steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    auto adam = AdamState::make(sub.w.size(), {cfg.lr, cfg.epochs * steps_per_epoch},
                                cfg.weight_decay);
    Rng shuffle_rng = Rng(cfg.seed).fork("ssv-batches");
    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (long start = 0; start < n; start += cfg.batch) {
            const long end = std::min(n, start + cfg.batch);
            std::vector<LabeledSequence> batch;
            for (long i = start; i < end; ++i) batch.push_back(positives[order[i]]);
            DiffGraph g;
            int w_leaf = -1;
            const int loss = ssv_loss_node(g, model, batch, layer, sub.w, &w_leaf);
            g.backward(loss);
            numkit::adam_step(adam, sub.w, g.grad(w_leaf).data, nullptr);
        }
    }
    return sub;
}

int reft_r1_loss_node(DiffGraph& g, const toylm::ToyLM& model,
                      const std::vector<LabeledSequence>& batch, int layer,
                      std::span<const double> w0, double lambda, int k, int* w_leaf_out) {
    auto gm = toylm::GraphModel::attach(g, model);
    const int w_leaf = g.leaf(Matrix::row_vector(w0), true, "w_reft");
    if (w_leaf_out) *w_leaf_out = w_leaf;
    std::vector<int> terms;
    for (const auto& seq : batch) {
        auto prep = prepare_sequence(model, seq, layer);
        const int states = g.leaf(std::move(prep.states), false);
        const int latents = g.relu(g.matmul_nt(states, w_leaf));  // [n,1]
        // L1 on the latents outside the top-k set, every training sequence
        int term = g.scale(g.nontopk_sum(latents, k), lambda);
        if (prep.positive) {
            const int gate = g.topk_mean(latents, k);
            const int hooked = g.add_scaled_rowvec(states, gate, w_leaf);
            const int logits = gm.logits_from_states(g, hooked, layer);
            term = g.add(term, g.ce_rows_mean(logits, prep.targets));
        }
        terms.push_back(term);
    }
    return mean_of_nodes(g, terms);
}

ConceptSubspace fit_reft_r1(const toylm::ToyLM& model,
                            const std::vector<LabeledSequence>& train_seqs, int layer,
                            const TrainConfig& cfg) {
    validate_cfg(cfg);
    bool has_pos = false, has_neg = false;
    for (const auto& s : train_seqs) {
        if (s.label == corpus::Label::positive) has_pos = true;
        else has_neg = true;
    }
    if (!has_pos || !has_neg) throw MissingClass("fit_reft_r1: need both classes");

    ConceptSubspace sub;
    sub.concept_id = train_seqs.front().concept_id;
    sub.method = "reft_r1";
    sub.activation = DetectionActivation::relu;
    sub.w = unit_random(model.cfg.dim, cfg.seed);
    if (cfg.epochs == 0) return sub;

    const long n = static_cast<long>(train_seqs.size());
    const long steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    auto adam = AdamState::make(sub.w.size(), {cfg.lr, cfg.epochs * steps_per_epoch},
                                cfg.weight_decay);
    Rng shuffle_rng = Rng(cfg.seed).fork("reft-batches");
    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (long start = 0; start < n; start += cfg.batch) {
            const long end = std::min(n, start + cfg.batch);
            std::vector<LabeledSequence> batch;
            for (long i = start; i < end; ++i) batch.push_back(train_seqs[order[i]]);
            DiffGraph g;
            int w_leaf = -1;
            const int loss = reft_r1_loss_node(g, model, batch, layer, sub.w, cfg.l1, cfg.k,
                                               &w_leaf);
            g.backward(loss);
            numkit::adam_step(adam, sub.w, g.grad(w_leaf).data, &sub.w);
            renormalize(sub.w);
        }
    }
    return sub;
}

// ---------------------------------------------------------------------------
// bag of words
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> whitespace_tokens(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string word;
    while (in >> word) words.push_back(word);
    return words;
}

std::vector<double> bow_features(const BowClassifier& cls, const std::string& text) {
    std::vector<double> x(cls.vocabulary.size(), 0.0);
    for (const auto& word : whitespace_tokens(text)) {
        auto it = cls.vocabulary.find(word);
        if (it != cls.vocabulary.end()) x[it->second] += 1.0;
    }
    return x;
}

}  // namespace

double BowClassifier::score_text(const std::string& text) const {
    const auto x = bow_features(*this, text);
    double s = bias;
    for (size_t j = 0; j < x.size(); ++j) s += weights[j] * x[j];
    return 1.0 / (1.0 + std::exp(-s));
}

double BowClassifier::score_tokens(const corpus::VocabLayout& layout,
                                   std::span<const int> toks) const {
    return score_text(layout.detokenize(toks));
}

BowClassifier fit_bow(const corpus::VocabLayout& layout,
                      const std::vector<LabeledSequence>& train_seqs, double c,
                      uint64_t /*seed*/) {
    bool has_pos = false, has_neg = false;
    for (const auto& s : train_seqs)
        (s.label == corpus::Label::positive ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) throw MissingClass("fit_bow: need both classes");

    BowClassifier cls;
    cls.c = c;
    // vocabulary from the training corpus only; map ordering fixes feature ids
    for (const auto& s : train_seqs)
        for (const auto& word : whitespace_tokens(layout.detokenize(s.full())))
            cls.vocabulary.emplace(word, 0);
    int next = 0;
    for (auto& [word, idx] : cls.vocabulary) idx = next++;

    const long n = static_cast<long>(train_seqs.size());
    const int v = static_cast<int>(cls.vocabulary.size());
    Matrix x(static_cast<int>(n), v);
    std::vector<double> y(n);
    for (long i = 0; i < n; ++i) {
        const auto feats = bow_features(cls, layout.detokenize(train_seqs[i].full()));
        std::copy(feats.begin(), feats.end(), x.row_ptr(static_cast<int>(i)));
        y[i] = corpus::label_binary(train_seqs[i].label);
    }

    // objective: c * sum_i BCE_i + 0.5 ||w||^2 (bias unregularized),
    // full-batch gradient descent with a Lipschitz step bound
    auto top = numkit::top_principal_component(x);
    double lambda_max = 0.0;
    for (long i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < v; ++j) s += x(static_cast<int>(i), j) * top[j];
        lambda_max += s * s;
    }
    const double lips = c * 0.25 * (lambda_max + static_cast<double>(n)) + 1.0;
    const double step = 1.0 / lips;

    cls.weights.assign(v, 0.0);
    cls.bias = 0.0;
    std::vector<double> gw(v);
    for (int iter = 0; iter < 200000; ++iter) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0;
        for (long i = 0; i < n; ++i) {
            const double* xi = x.row_ptr(static_cast<int>(i));
            double s = cls.bias;
            for (int j = 0; j < v; ++j) s += cls.weights[j] * xi[j];
            const double err = 1.0 / (1.0 + std::exp(-s)) - y[i];
            for (int j = 0; j < v; ++j) gw[j] += c * err * xi[j];
            gb += c * err;
        }
        double gmax = std::fabs(gb);
        for (int j = 0; j < v; ++j) {
            gw[j] += cls.weights[j];  // L2 term
            gmax = std::max(gmax, std::fabs(gw[j]));
        }
        if (gmax < 1e-8) break;
        for (int j = 0; j < v; ++j) cls.weights[j] -= step * gw[j];
        cls.bias -= step * gb;
    }
    return cls;
}

// ---------------------------------------------------------------------------
// affine transport
// ---------------------------------------------------------------------------

std::vector<double> AffineMap::apply(std::span<const double> v) const {
    std::vector<double> out(b);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) out[i] += a(i, j) * v[j];
    return out;
}

AffineMap fit_affine_transport(const std::vector<ConceptSubspace>& sources,
                               const std::vector<ConceptSubspace>& targets, int max_steps,
                               double grad_tol) {
    if (sources.size() != targets.size() || sources.empty())
        throw PairCountMismatch("fit_affine_transport: source/target counts differ");
    const int ds = sources.front().dim();
    const int dt = targets.front().dim();

    // pair by concept_id
    std::vector<std::pair<const ConceptSubspace*, const ConceptSubspace*>> pairs;
    for (const auto& s : sources) {
        const ConceptSubspace* match = nullptr;
        for (const auto& t : targets)
            if (t.concept_id == s.concept_id) {
                match = &t;
                break;
            }
        if (!match) throw PairCountMismatch("fit_affine_transport: unmatched concept " +
                                            s.concept_id);
        pairs.emplace_back(&s, match);
    }

    // parameters: a_t stored transposed ([ds, dt]) so y = v * a_t + b; init identity
    Matrix a_t(ds, dt);
    for (int i = 0; i < std::min(ds, dt); ++i) a_t(i, i) = 1.0;
    std::vector<double> b(dt, 0.0);

    auto adam_a = AdamState::make(a_t.size(), {0.05, max_steps});
    auto adam_b = AdamState::make(b.size(), {0.05, max_steps});

    for (int step = 0; step < max_steps; ++step) {
        DiffGraph g;
        const int a_leaf = g.leaf(a_t, true, "A");
        const int b_leaf = g.leaf(Matrix::row_vector(b), true, "b");
        std::vector<int> terms;
        for (const auto& [src, tgt] : pairs) {
            const int v = g.leaf(Matrix::row_vector(src->w), false);
            const int u = g.leaf(Matrix::row_vector(tgt->w), false);
            const int y = g.add(g.matmul(v, a_leaf), b_leaf);
            const int diff = g.sub(y, u);
            const int mse = g.scale(g.sum_all(g.mul(diff, diff)), 0.5);
            const int dot_yu = g.sum_all(g.mul(y, u));
            const int ny = g.sqrt_ew(g.affine(g.sum_all(g.mul(y, y)), 1.0, 1e-30));
            const double nu = numkit::norm(tgt->w);
            const int cos = g.div_ew(g.scale(dot_yu, 1.0 / nu), ny);
            const int cos_dist = g.scale(g.affine(cos, -1.0, 1.0), 0.5);  // 0.5 * (1 - cos)
            terms.push_back(g.add(mse, cos_dist));
        }
        const int loss = mean_of_nodes(g, terms);
        g.backward(loss);

        double gmax = 0.0;
        for (double x : g.grad(a_leaf).data) gmax = std::max(gmax, std::fabs(x));
        for (double x : g.grad(b_leaf).data) gmax = std::max(gmax, std::fabs(x));
        if (gmax < grad_tol) break;

        numkit::adam_step(adam_a, a_t.data, g.grad(a_leaf).data, nullptr);
        numkit::adam_step(adam_b, b, g.grad(b_leaf).data, nullptr);
    }

    AffineMap map;
    map.a = Matrix(dt, ds);
    for (int i = 0; i < dt; ++i)
        for (int j = 0; j < ds; ++j) map.a(i, j) = a_t(j, i);
    map.b = std::move(b);
    return map;
}

// ---------------------------------------------------------------------------
// dictionary persistence
// ---------------------------------------------------------------------------

void save_dictionary(const std::vector<ConceptSubspace>& subs, const std::string& header_path,
                     const std::string& blob_path) {
    if (subs.empty()) throw corpus::FormatError("save_dictionary: empty dictionary");
    const int d = subs.front().dim();
    nlohmann::json concepts = nlohmann::json::array();
    for (const auto& s : subs) {
        if (s.dim() != d) throw corpus::FormatError("save_dictionary: mixed dimensions");
        concepts.push_back({
            {"concept_id", s.concept_id},
            {"method", s.method},
            {"activation", to_string(s.activation)},
            {"unit_norm", s.unit_norm},
            {"jump_theta", s.jump_theta},
            {"bias", s.bias},
            {"max_activation", s.max_activation},
        });
    }
    nlohmann::json header = {
        {"format", "subspace-dictionary-v1"},
        {"d", d},
        {"count", subs.size()},
        {"method", subs.front().method},
        {"activation", to_string(subs.front().activation)},
        {"concepts", concepts},
    };
    io::write_file(header_path, header.dump(2) + "\n");

    std::vector<unsigned char> blob;
    blob.reserve(subs.size() * d * 4);
    for (const auto& s : subs)
        for (double x : s.w) io::append_f32_le(blob, static_cast<float>(x));
    io::write_file(blob_path, blob);
}

std::vector<ConceptSubspace> load_dictionary(const std::string& header_path,
                                             const std::string& blob_path) {
    const auto header = nlohmann::json::parse(io::read_text_file(header_path));
    const int d = header.at("d").get<int>();
    const size_t count = header.at("count").get<size_t>();
    const auto blob = io::read_file(blob_path);
    if (blob.size() != count * d * 4)
        throw corpus::FormatError("dictionary blob: expected " + std::to_string(count * d * 4) +
                                  " bytes, got " + std::to_string(blob.size()));
    std::vector<ConceptSubspace> subs;
    size_t off = 0;
    for (const auto& rec : header.at("concepts")) {
        ConceptSubspace s;
        s.concept_id = rec.at("concept_id").get<std::string>();
        s.method = rec.at("method").get<std::string>();
        s.activation = activation_from_string(rec.at("activation").get<std::string>());
        s.unit_norm = rec.at("unit_norm").get<bool>();
        s.jump_theta = rec.at("jump_theta").get<double>();
        s.bias = rec.at("bias").get<double>();
        s.max_activation = rec.at("max_activation").get<double>();
        s.w.resize(d);
        for (int j = 0; j < d; ++j, off += 4)
            s.w[j] = static_cast<double>(io::read_f32_le(&blob[off]));
        subs.push_back(std::move(s));
    }
    if (subs.size() != count) throw corpus::FormatError("dictionary header count mismatch");
    return subs;
}

}  // namespace steerlab::learners
