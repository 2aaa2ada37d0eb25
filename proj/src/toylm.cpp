#include "steerlab/toylm.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "steerlab/io.hpp"

namespace steerlab::toylm {

using numkit::DiffGraph;
using numkit::Rng;

namespace {

constexpr double kRmsEps = 1e-6;

void validate_config(const ToyLMConfig& cfg) {
    if (cfg.vocab_size < tokens::reserved_count)
        throw InvalidConfig("vocab_size must be >= 4 (reserved ids)");
    if (cfg.dim <= 0 || cfg.heads <= 0 || cfg.dim % cfg.heads != 0)
        throw InvalidConfig("dim must be positive and divisible by heads");
    if (cfg.layers < 1) throw InvalidConfig("layers must be >= 1");
    if (cfg.max_seq < 2) throw InvalidConfig("max_seq must be >= 2");
}

Matrix init_matrix(Rng& rng, int rows, int cols, double stddev) {
    Matrix m(rows, cols);
    for (double& x : m.data) x = rng.normal(0.0, stddev);
    return m;
}

void check_tokens(const ToyLM& m, std::span<const int> toks) {
    if (static_cast<int>(toks.size()) > m.cfg.max_seq)
        throw SequenceTooLong("sequence length " + std::to_string(toks.size()) + " > max_seq " +
                              std::to_string(m.cfg.max_seq));
    for (int t : toks)
        if (t < 0 || t >= m.cfg.vocab_size)
            throw TokenOutOfRange("token id " + std::to_string(t) + " out of range");
}

}  // namespace

ToyLM build_toy_lm(const ToyLMConfig& cfg) {
    validate_config(cfg);
    ToyLM m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    const int d = cfg.dim;
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
    // Residual writes (wo, w2) start small so the stream stays dominated by
    // token content, and the final gain sits below 1 so sampling from the
    // untrained tied-embedding model stays diverse instead of looping on the
    // last token.
    const double write_scale = 0.3;
    m.emb = init_matrix(rng, cfg.vocab_size, d, 0.35);
    m.pos = init_matrix(rng, cfg.max_seq, d, 0.35);
    for (int l = 0; l < cfg.layers; ++l) {
        ToyLM::Block b;
        b.ln1.assign(d, 1.0);
        b.ln2.assign(d, 1.0);
        b.wq = init_matrix(rng, d, d, proj_std);
        b.wk = init_matrix(rng, d, d, proj_std);
        b.wv = init_matrix(rng, d, d, proj_std);
        b.wo = init_matrix(rng, d, d, write_scale * proj_std);
        b.w1 = init_matrix(rng, d, 4 * d, proj_std);
        b.w2 = init_matrix(rng, 4 * d, d, write_scale * 0.5 / std::sqrt(4.0 * d));
        m.blocks.push_back(std::move(b));
    }
    m.lnf.assign(d, 0.35);
    return m;
}

uint64_t weight_checksum(const ToyLM& m) {
    uint64_t h = numkit::fnv1a(m.emb.data.data(), m.emb.size() * 8);
    h = numkit::fnv1a(m.pos.data.data(), m.pos.size() * 8, h);
    for (const auto& b : m.blocks) {
        h = numkit::fnv1a(b.ln1.data(), b.ln1.size() * 8, h);
        h = numkit::fnv1a(b.wq.data.data(), b.wq.size() * 8, h);
        h = numkit::fnv1a(b.wk.data.data(), b.wk.size() * 8, h);
        h = numkit::fnv1a(b.wv.data.data(), b.wv.size() * 8, h);
        h = numkit::fnv1a(b.wo.data.data(), b.wo.size() * 8, h);
        h = numkit::fnv1a(b.ln2.data(), b.ln2.size() * 8, h);
        h = numkit::fnv1a(b.w1.data.data(), b.w1.size() * 8, h);
        h = numkit::fnv1a(b.w2.data.data(), b.w2.size() * 8, h);
    }
    h = numkit::fnv1a(m.lnf.data(), m.lnf.size() * 8, h);
    return h;
}

// ---------------------------------------------------------------------------
// plain forward
// ---------------------------------------------------------------------------

HiddenTrace forward_hidden(const ToyLM& m, std::span<const int> toks, const HookSpec* hook) {
    check_tokens(m, toks);
    if (toks.empty()) throw SequenceTooLong("empty token sequence");
    if (hook && (hook->layer < 1 || hook->layer > m.cfg.layers))
        throw InvalidConfig("hook layer out of range");

    const int n = static_cast<int>(toks.size());
    const int d = m.cfg.dim;
    HiddenTrace trace;
    trace.hidden.reserve(m.cfg.layers + 1);

    Matrix x(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) x(i, j) = m.emb(toks[i], j) + m.pos(i, j);
    trace.hidden.push_back(x);

    for (int l = 0; l < m.cfg.layers; ++l) {
        const auto& b = m.blocks[l];
        Matrix xn = numkit::rmsnorm_rows_forward(x, b.ln1, kRmsEps);
        Matrix q = numkit::matmul(xn, b.wq);
        Matrix k = numkit::matmul(xn, b.wk);
        Matrix v = numkit::matmul(xn, b.wv);
        Matrix att = numkit::causal_attention_forward(q, k, v, m.cfg.heads);
        Matrix ao = numkit::matmul(att, b.wo);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += ao.data[i];

        Matrix xn2 = numkit::rmsnorm_rows_forward(x, b.ln2, kRmsEps);
        Matrix h1 = numkit::matmul(xn2, b.w1);
        for (double& e : h1.data) e = numkit::gelu_tanh(e);
        Matrix mo = numkit::matmul(h1, b.w2);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += mo.data[i];

        if (hook && hook->layer == l + 1 && hook->fn)
            for (int i = 0; i < n; ++i) hook->fn(std::span<double>(x.row_ptr(i), d));
        trace.hidden.push_back(x);
    }

    Matrix xf = numkit::rmsnorm_rows_forward(x, m.lnf, kRmsEps);
    trace.logits = numkit::matmul_nt(xf, m.emb);
    return trace;
}

// ---------------------------------------------------------------------------
// graph forward
// ---------------------------------------------------------------------------

GraphModel GraphModel::attach(DiffGraph& g, const ToyLM& m, bool weights_trainable) {
    GraphModel gm;
    gm.model = &m;
    gm.emb = g.leaf(m.emb, weights_trainable, "emb");
    gm.pos = g.leaf(m.pos, weights_trainable, "pos");
    for (int l = 0; l < m.cfg.layers; ++l) {
        const auto& b = m.blocks[l];
        Layer lay;
        lay.ln1 = g.leaf(Matrix::row_vector(b.ln1), weights_trainable, "ln1");
        lay.wq = g.leaf(b.wq, weights_trainable, "wq");
        lay.wk = g.leaf(b.wk, weights_trainable, "wk");
        lay.wv = g.leaf(b.wv, weights_trainable, "wv");
        lay.wo = g.leaf(b.wo, weights_trainable, "wo");
        lay.ln2 = g.leaf(Matrix::row_vector(b.ln2), weights_trainable, "ln2");
        lay.w1 = g.leaf(b.w1, weights_trainable, "w1");
        lay.w2 = g.leaf(b.w2, weights_trainable, "w2");
        gm.layers.push_back(lay);
    }
    gm.lnf = g.leaf(Matrix::row_vector(m.lnf), weights_trainable, "lnf");
    return gm;
}

namespace {

int block_forward(DiffGraph& g, const GraphModel::Layer& lay, int x, int heads) {
    int xn = g.rmsnorm_rows(x, lay.ln1, kRmsEps);
    int att = g.causal_attention(g.matmul(xn, lay.wq), g.matmul(xn, lay.wk),
                                 g.matmul(xn, lay.wv), heads);
    x = g.add(x, g.matmul(att, lay.wo));
    int xn2 = g.rmsnorm_rows(x, lay.ln2, kRmsEps);
    int h1 = g.gelu(g.matmul(xn2, lay.w1));
    return g.add(x, g.matmul(h1, lay.w2));
}

}  // namespace

int GraphModel::logits(DiffGraph& g, std::span<const int> toks, const GraphHook* hook) const {
    check_tokens(*model, toks);
    const int n = static_cast<int>(toks.size());
    std::vector<int> tok_idx(toks.begin(), toks.end());
    std::vector<int> pos_idx(n);
    for (int i = 0; i < n; ++i) pos_idx[i] = i;
    int x = g.add(g.gather_rows(emb, tok_idx), g.gather_rows(pos, pos_idx));
    for (int l = 0; l < static_cast<int>(layers.size()); ++l) {
        x = block_forward(g, layers[l], x, model->cfg.heads);
        if (hook && hook->layer == l + 1 && hook->apply) x = hook->apply(g, x);
    }
    return g.matmul_nt(g.rmsnorm_rows(x, lnf, kRmsEps), emb);
}

int GraphModel::logits_from_states(DiffGraph& g, int states, int from_layer) const {
    return g.matmul_nt(g.rmsnorm_rows(final_states_from(g, states, from_layer), lnf, kRmsEps),
                       emb);
}

int GraphModel::final_states_from(DiffGraph& g, int states, int from_layer) const {
    for (int l = from_layer; l < static_cast<int>(layers.size()); ++l)
        states = block_forward(g, layers[l], states, model->cfg.heads);
    return states;
}

int lm_nll_node(DiffGraph& g, const GraphModel& gm, std::span<const int> toks, int prompt_len,
                const GraphHook* hook) {
    const int n = static_cast<int>(toks.size());
    if (prompt_len >= n) throw EmptyResponse("no response positions");
    if (prompt_len < 1) throw EmptyResponse("prompt must be non-empty");
    int lg = gm.logits(g, toks, hook);
    // row i predicts token i+1; only response targets contribute
    std::vector<int> targets(n, -1);
    for (int i = prompt_len - 1; i < n - 1; ++i) targets[i] = toks[i + 1];
    return g.ce_rows_mean(lg, targets);
}

double lm_nll(const ToyLM& m, std::span<const int> prompt, std::span<const int> response,
              const HookSpec* hook) {
    if (response.empty()) throw EmptyResponse("response is empty");
    std::vector<int> toks(prompt.begin(), prompt.end());
    toks.insert(toks.end(), response.begin(), response.end());
    HiddenTrace trace = forward_hidden(m, toks, hook);
    const int n = static_cast<int>(toks.size());
    const int p = static_cast<int>(prompt.size());
    double total = 0.0;
    int count = 0;
    for (int i = p - 1; i < n - 1; ++i) {
        const double* row = trace.logits.row_ptr(i);
        double mx = row[0];
        for (int j = 1; j < m.cfg.vocab_size; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < m.cfg.vocab_size; ++j) z += std::exp(row[j] - mx);
        total += std::log(z) + mx - row[toks[i + 1]];
        ++count;
    }
    return total / count;
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

std::vector<int> generate(const ToyLM& m, std::span<const int> prompt, const HookSpec* hook,
                          int max_new, const SampleMode& mode, const std::vector<char>* banned) {
    if (max_new < 1) throw InvalidConfig("max_new must be >= 1");
    if (prompt.empty()) throw SequenceTooLong("empty prompt");
    if (banned && static_cast<int>(banned->size()) != m.cfg.vocab_size)
        throw InvalidConfig("banned mask length != vocab");

    std::vector<int> toks(prompt.begin(), prompt.end());
    std::vector<int> out;
    Rng rng(mode.seed);
    const int v = m.cfg.vocab_size;
    std::vector<double> probs(v);

    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(toks.size()) >= m.cfg.max_seq) break;
        HiddenTrace trace = forward_hidden(m, toks, hook);
        const double* row = trace.logits.row_ptr(static_cast<int>(toks.size()) - 1);

        auto allowed = [&](int t) {
            if (t == tokens::pad) return false;
            if (banned && (*banned)[t]) return false;
            return true;
        };

        int next = -1;
        if (mode.greedy) {
            double best = -1e300;
            for (int t = 0; t < v; ++t)
                if (allowed(t) && row[t] > best) {
                    best = row[t];
                    next = t;
                }
        } else {
            double mx = -1e300;
            for (int t = 0; t < v; ++t)
                if (allowed(t)) mx = std::max(mx, row[t] / mode.temperature);
            double z = 0.0;
            for (int t = 0; t < v; ++t) {
                probs[t] = allowed(t) ? std::exp(row[t] / mode.temperature - mx) : 0.0;
                z += probs[t];
            }
            const double u = rng.uniform() * z;
            double c = 0.0;
            next = -1;
            for (int t = 0; t < v; ++t) {
                c += probs[t];
                if (u < c) {
                    next = t;
                    break;
                }
            }
            if (next < 0) {  // numeric edge: fall back to the last allowed id
                for (int t = v - 1; t >= 0; --t)
                    if (allowed(t)) {
                        next = t;
                        break;
                    }
            }
        }
        out.push_back(next);
        toks.push_back(next);
        if (next == tokens::eos) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

void append_matrix(std::vector<unsigned char>& blob, const Matrix& m) {
    for (double x : m.data) io::append_f64_le(blob, x);
}
void append_vec(std::vector<unsigned char>& blob, const std::vector<double>& v) {
    for (double x : v) io::append_f64_le(blob, x);
}

}  // namespace

void save_model(const ToyLM& m, const std::string& header_path, const std::string& blob_path) {
    nlohmann::json header = {
        {"format", "toylm-v1"},
        {"vocab_size", m.cfg.vocab_size},
        {"dim", m.cfg.dim},
        {"layers", m.cfg.layers},
        {"heads", m.cfg.heads},
        {"max_seq", m.cfg.max_seq},
        {"seed", m.cfg.seed},
        {"order", "emb,pos,[ln1,wq,wk,wv,wo,ln2,w1,w2]*layers,lnf"},
    };
    io::write_file(header_path, header.dump(2) + "\n");

    std::vector<unsigned char> blob;
    append_matrix(blob, m.emb);
    append_matrix(blob, m.pos);
    for (const auto& b : m.blocks) {
        append_vec(blob, b.ln1);
        append_matrix(blob, b.wq);
        append_matrix(blob, b.wk);
        append_matrix(blob, b.wv);
        append_matrix(blob, b.wo);
        append_vec(blob, b.ln2);
        append_matrix(blob, b.w1);
        append_matrix(blob, b.w2);
    }
    append_vec(blob, m.lnf);
    io::write_file(blob_path, blob);
}

ToyLM load_model(const std::string& header_path, const std::string& blob_path) {
    const auto header = nlohmann::json::parse(io::read_text_file(header_path));
    ToyLMConfig cfg;
    cfg.vocab_size = header.at("vocab_size").get<int>();
    cfg.dim = header.at("dim").get<int>();
    cfg.layers = header.at("layers").get<int>();
    cfg.heads = header.at("heads").get<int>();
    cfg.max_seq = header.at("max_seq").get<int>();
    cfg.seed = header.at("seed").get<uint64_t>();
    validate_config(cfg);

    const auto blob = io::read_file(blob_path);
    size_t off = 0;
    auto take_matrix = [&](int rows, int cols) {
        Matrix m(rows, cols);
        if (off + m.size() * 8 > blob.size()) throw io::IoError("model blob truncated");
        for (size_t i = 0; i < m.size(); ++i, off += 8) m.data[i] = io::read_f64_le(&blob[off]);
        return m;
    };
    auto take_vec = [&](int n) {
        std::vector<double> v(static_cast<size_t>(n));
        if (off + v.size() * 8 > blob.size()) throw io::IoError("model blob truncated");
        for (size_t i = 0; i < v.size(); ++i, off += 8) v[i] = io::read_f64_le(&blob[off]);
        return v;
    };

    ToyLM m;
    m.cfg = cfg;
    m.emb = take_matrix(cfg.vocab_size, cfg.dim);
    m.pos = take_matrix(cfg.max_seq, cfg.dim);
    for (int l = 0; l < cfg.layers; ++l) {
        ToyLM::Block b;
        b.ln1 = take_vec(cfg.dim);
        b.wq = take_matrix(cfg.dim, cfg.dim);
        b.wk = take_matrix(cfg.dim, cfg.dim);
        b.wv = take_matrix(cfg.dim, cfg.dim);
        b.wo = take_matrix(cfg.dim, cfg.dim);
        b.ln2 = take_vec(cfg.dim);
        b.w1 = take_matrix(cfg.dim, 4 * cfg.dim);
        b.w2 = take_matrix(4 * cfg.dim, cfg.dim);
        m.blocks.push_back(std::move(b));
    }
    m.lnf = take_vec(cfg.dim);
    if (off != blob.size()) throw io::IoError("model blob has trailing bytes");
    return m;
}

}  // namespace steerlab::toylm
