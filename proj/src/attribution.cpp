#include "steerlab/attribution.hpp"

#include "steerlab/learners.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace steerlab::attribution {

using learners::MissingClass;
using numkit::AdamState;
using numkit::DiffGraph;
using numkit::Rng;

double ClsHead::forward(std::span<const double> h, std::vector<double>* grad_h) const {
    const int d = in_dim(), m = hidden_dim();
    std::vector<double> z1(m);
    for (int j = 0; j < m; ++j) {
        double s = b1[j];
        for (int i = 0; i < d; ++i) s += h[i] * w1(i, j);
        z1[j] = s;
    }
    double logit = b2;
    for (int j = 0; j < m; ++j) logit += numkit::gelu_tanh(z1[j]) * w2[j];
    if (grad_h) {
        grad_h->assign(d, 0.0);
        for (int j = 0; j < m; ++j) {
            const double dj = numkit::gelu_tanh_grad(z1[j]) * w2[j];
            for (int i = 0; i < d; ++i) (*grad_h)[i] += w1(i, j) * dj;
        }
    }
    return logit;
}

ClsHead make_head(int d, int hidden, uint64_t seed) {
    Rng rng(seed);
    ClsHead head;
    head.w1 = Matrix(d, hidden);
    for (double& x : head.w1.data) x = rng.normal(0.0, 1.0 / std::sqrt(d));
    head.b1.assign(hidden, 0.0);
    head.w2.resize(hidden);
    for (double& x : head.w2) x = rng.normal(0.0, 1.0 / std::sqrt(hidden));
    head.b2 = 0.0;
    return head;
}

ClsHead train_cls_head(const toylm::ToyLM& model,
                       const std::vector<corpus::LabeledSequence>& train_seqs,
                       const HeadConfig& cfg) {
    bool pos = false, neg = false;
    for (const auto& s : train_seqs)
        (s.label == corpus::Label::positive ? pos : neg) = true;
    if (!pos || !neg) throw MissingClass("train_cls_head: need both classes");

    const int d = model.cfg.dim;
    ClsHead head = make_head(d, cfg.hidden, cfg.seed);
    if (cfg.epochs == 0) return head;

    // frozen-model features: last-token representation of the last layer
    const long n = static_cast<long>(train_seqs.size());
    Matrix feats(static_cast<int>(n), d);
    std::vector<int> labels(n);
    for (long i = 0; i < n; ++i) {
        const auto toks = train_seqs[i].full();
        const auto trace = toylm::forward_hidden(model, toks);
        const Matrix& last = trace.hidden.back();
        std::copy(last.row_ptr(last.rows - 1), last.row_ptr(last.rows - 1) + d,
                  feats.row_ptr(static_cast<int>(i)));
        labels[i] = corpus::label_binary(train_seqs[i].label);
    }

    const long steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    numkit::LinearSchedule sched{cfg.lr, cfg.epochs * steps_per_epoch};
    auto adam_w1 = AdamState::make(head.w1.size(), sched);
    auto adam_b1 = AdamState::make(head.b1.size(), sched);
    auto adam_w2 = AdamState::make(head.w2.size(), sched);
    auto adam_b2 = AdamState::make(1, sched);

    Rng shuffle_rng = Rng(cfg.seed).fork("cls-batches");
    std::vector<long> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        for (long start = 0; start < n; start += cfg.batch) {
            const long end = std::min(n, start + cfg.batch);
            Matrix x(static_cast<int>(end - start), d);
            std::vector<int> y;
            for (long i = start; i < end; ++i) {
                std::copy(feats.row_ptr(static_cast<int>(order[i])),
                          feats.row_ptr(static_cast<int>(order[i])) + d,
                          x.row_ptr(static_cast<int>(i - start)));
                y.push_back(labels[order[i]]);
            }
            DiffGraph g;
            const int xl = g.leaf(std::move(x));
            const int w1l = g.leaf(head.w1, true, "w1");
            const int b1l = g.leaf(Matrix::row_vector(head.b1), true, "b1");
            const int w2l = g.leaf(Matrix::row_vector(head.w2), true, "w2");
            const int b2l = g.leaf(Matrix::scalar(head.b2), true, "b2");
            const int act = g.gelu(g.add_rowvec(g.matmul(xl, w1l), b1l));
            const int logit = g.add_rowvec(g.matmul_nt(act, w2l), b2l);
            const int loss = g.bce_logits_mean(logit, y);
            g.backward(loss);
            numkit::adam_step(adam_w1, head.w1.data, g.grad(w1l).data);
            numkit::adam_step(adam_b1, head.b1, g.grad(b1l).data);
            numkit::adam_step(adam_w2, head.w2, g.grad(w2l).data);
            std::span<double> b2s(&head.b2, 1);
            numkit::adam_step(adam_b2, b2s, g.grad(b2l).data);
        }
    }
    return head;
}

// ---------------------------------------------------------------------------
// attribution scores
// ---------------------------------------------------------------------------

StateFn model_head_fn(const toylm::ToyLM& model, const ClsHead& head, int layer) {
    return [&model, &head, layer](const Matrix& states, Matrix* grad_out) {
        DiffGraph g;
        auto gm = toylm::GraphModel::attach(g, model);
        const int sl = g.leaf(states, true, "states");
        const int fin = gm.final_states_from(g, sl, layer);
        const int last = g.gather_rows(fin, {states.rows - 1});
        const int w1l = g.leaf(head.w1);
        const int b1l = g.leaf(Matrix::row_vector(head.b1));
        const int w2l = g.leaf(Matrix::row_vector(head.w2));
        const int act = g.gelu(g.add_rowvec(g.matmul(last, w1l), b1l));
        const int logit = g.affine(g.matmul_nt(act, w2l), 1.0, head.b2);
        const double value = g.loss_value(logit);
        if (grad_out) {
            g.backward(logit);
            *grad_out = g.grad(sl);
        }
        return value;
    };
}

Matrix baseline_states(const toylm::ToyLM& model, int layer, int n) {
    const std::vector<int> one = {toylm::tokens::space};
    const auto trace = toylm::forward_hidden(model, one);
    const Matrix& b = trace.hidden[layer];
    Matrix out(n, model.cfg.dim);
    for (int i = 0; i < n; ++i)
        std::copy(b.row_ptr(0), b.row_ptr(0) + model.cfg.dim, out.row_ptr(i));
    return out;
}

std::vector<double> ixg_scores(const toylm::ToyLM& model, const ClsHead& head,
                               std::span<const int> tokens, int layer) {
    const auto trace = toylm::forward_hidden(model, tokens);
    const Matrix& states = trace.hidden[layer];
    Matrix grad;
    model_head_fn(model, head, layer)(states, &grad);
    std::vector<double> scores(states.rows, 0.0);
    for (int i = 0; i < states.rows; ++i)
        for (int j = 0; j < states.cols; ++j) scores[i] += std::fabs(grad(i, j));
    return scores;
}

std::vector<std::vector<double>> ig_core(const StateFn& f, const Matrix& states,
                                         const Matrix& baseline, int steps) {
    if (steps < 1) throw MissingClass("ig_core: steps must be >= 1");
    Matrix grad_acc(states.rows, states.cols);
    Matrix point(states.rows, states.cols);
    Matrix grad;
    for (int k = 0; k < steps; ++k) {
        const double alpha = (static_cast<double>(k) + 0.5) / steps;  // midpoint rule
        for (size_t i = 0; i < point.size(); ++i)
            point.data[i] = baseline.data[i] + alpha * (states.data[i] - baseline.data[i]);
        f(point, &grad);
        for (size_t i = 0; i < grad_acc.size(); ++i) grad_acc.data[i] += grad.data[i];
    }
    std::vector<std::vector<double>> ig(states.rows, std::vector<double>(states.cols));
    for (int i = 0; i < states.rows; ++i)
        for (int j = 0; j < states.cols; ++j)
            ig[i][j] = (states(i, j) - baseline(i, j)) * grad_acc(i, j) / steps;
    return ig;
}

double ig_signed_sum(const std::vector<std::vector<double>>& ig) {
    double s = 0.0;
    for (const auto& row : ig)
        for (double x : row) s += x;
    return s;
}

std::vector<double> ig_scores(const toylm::ToyLM& model, const ClsHead& head,
                              std::span<const int> tokens, int layer, int steps) {
    const auto trace = toylm::forward_hidden(model, tokens);
    const Matrix& states = trace.hidden[layer];
    const Matrix baseline = baseline_states(model, layer, states.rows);
    const auto ig = ig_core(model_head_fn(model, head, layer), states, baseline, steps);
    std::vector<double> scores(states.rows, 0.0);
    for (int i = 0; i < states.rows; ++i)
        for (double x : ig[i]) scores[i] += std::fabs(x);
    return scores;
}

}  // namespace steerlab::attribution
