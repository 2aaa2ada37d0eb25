#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "steerlab/attribution.hpp"
#include "steerlab/corpus.hpp"

using namespace steerlab;
using namespace steerlab::attribution;
using numkit::Matrix;

namespace {

struct World {
    toylm::ToyLM model;
    corpus::VocabLayout layout;
    corpus::ConceptSpec spec;
    corpus::ConceptCorpus corp;
};

World make_world(int n_train = 48) {
    World w{toylm::build_toy_lm({}), corpus::VocabLayout::for_vocab(64), {}, {}};
    w.spec.concept_id = "c0";
    w.spec.genre = corpus::Genre::text;
    w.spec.planted_tokens = {40, 41, 42};
    w.spec.plant_rate = 0.45;
    w.corp = corpus::plant_concept_corpus(w.model, w.layout, w.spec, n_train, 8, 7);
    return w;
}

}  // namespace

TEST_CASE("head: forward gradient matches finite differences") {
    auto head = make_head(6, 5, 3);
    numkit::Rng rng(1);
    std::vector<double> h(6);
    for (double& x : h) x = rng.normal();
    std::vector<double> grad;
    head.forward(h, &grad);
    for (int i = 0; i < 6; ++i) {
        const double eps = 1e-6;
        auto hp = h, hm = h;
        hp[i] += eps;
        hm[i] -= eps;
        const double fd = (head.forward(hp) - head.forward(hm)) / (2 * eps);
        CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-4));
    }
}

TEST_CASE("train_cls_head: deterministic init and seeded training") {
    auto w = make_world(16);
    HeadConfig cfg;
    cfg.epochs = 0;
    cfg.seed = 5;
    auto a = train_cls_head(w.model, w.corp.train, cfg);
    auto b = train_cls_head(w.model, w.corp.train, cfg);
    CHECK(a.w1.data == b.w1.data);
    CHECK(a.w2 == b.w2);

    cfg.epochs = 5;
    auto c = train_cls_head(w.model, w.corp.train, cfg);
    auto d = train_cls_head(w.model, w.corp.train, cfg);
    CHECK(c.w1.data == d.w1.data);
    CHECK(c.b2 == d.b2);
}

TEST_CASE("train_cls_head: planted corpus reaches held-in accuracy >= 0.95") {
    auto w = make_world(48);
    HeadConfig cfg;
    cfg.epochs = 60;
    cfg.batch = 16;
    cfg.lr = 1e-2;
    cfg.seed = 5;
    auto head = train_cls_head(w.model, w.corp.train, cfg);
    int correct = 0;
    for (const auto& s : w.corp.train) {
        const auto trace = toylm::forward_hidden(w.model, s.full());
        const Matrix& last = trace.hidden.back();
        std::vector<double> h(last.row_ptr(last.rows - 1), last.row_ptr(last.rows - 1) + 32);
        const bool pred = head.forward(h) > 0.0;
        correct += (pred == (s.label == corpus::Label::positive));
    }
    CHECK(static_cast<double>(correct) / w.corp.train.size() >= 0.95);
}

TEST_CASE("ixg: zero-weight head gives all-zero scores; scores are nonnegative") {
    auto w = make_world(8);
    auto head = make_head(32, 16, 1);
    for (double& x : head.w2) x = 0.0;
    head.b2 = 0.4;
    std::vector<int> toks = {1, 20, 21, 40, 22, 2};
    auto scores = ixg_scores(w.model, head, toks, 1);
    REQUIRE(scores.size() == toks.size());
    for (double s : scores) CHECK(s == 0.0);

    auto head2 = make_head(32, 16, 2);
    auto s2 = ixg_scores(w.model, head2, toks, 1);
    for (double s : s2) CHECK(s >= 0.0);
}

TEST_CASE("ixg: per-coordinate gradients match finite differences") {
    auto w = make_world(8);
    auto head = make_head(32, 8, 3);
    std::vector<int> toks = {1, 20, 21, 2};
    const auto trace = toylm::forward_hidden(w.model, toks);
    Matrix states = trace.hidden[1];
    auto f = model_head_fn(w.model, head, 1);
    Matrix grad;
    f(states, &grad);
    numkit::Rng rng(4);
    for (int probe = 0; probe < 12; ++probe) {
        const int i = static_cast<int>(rng.below(states.rows));
        const int j = static_cast<int>(rng.below(states.cols));
        const double eps = 1e-5;
        Matrix sp = states, sm = states;
        sp(i, j) += eps;
        sm(i, j) -= eps;
        const double fd = (f(sp, nullptr) - f(sm, nullptr)) / (2 * eps);
        CHECK(grad(i, j) == doctest::Approx(fd).epsilon(1e-3));
    }
}

TEST_CASE("ig: states equal to the baseline give all-zero scores") {
    auto w = make_world(8);
    auto head = make_head(32, 8, 6);
    const Matrix baseline = baseline_states(w.model, 1, 5);
    auto f = model_head_fn(w.model, head, 1);
    auto ig = ig_core(f, baseline, baseline, 8);
    for (const auto& row : ig)
        for (double x : row) CHECK(x == 0.0);
}

TEST_CASE("ig: closed form for a linear head, any step count") {
    // F(h) = sum_i v_i . h_i  ->  IG_i = (h_i - b_i) * v_i exactly
    numkit::Rng rng(8);
    const int n = 4, d = 6;
    Matrix states(n, d), baseline(n, d);
    for (double& x : states.data) x = rng.normal();
    for (double& x : baseline.data) x = rng.normal();
    Matrix v(n, d);
    for (double& x : v.data) x = rng.normal();
    StateFn linear = [&](const Matrix& s, Matrix* grad) {
        if (grad) *grad = v;
        double total = 0.0;
        for (size_t i = 0; i < s.size(); ++i) total += s.data[i] * v.data[i];
        return total;
    };
    for (int steps : {1, 3, 50}) {
        auto ig = ig_core(linear, states, baseline, steps);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
                CHECK(ig[i][j] ==
                      doctest::Approx((states(i, j) - baseline(i, j)) * v(i, j)).epsilon(1e-12));
        // completeness is exact for linear F
        CHECK(ig_signed_sum(ig) ==
              doctest::Approx(linear(states, nullptr) - linear(baseline, nullptr))
                  .epsilon(1e-9));
    }
}

TEST_CASE("ig: completeness within 1e-3 relative at 200 steps through the model") {
    auto w = make_world(8);
    auto head = make_head(32, 8, 9);
    std::vector<int> toks = {1, 20, 40, 21, 2};
    const auto trace = toylm::forward_hidden(w.model, toks);
    const Matrix& states = trace.hidden[1];
    const Matrix baseline = baseline_states(w.model, 1, states.rows);
    auto f = model_head_fn(w.model, head, 1);
    auto ig = ig_core(f, states, baseline, 200);
    const double lhs = ig_signed_sum(ig);
    const double rhs = f(states, nullptr) - f(baseline, nullptr);
    CHECK(std::fabs(lhs - rhs) <= 1e-3 * std::max(1.0, std::fabs(rhs)));
}

TEST_CASE("ig: converged scores are stable between 200 and 400 steps") {
    auto w = make_world(8);
    auto head = make_head(32, 8, 11);
    std::vector<int> toks = {1, 22, 41, 23, 2};
    auto a = ig_scores(w.model, head, toks, 1, 200);
    auto b = ig_scores(w.model, head, toks, 1, 400);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i)
        CHECK(std::fabs(a[i] - b[i]) <= 1e-3 * std::max(1.0, std::fabs(b[i])));
}

TEST_CASE("ixg and ig produce exactly one score per token") {
    auto w = make_world(8);
    auto head = make_head(32, 8, 13);
    for (int len : {2, 5, 9}) {
        std::vector<int> toks(len, 20);
        toks[0] = 1;
        CHECK(ixg_scores(w.model, head, toks, 1).size() == static_cast<size_t>(len));
        CHECK(ig_scores(w.model, head, toks, 1, 10).size() == static_cast<size_t>(len));
    }
}
