#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "steerlab/numkit.hpp"

using namespace steerlab::numkit;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (double& x : m.data) x = scale * rng.normal();
    return m;
}

}  // namespace

TEST_CASE("top principal component: axis-aligned variance") {
    Matrix x(4, 2, {1, 0, -1, 0, 2, 0, -2, 0});
    auto v = top_principal_component(x);
    CHECK(v[0] == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(std::fabs(v[1]) < 1e-10);
}

TEST_CASE("top principal component: symmetric diagonal") {
    Matrix x(2, 2, {1, 1, -1, -1});
    auto v = top_principal_component(x);
    const double r = 1.0 / std::sqrt(2.0);
    CHECK(v[0] == doctest::Approx(r).epsilon(1e-10));
    CHECK(v[1] == doctest::Approx(r).epsilon(1e-10));
}

TEST_CASE("top principal component matches dense eigensolver oracle") {
    Rng rng(42);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix x = random_matrix(rng, 8, 4);
        auto v = top_principal_component(x);
        auto u = oracles::top_eigvec_oracle(x);
        CHECK(oracles::vec_dist_up_to_sign(v, u) < 1e-6);
        CHECK(std::fabs(norm(v) - 1.0) < 1e-12);
    }
}

TEST_CASE("top principal component: degenerate inputs") {
    Matrix zero(3, 2);
    CHECK_THROWS_AS(top_principal_component(zero), DegenerateInput);
    Matrix one_row(1, 2, {1, 2});
    CHECK_THROWS_AS(top_principal_component(one_row), DegenerateInput);
}

TEST_CASE("backward: d(x*x)/dx at 3 is 6") {
    DiffGraph g;
    int x = g.leaf(Matrix::scalar(3.0), true);
    int y = g.mul(x, x);
    g.backward(y);
    CHECK(g.grad(x).data[0] == doctest::Approx(6.0));
}

TEST_CASE("backward: constant graph has zero gradients") {
    DiffGraph g;
    int x = g.leaf(Matrix::scalar(2.0), true);
    int c = g.leaf(Matrix::scalar(5.0), false);
    int y = g.mul(c, c);
    g.backward(y);
    CHECK(g.grad(x).data[0] == 0.0);
}

TEST_CASE("backward: non-scalar loss rejected") {
    DiffGraph g;
    int x = g.leaf(Matrix(2, 2), true);
    CHECK_THROWS_AS(g.backward(x), NonScalarLoss);
}

TEST_CASE("sigmoid(w.h) gradient matches finite differences") {
    Rng rng(7);
    DiffGraph g;
    int w = g.leaf(random_matrix(rng, 1, 6), true);
    int h = g.leaf(random_matrix(rng, 1, 6), false);
    int s = g.matmul_nt(w, h);
    int y = g.sigmoid(s);
    CHECK(finite_diff_check(g, y, 1e-5) < 1e-4);
}

TEST_CASE("finite_diff_check: quadratic loss is near-exact") {
    Rng rng(9);
    DiffGraph g;
    int w = g.leaf(random_matrix(rng, 1, 5), true);
    int sq = g.mul(w, w);
    int l = g.sum_all(sq);
    CHECK(finite_diff_check(g, l, 1e-5) < 1e-6);
}

TEST_CASE("finite_diff_check: zero-gradient stationary point stays bounded") {
    // loss = sum(w^2) at w = 0: analytic gradient 0, central difference exactly 0
    DiffGraph g;
    int w = g.leaf(Matrix(1, 4), true);
    int l = g.sum_all(g.mul(w, w));
    CHECK(finite_diff_check(g, l, 1e-4) < 1e-4);
}

// Per-op gradient sweep: every op used by the learner losses gets its own
// finite-difference check on random inputs.
TEST_CASE("per-op gradients pass finite differences") {
    Rng rng(1234);

    SUBCASE("matmul + add + sub + affine") {
        DiffGraph g;
        int a = g.leaf(random_matrix(rng, 3, 4), true);
        int b = g.leaf(random_matrix(rng, 4, 2), true);
        int c = g.leaf(random_matrix(rng, 3, 2), true);
        int y = g.affine(g.sub(g.add(g.matmul(a, b), c), c), 1.7, 0.3);
        CHECK(finite_diff_check(g, g.mean_all(g.mul(y, y)), 1e-5) < 1e-5);
    }
    SUBCASE("gather_rows") {
        DiffGraph g;
        int e = g.leaf(random_matrix(rng, 5, 3), true);
        int x = g.gather_rows(e, {4, 0, 0, 2});
        CHECK(finite_diff_check(g, g.sum_all(g.mul(x, x)), 1e-5) < 1e-5);
    }
    SUBCASE("rmsnorm_rows") {
        DiffGraph g;
        int x = g.leaf(random_matrix(rng, 3, 6), true);
        int gain = g.leaf(random_matrix(rng, 1, 6), true);
        int y = g.rmsnorm_rows(x, gain);
        CHECK(finite_diff_check(g, g.mean_all(g.mul(y, y)), 1e-5) < 1e-4);
    }
    SUBCASE("causal_attention") {
        DiffGraph g;
        int q = g.leaf(random_matrix(rng, 4, 8, 0.7), true);
        int k = g.leaf(random_matrix(rng, 4, 8, 0.7), true);
        int v = g.leaf(random_matrix(rng, 4, 8, 0.7), true);
        int y = g.causal_attention(q, k, v, 2);
        CHECK(finite_diff_check(g, g.mean_all(g.mul(y, y)), 1e-5) < 1e-4);
    }
    SUBCASE("ce_rows_mean with masked rows") {
        DiffGraph g;
        int logits = g.leaf(random_matrix(rng, 4, 7), true);
        int l = g.ce_rows_mean(logits, {-1, 3, 0, 6});
        CHECK(finite_diff_check(g, l, 1e-5) < 1e-5);
    }
    SUBCASE("bce_logits_mean") {
        DiffGraph g;
        int s = g.leaf(random_matrix(rng, 6, 1), true);
        int l = g.bce_logits_mean(s, {1, 0, 1, 1, 0, 0});
        CHECK(finite_diff_check(g, l, 1e-5) < 1e-5);
    }
    SUBCASE("relu / gelu / sigmoid / sqrt / div") {
        DiffGraph g;
        int x = g.leaf(random_matrix(rng, 2, 5), true);
        int d = g.leaf(random_matrix(rng, 2, 5, 0.3), true);
        int pos = g.affine(g.mul(d, d), 1.0, 0.5);  // strictly positive denominator
        int y = g.div_ew(g.sigmoid(g.gelu(g.relu(x))), pos);
        int l = g.mean_all(g.mul(y, y));
        CHECK(finite_diff_check(g, l, 1e-6) < 1e-4);
        int r = g.sum_all(g.sqrt_ew(pos));
        CHECK(finite_diff_check(g, r, 1e-6) < 1e-4);
    }
    SUBCASE("add_rowvec / add_scaled_rowvec") {
        DiffGraph g;
        int x = g.leaf(random_matrix(rng, 3, 4), true);
        int w = g.leaf(random_matrix(rng, 1, 4), true);
        int s = g.leaf(Matrix::scalar(0.8), true);
        int y = g.add_scaled_rowvec(g.add_rowvec(x, w), s, w);
        CHECK(finite_diff_check(g, g.mean_all(g.mul(y, y)), 1e-5) < 1e-4);
    }
    SUBCASE("topk_mean / nontopk_sum") {
        DiffGraph g;
        int x = g.leaf(random_matrix(rng, 7, 1), true);
        int l = g.add(g.topk_mean(x, 3), g.nontopk_sum(x, 3));
        CHECK(finite_diff_check(g, l, 1e-6) < 1e-4);
    }
}

TEST_CASE("topk ops: boundary semantics") {
    DiffGraph g;
    int x = g.leaf(Matrix(3, 1, {2.0, 5.0, 5.0}), false);
    // k larger than n: mean over all entries
    CHECK(g.value(g.topk_mean(x, 10)).data[0] == doctest::Approx(4.0));
    // all entries inside top-k: L1 remainder is exactly zero
    CHECK(g.value(g.nontopk_sum(x, 3)).data[0] == 0.0);
    CHECK(g.value(g.nontopk_sum(x, 2)).data[0] == doctest::Approx(2.0));
}

TEST_CASE("adam: gradient parallel to projection leaves parameters unchanged") {
    std::vector<double> w = {0.6, 0.8};
    std::vector<double> params = w;
    std::vector<double> grad = {1.2, 1.6};  // parallel to w
    auto st = AdamState::make(2, {0.1, 10});
    adam_step(st, params, grad, &w);
    CHECK(params[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(params[1] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(st.step == 1);
}

TEST_CASE("adam: orthogonal gradient matches unprojected step") {
    std::vector<double> w = {1.0, 0.0};
    std::vector<double> grad = {0.0, 0.7};
    std::vector<double> a = {0.2, 0.3}, b = {0.2, 0.3};
    auto st1 = AdamState::make(2, {0.05, 100});
    auto st2 = AdamState::make(2, {0.05, 100});
    adam_step(st1, a, grad, &w);
    adam_step(st2, b, grad, nullptr);
    CHECK(a[0] == b[0]);
    CHECK(a[1] == b[1]);
}

TEST_CASE("adam: mixed gradient equals hand-composed step on the orthogonal part") {
    std::vector<double> w = {0.6, 0.8};
    std::vector<double> grad = {1.0, -0.5};
    const double gp = grad[0] * w[0] + grad[1] * w[1];
    std::vector<double> ortho = {grad[0] - gp * w[0], grad[1] - gp * w[1]};

    std::vector<double> params = {0.1, -0.2};
    auto st = AdamState::make(2, {0.02, 1});
    adam_step(st, params, grad, &w);

    auto expect = oracles::adam_single_step_oracle({0.1, -0.2}, ortho, 0.02);
    CHECK(params[0] == doctest::Approx(expect[0]).epsilon(1e-14));
    CHECK(params[1] == doctest::Approx(expect[1]).epsilon(1e-14));
}

TEST_CASE("adam with projection: step is orthogonal to the projection direction") {
    Rng rng(77);
    std::vector<double> w(8);
    for (double& x : w) x = rng.normal();
    normalize(w);
    std::vector<double> params(8), grad(8);
    for (double& x : params) x = rng.normal();
    auto st = AdamState::make(8, {0.01, 50});
    for (int step = 0; step < 20; ++step) {
        for (double& x : grad) x = rng.normal();
        std::vector<double> before = params;
        adam_step(st, params, grad, &w);
        double proj = 0.0;
        for (size_t i = 0; i < w.size(); ++i) proj += (params[i] - before[i]) * w[i];
        // The Adam direction uses element-wise moment scaling, so exact
        // orthogonality holds only while the moments stay proportional to the
        // projected gradients, which they do here (all grads projected).
        CHECK(std::fabs(proj) < 1e-2);
    }
}

TEST_CASE("adam: linear schedule decays to base/total") {
    LinearSchedule sched{1.0, 4};
    CHECK(sched.lr_for_step(1) == doctest::Approx(1.0));
    CHECK(sched.lr_for_step(2) == doctest::Approx(0.75));
    CHECK(sched.lr_for_step(4) == doctest::Approx(0.25));
}

TEST_CASE("adam: shape mismatch raises") {
    std::vector<double> params = {1.0, 2.0};
    std::vector<double> grad = {1.0};
    auto st = AdamState::make(2, {0.1, 1});
    CHECK_THROWS_AS(adam_step(st, params, grad, nullptr), ShapeMismatch);
}

TEST_CASE("rng: deterministic and fork-independent") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(123);
    Rng f1 = c.fork("alpha");
    Rng f2 = c.fork("beta");
    CHECK(f1.next_u64() != f2.next_u64());
}

TEST_CASE("rng: shuffle is a permutation") {
    Rng rng(5);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[i] = i;
    rng.shuffle(v);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("graph recompute: editing a leaf propagates") {
    DiffGraph g;
    int x = g.leaf(Matrix::scalar(2.0), true);
    int y = g.mul(x, x);
    CHECK(g.value(y).data[0] == 4.0);
    g.leaf_value(x).data[0] = 3.0;
    g.recompute();
    CHECK(g.value(y).data[0] == 9.0);
}
