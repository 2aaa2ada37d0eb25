#include "steerlab/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace steerlab::numkit {

// ---------------------------------------------------------------------------
// small dense helpers
// ---------------------------------------------------------------------------

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeMismatch("dot: length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void normalize(std::vector<double>& v, double tol) {
    double n = norm(v);
    if (!(n > tol)) throw DegenerateInput("normalize: vector norm below tolerance");
    for (double& x : v) x /= n;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) throw ShapeMismatch("matmul: inner dimensions differ");
    Matrix c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row_ptr(i);
        double* ci = c.row_ptr(i);
        for (int k = 0; k < a.cols; ++k) {
            const double aik = ai[k];
            if (aik == 0.0) continue;
            const double* bk = b.row_ptr(k);
            for (int j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) throw ShapeMismatch("matmul_nt: inner dimensions differ");
    Matrix c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* ai = a.row_ptr(i);
        double* ci = c.row_ptr(i);
        for (int j = 0; j < b.rows; ++j) {
            const double* bj = b.row_ptr(j);
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
            ci[j] = s;
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Rng
// ---------------------------------------------------------------------------

uint64_t Rng::next_u64() {
    // SplitMix64
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

uint64_t Rng::below(uint64_t n) {
    if (n == 0) return 0;
    // rejection sampling to avoid modulo bias
    const uint64_t limit = ~0ull - (~0ull % n);
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();  // avoid log(0)
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586 * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
}

Rng Rng::fork(std::string_view label) const { return Rng(state_ ^ fnv1a(label)); }
Rng Rng::fork(uint64_t salt) const {
    uint64_t bytes[1] = {salt};
    return Rng(state_ ^ fnv1a(bytes, sizeof(bytes)));
}

uint64_t fnv1a(const void* data, size_t len, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t fnv1a(std::string_view s) { return fnv1a(s.data(), s.size()); }

// ---------------------------------------------------------------------------
// DiffGraph construction
// ---------------------------------------------------------------------------

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) throw ShapeMismatch(std::string(op) + ": shape mismatch");
}

// deterministic top-k selection: by value descending, index ascending on ties
std::vector<int> topk_indices(const Matrix& a, int k) {
    const int n = static_cast<int>(a.size());
    const int k_eff = std::min(k, n);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
        if (a.data[i] != a.data[j]) return a.data[i] > a.data[j];
        return i < j;
    });
    order.resize(k_eff);
    std::sort(order.begin(), order.end());
    return order;
}

}  // namespace

double gelu_tanh(double x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_tanh_grad(double x) {
    constexpr double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Matrix rmsnorm_rows_forward(const Matrix& x, std::span<const double> gain, double eps,
                            Matrix* rms_out) {
    if (static_cast<int>(gain.size()) != x.cols) throw ShapeMismatch("rmsnorm: bad gain length");
    Matrix out(x.rows, x.cols);
    if (rms_out) *rms_out = Matrix(x.rows, 1);
    for (int i = 0; i < x.rows; ++i) {
        double ss = 0.0;
        for (int j = 0; j < x.cols; ++j) ss += x(i, j) * x(i, j);
        const double r = std::sqrt(ss / x.cols + eps);
        if (rms_out) rms_out->data[i] = r;
        for (int j = 0; j < x.cols; ++j) out(i, j) = x(i, j) * gain[j] / r;
    }
    return out;
}

Matrix causal_attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, int heads,
                                Matrix* probs_out) {
    const int nt = q.rows;
    const int d = q.cols;
    if (d % heads != 0) throw ShapeMismatch("causal_attention: dim % heads != 0");
    const int dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix out(nt, d);
    Matrix local_probs;
    Matrix& probs_m = probs_out ? *probs_out : local_probs;
    probs_m = Matrix(heads, nt * nt);
    for (int h = 0; h < heads; ++h) {
        const int off = h * dh;
        double* probs = probs_m.row_ptr(h);
        for (int i = 0; i < nt; ++i) {
            double mx = -1e300;
            for (int j = 0; j <= i; ++j) {
                double s = 0.0;
                for (int e = 0; e < dh; ++e) s += q(i, off + e) * k(j, off + e);
                s *= inv_sqrt;
                probs[i * nt + j] = s;
                if (s > mx) mx = s;
            }
            double z = 0.0;
            for (int j = 0; j <= i; ++j) {
                const double p = std::exp(probs[i * nt + j] - mx);
                probs[i * nt + j] = p;
                z += p;
            }
            for (int j = 0; j <= i; ++j) probs[i * nt + j] /= z;
            for (int j = i + 1; j < nt; ++j) probs[i * nt + j] = 0.0;
            for (int e = 0; e < dh; ++e) {
                double s = 0.0;
                for (int j = 0; j <= i; ++j) s += probs[i * nt + j] * v(j, off + e);
                out(i, off + e) = s;
            }
        }
    }
    return out;
}

int DiffGraph::push(Node n) {
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    forward_node(id);
    nodes_[id].grad = Matrix(nodes_[id].value.rows, nodes_[id].value.cols);
    return id;
}

int DiffGraph::leaf(Matrix v, bool trainable, std::string name) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    n.trainable = trainable;
    n.name = std::move(name);
    return push(std::move(n));
}

int DiffGraph::gather_rows(int a, std::vector<int> idx) {
    Node n;
    n.op = Op::GatherRows;
    n.a = a;
    n.idx = std::move(idx);
    return push(std::move(n));
}

#define STEERLAB_BINOP(fname, opname)       \
    int DiffGraph::fname(int a, int b) {    \
        Node n;                             \
        n.op = Op::opname;                  \
        n.a = a;                            \
        n.b = b;                            \
        return push(std::move(n));          \
    }

STEERLAB_BINOP(matmul, MatMul)
STEERLAB_BINOP(matmul_nt, MatMulNT)
STEERLAB_BINOP(add, Add)
STEERLAB_BINOP(sub, Sub)
STEERLAB_BINOP(mul, Mul)
STEERLAB_BINOP(add_rowvec, AddRowVec)
STEERLAB_BINOP(div_ew, Div)
#undef STEERLAB_BINOP

#define STEERLAB_UNOP(fname, opname)     \
    int DiffGraph::fname(int a) {        \
        Node n;                          \
        n.op = Op::opname;               \
        n.a = a;                         \
        return push(std::move(n));       \
    }

STEERLAB_UNOP(relu, Relu)
STEERLAB_UNOP(gelu, Gelu)
STEERLAB_UNOP(sigmoid, Sigmoid)
STEERLAB_UNOP(sqrt_ew, Sqrt)
STEERLAB_UNOP(sum_all, SumAll)
STEERLAB_UNOP(mean_all, MeanAll)
#undef STEERLAB_UNOP

int DiffGraph::affine(int a, double k1, double k0) {
    Node n;
    n.op = Op::Affine;
    n.a = a;
    n.k1 = k1;
    n.k0 = k0;
    return push(std::move(n));
}

int DiffGraph::add_scaled_rowvec(int a, int s, int w) {
    Node n;
    n.op = Op::AddScaledRowVec;
    n.a = a;
    n.b = s;
    n.c = w;
    return push(std::move(n));
}

int DiffGraph::rmsnorm_rows(int a, int gain, double eps) {
    Node n;
    n.op = Op::RmsNormRows;
    n.a = a;
    n.b = gain;
    n.k0 = eps;
    return push(std::move(n));
}

int DiffGraph::causal_attention(int q, int k, int v, int heads) {
    Node n;
    n.op = Op::CausalAttention;
    n.a = q;
    n.b = k;
    n.c = v;
    n.i0 = heads;
    return push(std::move(n));
}

int DiffGraph::ce_rows_mean(int logits, std::vector<int> targets) {
    Node n;
    n.op = Op::CeRowsMean;
    n.a = logits;
    n.idx = std::move(targets);
    return push(std::move(n));
}

int DiffGraph::bce_logits_mean(int logits, std::vector<int> labels) {
    Node n;
    n.op = Op::BceLogitsMean;
    n.a = logits;
    n.idx = std::move(labels);
    return push(std::move(n));
}

int DiffGraph::topk_mean(int a, int k) {
    Node n;
    n.op = Op::TopkMean;
    n.a = a;
    n.i0 = k;
    return push(std::move(n));
}

int DiffGraph::nontopk_sum(int a, int k) {
    Node n;
    n.op = Op::NonTopkSum;
    n.a = a;
    n.i0 = k;
    return push(std::move(n));
}

Matrix& DiffGraph::leaf_value(int id) {
    if (nodes_[id].op != Op::Leaf) throw ShapeMismatch("leaf_value: node is not a leaf");
    return nodes_[id].value;
}

std::vector<int> DiffGraph::trainable_leaves() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(nodes_.size()); ++i)
        if (nodes_[i].op == Op::Leaf && nodes_[i].trainable) out.push_back(i);
    return out;
}

double DiffGraph::loss_value(int loss) const {
    const Matrix& v = nodes_[loss].value;
    if (v.size() != 1) throw NonScalarLoss("loss node is not scalar");
    return v.data[0];
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

void DiffGraph::forward_node(int id) {
    Node& n = nodes_[id];
    Matrix& V = n.value;
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::GatherRows: {
            const Matrix& a = nodes_[n.a].value;
            V = Matrix(static_cast<int>(n.idx.size()), a.cols);
            for (size_t r = 0; r < n.idx.size(); ++r)
                std::memcpy(V.row_ptr(static_cast<int>(r)), a.row_ptr(n.idx[r]),
                            sizeof(double) * a.cols);
            break;
        }
        case Op::MatMul:
            V = numkit::matmul(nodes_[n.a].value, nodes_[n.b].value);
            break;
        case Op::MatMulNT:
            V = numkit::matmul_nt(nodes_[n.a].value, nodes_[n.b].value);
            break;
        case Op::Add: {
            const Matrix &a = nodes_[n.a].value, &b = nodes_[n.b].value;
            require_same_shape(a, b, "add");
            V = a;
            for (size_t i = 0; i < V.size(); ++i) V.data[i] += b.data[i];
            break;
        }
        case Op::Sub: {
            const Matrix &a = nodes_[n.a].value, &b = nodes_[n.b].value;
            require_same_shape(a, b, "sub");
            V = a;
            for (size_t i = 0; i < V.size(); ++i) V.data[i] -= b.data[i];
            break;
        }
        case Op::Mul: {
            const Matrix &a = nodes_[n.a].value, &b = nodes_[n.b].value;
            require_same_shape(a, b, "mul");
            V = a;
            for (size_t i = 0; i < V.size(); ++i) V.data[i] *= b.data[i];
            break;
        }
        case Op::Affine: {
            const Matrix& a = nodes_[n.a].value;
            V = a;
            for (double& x : V.data) x = n.k1 * x + n.k0;
            break;
        }
        case Op::AddRowVec: {
            const Matrix &a = nodes_[n.a].value, &b = nodes_[n.b].value;
            if (b.rows != 1 || b.cols != a.cols) throw ShapeMismatch("add_rowvec: bad vector");
            V = a;
            for (int i = 0; i < V.rows; ++i)
                for (int j = 0; j < V.cols; ++j) V(i, j) += b.data[j];
            break;
        }
        case Op::AddScaledRowVec: {
            const Matrix& a = nodes_[n.a].value;
            const Matrix& s = nodes_[n.b].value;
            const Matrix& w = nodes_[n.c].value;
            if (s.size() != 1) throw ShapeMismatch("add_scaled_rowvec: scale not scalar");
            if (w.rows != 1 || w.cols != a.cols) throw ShapeMismatch("add_scaled_rowvec: bad vector");
            V = a;
            const double sv = s.data[0];
            for (int i = 0; i < V.rows; ++i)
                for (int j = 0; j < V.cols; ++j) V(i, j) += sv * w.data[j];
            break;
        }
        case Op::Relu: {
            V = nodes_[n.a].value;
            for (double& x : V.data) x = x > 0.0 ? x : 0.0;
            break;
        }
        case Op::Gelu: {
            V = nodes_[n.a].value;
            for (double& x : V.data) x = gelu_tanh(x);
            break;
        }
        case Op::Sigmoid: {
            V = nodes_[n.a].value;
            for (double& x : V.data) x = 1.0 / (1.0 + std::exp(-x));
            break;
        }
        case Op::Sqrt: {
            V = nodes_[n.a].value;
            for (double& x : V.data) x = std::sqrt(x);
            break;
        }
        case Op::Div: {
            const Matrix &a = nodes_[n.a].value, &b = nodes_[n.b].value;
            require_same_shape(a, b, "div");
            V = a;
            for (size_t i = 0; i < V.size(); ++i) V.data[i] /= b.data[i];
            break;
        }
        case Op::SumAll: {
            double s = 0.0;
            for (double x : nodes_[n.a].value.data) s += x;
            V = Matrix::scalar(s);
            break;
        }
        case Op::MeanAll: {
            const Matrix& a = nodes_[n.a].value;
            double s = 0.0;
            for (double x : a.data) s += x;
            V = Matrix::scalar(a.size() ? s / static_cast<double>(a.size()) : 0.0);
            break;
        }
        case Op::RmsNormRows: {
            const Matrix& a = nodes_[n.a].value;
            const Matrix& g = nodes_[n.b].value;
            if (g.rows != 1 || g.cols != a.cols) throw ShapeMismatch("rmsnorm_rows: bad gain");
            V = rmsnorm_rows_forward(a, g.data, n.k0, &n.aux);
            break;
        }
        case Op::CausalAttention: {
            V = causal_attention_forward(nodes_[n.a].value, nodes_[n.b].value, nodes_[n.c].value,
                                         n.i0, &n.aux);
            break;
        }
        case Op::CeRowsMean: {
            const Matrix& logits = nodes_[n.a].value;
            if (static_cast<int>(n.idx.size()) != logits.rows)
                throw ShapeMismatch("ce_rows_mean: targets length != rows");
            n.aux = Matrix(logits.rows, logits.cols);  // probs for active rows
            int active = 0;
            double total = 0.0;
            for (int i = 0; i < logits.rows; ++i) {
                if (n.idx[i] < 0) continue;
                ++active;
                const double* row = logits.row_ptr(i);
                double mx = row[0];
                for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
                double z = 0.0;
                for (int j = 0; j < logits.cols; ++j) z += std::exp(row[j] - mx);
                const double logz = std::log(z) + mx;
                total += logz - row[n.idx[i]];
                double* p = n.aux.row_ptr(i);
                for (int j = 0; j < logits.cols; ++j) p[j] = std::exp(row[j] - logz);
            }
            if (active == 0) throw ShapeMismatch("ce_rows_mean: no active rows");
            n.k1 = static_cast<double>(active);
            V = Matrix::scalar(total / active);
            break;
        }
        case Op::BceLogitsMean: {
            const Matrix& s = nodes_[n.a].value;
            if (n.idx.size() != s.size()) throw ShapeMismatch("bce_logits_mean: labels length");
            double total = 0.0;
            for (size_t i = 0; i < s.size(); ++i) {
                const double x = s.data[i];
                const double y = static_cast<double>(n.idx[i]);
                // softplus(x) - y*x, computed stably
                total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::fabs(x)));
            }
            V = Matrix::scalar(total / static_cast<double>(s.size()));
            break;
        }
        case Op::TopkMean: {
            const Matrix& a = nodes_[n.a].value;
            if (a.size() == 0) throw ShapeMismatch("topk_mean: empty input");
            n.idx = topk_indices(a, n.i0);
            double s = 0.0;
            for (int i : n.idx) s += a.data[i];
            V = Matrix::scalar(s / static_cast<double>(n.idx.size()));
            break;
        }
        case Op::NonTopkSum: {
            const Matrix& a = nodes_[n.a].value;
            n.idx = topk_indices(a, n.i0);
            std::vector<char> in_top(a.size(), 0);
            for (int i : n.idx) in_top[i] = 1;
            double s = 0.0;
            for (size_t i = 0; i < a.size(); ++i)
                if (!in_top[i]) s += a.data[i];
            V = Matrix::scalar(s);
            break;
        }
    }
}

void DiffGraph::recompute() {
    for (int i = 0; i < static_cast<int>(nodes_.size()); ++i)
        if (nodes_[i].op != Op::Leaf) forward_node(i);
}

void DiffGraph::zero_grads() {
    for (Node& n : nodes_) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void DiffGraph::backward(int loss) {
    if (nodes_[loss].value.size() != 1) throw NonScalarLoss("backward: loss is not scalar");
    zero_grads();
    nodes_[loss].grad.data[0] = 1.0;
    for (int id = loss; id >= 0; --id) backward_node(id);
}

void DiffGraph::backward_node(int id) {
    Node& n = nodes_[id];
    const Matrix& G = n.grad;
    bool any = false;
    for (double g : G.data)
        if (g != 0.0) {
            any = true;
            break;
        }
    if (!any || n.op == Op::Leaf) return;

    Matrix& ga = n.a >= 0 ? nodes_[n.a].grad : n.grad;
    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::GatherRows: {
            for (size_t r = 0; r < n.idx.size(); ++r) {
                double* dst = ga.row_ptr(n.idx[r]);
                const double* src = G.row_ptr(static_cast<int>(r));
                for (int j = 0; j < G.cols; ++j) dst[j] += src[j];
            }
            break;
        }
        case Op::MatMul: {
            // c = a*b: da += G*b^T, db += a^T*G
            const Matrix& a = nodes_[n.a].value;
            const Matrix& b = nodes_[n.b].value;
            Matrix da = numkit::matmul_nt(G, b);
            for (size_t i = 0; i < da.size(); ++i) ga.data[i] += da.data[i];
            Matrix& gb = nodes_[n.b].grad;
            for (int k = 0; k < a.cols; ++k)
                for (int j = 0; j < b.cols; ++j) {
                    double s = 0.0;
                    for (int i = 0; i < a.rows; ++i) s += a(i, k) * G(i, j);
                    gb(k, j) += s;
                }
            break;
        }
        case Op::MatMulNT: {
            // c = a*b^T: da += G*b, db += G^T*a
            const Matrix& a = nodes_[n.a].value;
            const Matrix& b = nodes_[n.b].value;
            Matrix da = numkit::matmul(G, b);
            for (size_t i = 0; i < da.size(); ++i) ga.data[i] += da.data[i];
            Matrix& gb = nodes_[n.b].grad;
            for (int j = 0; j < b.rows; ++j)
                for (int k = 0; k < b.cols; ++k) {
                    double s = 0.0;
                    for (int i = 0; i < a.rows; ++i) s += G(i, j) * a(i, k);
                    gb(j, k) += s;
                }
            break;
        }
        case Op::Add: {
            Matrix& gb = nodes_[n.b].grad;
            for (size_t i = 0; i < G.size(); ++i) {
                ga.data[i] += G.data[i];
                gb.data[i] += G.data[i];
            }
            break;
        }
        case Op::Sub: {
            Matrix& gb = nodes_[n.b].grad;
            for (size_t i = 0; i < G.size(); ++i) {
                ga.data[i] += G.data[i];
                gb.data[i] -= G.data[i];
            }
            break;
        }
        case Op::Mul: {
            const Matrix& a = nodes_[n.a].value;
            const Matrix& b = nodes_[n.b].value;
            Matrix& gb = nodes_[n.b].grad;
            for (size_t i = 0; i < G.size(); ++i) {
                ga.data[i] += G.data[i] * b.data[i];
                gb.data[i] += G.data[i] * a.data[i];
            }
            break;
        }
        case Op::Affine: {
            for (size_t i = 0; i < G.size(); ++i) ga.data[i] += n.k1 * G.data[i];
            break;
        }
        case Op::AddRowVec: {
            Matrix& gb = nodes_[n.b].grad;
            for (int i = 0; i < G.rows; ++i)
                for (int j = 0; j < G.cols; ++j) {
                    ga(i, j) += G(i, j);
                    gb.data[j] += G(i, j);
                }
            break;
        }
        case Op::AddScaledRowVec: {
            const double sv = nodes_[n.b].value.data[0];
            const Matrix& w = nodes_[n.c].value;
            Matrix& gs = nodes_[n.b].grad;
            Matrix& gw = nodes_[n.c].grad;
            double s_acc = 0.0;
            for (int i = 0; i < G.rows; ++i)
                for (int j = 0; j < G.cols; ++j) {
                    const double g = G(i, j);
                    ga(i, j) += g;
                    gw.data[j] += g * sv;
                    s_acc += g * w.data[j];
                }
            gs.data[0] += s_acc;
            break;
        }
        case Op::Relu: {
            const Matrix& a = nodes_[n.a].value;
            for (size_t i = 0; i < G.size(); ++i)
                if (a.data[i] > 0.0) ga.data[i] += G.data[i];
            break;
        }
        case Op::Gelu: {
            const Matrix& a = nodes_[n.a].value;
            for (size_t i = 0; i < G.size(); ++i) ga.data[i] += G.data[i] * gelu_tanh_grad(a.data[i]);
            break;
        }
        case Op::Sigmoid: {
            for (size_t i = 0; i < G.size(); ++i) {
                const double y = n.value.data[i];
                ga.data[i] += G.data[i] * y * (1.0 - y);
            }
            break;
        }
        case Op::Sqrt: {
            for (size_t i = 0; i < G.size(); ++i) ga.data[i] += G.data[i] * 0.5 / n.value.data[i];
            break;
        }
        case Op::Div: {
            const Matrix& a = nodes_[n.a].value;
            const Matrix& b = nodes_[n.b].value;
            Matrix& gb = nodes_[n.b].grad;
            for (size_t i = 0; i < G.size(); ++i) {
                ga.data[i] += G.data[i] / b.data[i];
                gb.data[i] -= G.data[i] * a.data[i] / (b.data[i] * b.data[i]);
            }
            break;
        }
        case Op::SumAll: {
            const double g = G.data[0];
            for (double& x : ga.data) x += g;
            break;
        }
        case Op::MeanAll: {
            const double g = G.data[0] / static_cast<double>(ga.size());
            for (double& x : ga.data) x += g;
            break;
        }
        case Op::RmsNormRows: {
            const Matrix& a = nodes_[n.a].value;
            const Matrix& g = nodes_[n.b].value;
            Matrix& gg = nodes_[n.b].grad;
            for (int i = 0; i < a.rows; ++i) {
                const double r = n.aux.data[i];
                double inner = 0.0;  // sum_k dy_k * g_k * x_k
                for (int j = 0; j < a.cols; ++j) inner += G(i, j) * g.data[j] * a(i, j);
                for (int j = 0; j < a.cols; ++j) {
                    ga(i, j) += G(i, j) * g.data[j] / r -
                                a(i, j) * inner / (a.cols * r * r * r);
                    gg.data[j] += G(i, j) * a(i, j) / r;
                }
            }
            break;
        }
        case Op::CausalAttention: {
            const Matrix& q = nodes_[n.a].value;
            const Matrix& k = nodes_[n.b].value;
            const Matrix& v = nodes_[n.c].value;
            Matrix& gq = nodes_[n.a].grad;
            Matrix& gk = nodes_[n.b].grad;
            Matrix& gv = nodes_[n.c].grad;
            const int heads = n.i0;
            const int nt = q.rows;
            const int dh = q.cols / heads;
            const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
            std::vector<double> dscore(nt);
            for (int h = 0; h < heads; ++h) {
                const int off = h * dh;
                const double* probs = n.aux.row_ptr(h);
                for (int i = 0; i < nt; ++i) {
                    // dA_ij = sum_e G(i,e) * v(j,e); softmax backward gives dS
                    double row_dot = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        double da = 0.0;
                        for (int e = 0; e < dh; ++e) da += G(i, off + e) * v(j, off + e);
                        dscore[j] = da;
                        row_dot += da * probs[i * nt + j];
                    }
                    for (int j = 0; j <= i; ++j) {
                        const double p = probs[i * nt + j];
                        const double ds = p * (dscore[j] - row_dot) * inv_sqrt;
                        for (int e = 0; e < dh; ++e) {
                            gq(i, off + e) += ds * k(j, off + e);
                            gk(j, off + e) += ds * q(i, off + e);
                        }
                        for (int e = 0; e < dh; ++e) gv(j, off + e) += p * G(i, off + e);
                    }
                }
            }
            break;
        }
        case Op::CeRowsMean: {
            const double g = G.data[0] / n.k1;  // k1 holds the active-row count
            const Matrix& logits = nodes_[n.a].value;
            for (int i = 0; i < logits.rows; ++i) {
                if (n.idx[i] < 0) continue;
                const double* p = n.aux.row_ptr(i);
                double* dst = ga.row_ptr(i);
                for (int j = 0; j < logits.cols; ++j) dst[j] += g * p[j];
                dst[n.idx[i]] -= g;
            }
            break;
        }
        case Op::BceLogitsMean: {
            const Matrix& s = nodes_[n.a].value;
            const double g = G.data[0] / static_cast<double>(s.size());
            for (size_t i = 0; i < s.size(); ++i) {
                const double sig = 1.0 / (1.0 + std::exp(-s.data[i]));
                ga.data[i] += g * (sig - static_cast<double>(n.idx[i]));
            }
            break;
        }
        case Op::TopkMean: {
            const double g = G.data[0] / static_cast<double>(n.idx.size());
            for (int i : n.idx) ga.data[i] += g;
            break;
        }
        case Op::NonTopkSum: {
            std::vector<char> in_top(ga.size(), 0);
            for (int i : n.idx) in_top[i] = 1;
            const double g = G.data[0];
            for (size_t i = 0; i < ga.size(); ++i)
                if (!in_top[i]) ga.data[i] += g;
            break;
        }
    }
}

double finite_diff_check(DiffGraph& g, int loss, double step) {
    if (step <= 0.0) throw ShapeMismatch("finite_diff_check: step must be > 0");
    g.recompute();
    g.backward(loss);
    const auto leaves = g.trainable_leaves();
    std::vector<Matrix> analytic;
    analytic.reserve(leaves.size());
    for (int id : leaves) analytic.push_back(g.grad(id));

    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        Matrix& v = g.leaf_value(leaves[li]);
        for (size_t e = 0; e < v.size(); ++e) {
            const double saved = v.data[e];
            v.data[e] = saved + step;
            g.recompute();
            const double up = g.loss_value(loss);
            v.data[e] = saved - step;
            g.recompute();
            const double dn = g.loss_value(loss);
            v.data[e] = saved;
            const double fd = (up - dn) / (2.0 * step);
            const double an = analytic[li].data[e];
            worst = std::max(worst, std::fabs(an - fd) / (std::fabs(an) + 1e-12));
        }
    }
    g.recompute();
    return worst;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

double LinearSchedule::lr_for_step(long step_1based) const {
    if (total_steps <= 0) return base_lr;
    const long remaining = total_steps - (step_1based - 1);
    return base_lr * static_cast<double>(std::max<long>(remaining, 0)) /
           static_cast<double>(total_steps);
}

AdamState AdamState::make(size_t n, LinearSchedule sched, double weight_decay) {
    AdamState s;
    s.schedule = sched;
    s.weight_decay = weight_decay;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    return s;
}

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads,
               const std::vector<double>* projection) {
    const size_t n = params.size();
    if (grads.size() != n || state.m.size() != n || state.v.size() != n)
        throw ShapeMismatch("adam_step: parameter/gradient/moment sizes differ");
    if (projection && projection->size() != n)
        throw ShapeMismatch("adam_step: projection size differs");

    std::vector<double> g(grads.begin(), grads.end());
    if (projection) {
        const double gp = dot(g, *projection);
        for (size_t i = 0; i < n; ++i) g[i] -= gp * (*projection)[i];
    }

    state.step += 1;
    const double lr = state.schedule.lr_for_step(state.step);
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < n; ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g[i] * g[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        if (state.weight_decay != 0.0) params[i] -= lr * state.weight_decay * params[i];
    }
}

// ---------------------------------------------------------------------------
// spectral
// ---------------------------------------------------------------------------

namespace {

void fix_sign(std::vector<double>& v) {
    for (double x : v) {
        if (std::fabs(x) > 1e-12) {
            if (x < 0.0)
                for (double& y : v) y = -y;
            return;
        }
    }
}

std::vector<double> power_iterate(const Matrix& b) {
    const int d = b.rows;
    Rng rng(0x5ee1a6ull);  // fixed internal seed: deterministic by construction
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    normalize(v, 0.0);

    std::vector<double> next(d);
    for (int it = 0; it < 1000; ++it) {
        for (int i = 0; i < d; ++i) {
            double s = 0.0;
            const double* bi = b.row_ptr(i);
            for (int j = 0; j < d; ++j) s += bi[j] * v[j];
            next[i] = s;
        }
        const double nn = norm(next);
        if (!(nn > 0.0)) throw DegenerateInput("top_principal_component: rank-0 input");
        double delta = 0.0;
        for (int i = 0; i < d; ++i) {
            next[i] /= nn;
            delta = std::max(delta, std::fabs(next[i] - v[i]));
        }
        v = next;
        if (delta < 1e-10) break;
    }
    return v;
}

}  // namespace

std::vector<double> top_principal_component(const Matrix& x) {
    if (x.rows < 2) throw DegenerateInput("top_principal_component: need >= 2 rows");
    double total = 0.0;
    for (double e : x.data) total += e * e;
    if (!(total > 0.0)) throw DegenerateInput("top_principal_component: all-zero input");

    const int d = x.cols;
    Matrix b(d, d);
    for (int r = 0; r < x.rows; ++r) {
        const double* row = x.row_ptr(r);
        for (int i = 0; i < d; ++i) {
            if (row[i] == 0.0) continue;
            for (int j = 0; j < d; ++j) b(i, j) += row[i] * row[j];
        }
    }
    auto v = power_iterate(b);
    fix_sign(v);
    return v;
}

std::vector<std::vector<double>> top_principal_components(const Matrix& x, int n) {
    if (x.rows < 2) throw DegenerateInput("top_principal_components: need >= 2 rows");
    const int d = x.cols;
    Matrix b(d, d);
    for (int r = 0; r < x.rows; ++r) {
        const double* row = x.row_ptr(r);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) b(i, j) += row[i] * row[j];
    }
    double trace0 = 0.0;
    for (int i = 0; i < d; ++i) trace0 += b(i, i);
    if (!(trace0 > 0.0)) throw DegenerateInput("top_principal_components: all-zero input");

    std::vector<std::vector<double>> out;
    for (int c = 0; c < n; ++c) {
        double trace = 0.0;
        for (int i = 0; i < d; ++i) trace += b(i, i);
        std::vector<double> v;
        if (trace > 1e-12 * trace0) {
            v = power_iterate(b);
            std::vector<double> bv(d, 0.0);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) bv[i] += b(i, j) * v[j];
            const double lambda = dot(v, bv);
            for (int i = 0; i < d; ++i)
                for (int j = 0; j < d; ++j) b(i, j) -= lambda * v[i] * v[j];
        } else {
            // exhausted the variance: continue with a deterministic unit vector
            // orthogonal to the components found so far
            for (int axis = 0; axis < d && v.empty(); ++axis) {
                std::vector<double> cand(d, 0.0);
                cand[axis] = 1.0;
                for (const auto& prev : out) {
                    const double p = dot(cand, prev);
                    for (int i = 0; i < d; ++i) cand[i] -= p * prev[i];
                }
                if (norm(cand) > 1e-6) {
                    normalize(cand, 0.0);
                    v = std::move(cand);
                }
            }
            if (v.empty())
                throw DegenerateInput("top_principal_components: dimension exhausted");
        }
        fix_sign(v);
        out.push_back(std::move(v));
    }
    return out;
}

}  // namespace steerlab::numkit
