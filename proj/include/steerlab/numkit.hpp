#pragma once

// Dense row-major matrices, a deterministic RNG, reverse-mode autodiff over a
// tensor-op tape, Adam with an optional gradient projection, and the spectral
// routine everything else builds on.

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace steerlab::numkit {

// ---------------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------------

struct DegenerateInput : std::runtime_error {
    explicit DegenerateInput(const std::string& what) : std::runtime_error(what) {}
};
struct NonScalarLoss : std::runtime_error {
    explicit NonScalarLoss(const std::string& what) : std::runtime_error(what) {}
};
struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;  // row-major, rows*cols

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Matrix(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != static_cast<size_t>(r) * c)
            throw ShapeMismatch("Matrix: data length != rows*cols");
    }

    double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    double* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    static Matrix row_vector(std::span<const double> v) {
        Matrix m(1, static_cast<int>(v.size()));
        std::copy(v.begin(), v.end(), m.data.begin());
        return m;
    }
    static Matrix scalar(double v) {
        Matrix m(1, 1);
        m.data[0] = v;
        return m;
    }
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
// Scales v to unit norm in place; throws DegenerateInput below `tol`.
void normalize(std::vector<double>& v, double tol = 1e-8);

// C := A * B (row-major, naive ikj).
Matrix matmul(const Matrix& a, const Matrix& b);
// C := A * B^T.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// Shared forward kernels. The autodiff tape and the plain model forward both
// call these, so the two paths stay bit-identical.
Matrix causal_attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, int heads,
                                Matrix* probs_out = nullptr);
Matrix rmsnorm_rows_forward(const Matrix& x, std::span<const double> gain, double eps,
                            Matrix* rms_out = nullptr);

double gelu_tanh(double x);
double gelu_tanh_grad(double x);

// ---------------------------------------------------------------------------
// deterministic RNG (SplitMix64 core; identical streams on every platform)
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64();
    // uniform in [0, 1)
    double uniform();
    // uniform integer in [0, n)
    uint64_t below(uint64_t n);
    // standard normal, Box-Muller with cached spare
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Derive an independent stream; labels make call sites self-documenting.
    Rng fork(std::string_view label) const;
    Rng fork(uint64_t salt) const;

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// 64-bit FNV-1a over a byte range; used for content checksums and seed derivation.
uint64_t fnv1a(const void* data, size_t len, uint64_t h = 1469598103934665603ull);
uint64_t fnv1a(std::string_view s);

// ---------------------------------------------------------------------------
// DiffGraph: reverse-mode autodiff over a tape of matrix ops
// ---------------------------------------------------------------------------

enum class Op : uint8_t {
    Leaf,
    GatherRows,       // rows of a selected by idx
    MatMul,           // a[m,k] * b[k,n]
    MatMulNT,         // a[m,k] * b[n,k]^T
    Add,              // elementwise, same shape
    Sub,
    Mul,
    Affine,           // k1*a + k0
    AddRowVec,        // a[n,d] + broadcast b[1,d]
    AddScaledRowVec,  // a[n,d] + s[1,1] * broadcast c[1,d]
    Relu,
    Gelu,             // tanh approximation
    Sigmoid,
    Sqrt,
    Div,              // elementwise a/b, same shape
    SumAll,           // -> 1x1
    MeanAll,          // -> 1x1
    RmsNormRows,      // per-row rms norm of a, scaled by gain b[1,d]
    CausalAttention,  // a=Q, b=K, c=V, i0=heads -> multi-head causal attention
    CeRowsMean,       // a=logits[n,V], idx=targets (-1 masks a row) -> 1x1 mean NLL
    BceLogitsMean,    // a=logits[n,1], idx=labels {0,1} -> 1x1 mean BCE
    TopkMean,         // a[n,1] -> 1x1 mean of the k largest entries
    NonTopkSum,       // a[n,1] -> 1x1 sum of entries outside the top-k set
};

class DiffGraph {
public:
    struct Node {
        Op op = Op::Leaf;
        Matrix value;
        Matrix grad;
        int a = -1, b = -1, c = -1;  // input node ids
        double k0 = 0.0, k1 = 0.0;   // scalar parameters
        int i0 = 0;                  // integer parameter (heads, k)
        std::vector<int> idx;        // row indices / targets / labels; also top-k selection
        Matrix aux;                  // op scratch persisted for backward (probs, rms, ...)
        bool trainable = false;
        std::string name;
    };

    int leaf(Matrix v, bool trainable = false, std::string name = {});

    int gather_rows(int a, std::vector<int> idx);
    int matmul(int a, int b);
    int matmul_nt(int a, int b);
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, double k) { return affine(a, k, 0.0); }
    int affine(int a, double k1, double k0);
    int add_rowvec(int a, int b);
    int add_scaled_rowvec(int a, int s, int w);
    int relu(int a);
    int gelu(int a);
    int sigmoid(int a);
    int sqrt_ew(int a);
    int div_ew(int a, int b);
    int sum_all(int a);
    int mean_all(int a);
    int rmsnorm_rows(int a, int gain, double eps = 1e-6);
    int causal_attention(int q, int k, int v, int heads);
    int ce_rows_mean(int logits, std::vector<int> targets);
    int bce_logits_mean(int logits, std::vector<int> labels);
    int topk_mean(int a, int k);
    int nontopk_sum(int a, int k);

    const Matrix& value(int id) const { return nodes_[id].value; }
    const Matrix& grad(int id) const { return nodes_[id].grad; }
    Matrix& leaf_value(int id);
    const Node& node(int id) const { return nodes_[id]; }
    size_t node_count() const { return nodes_.size(); }
    std::vector<int> trainable_leaves() const;

    // Re-runs every non-leaf forward in creation order (used after editing leaves).
    void recompute();
    void zero_grads();
    // Reverse-mode sweep from a scalar loss node. Deterministic accumulation:
    // nodes are visited in strict reverse creation order.
    void backward(int loss);

    double loss_value(int loss) const;

private:
    int push(Node n);
    void forward_node(int id);
    void backward_node(int id);

    std::vector<Node> nodes_;
};

// Max over trainable-leaf elements of |analytic - central difference| /
// (|analytic| + 1e-12). Recomputes the forward pass around each perturbation;
// the graph is restored on return.
double finite_diff_check(DiffGraph& g, int loss, double step);

// ---------------------------------------------------------------------------
// Adam with linear LR decay and optional parallel-gradient removal
// ---------------------------------------------------------------------------

struct LinearSchedule {
    double base_lr = 1e-3;
    long total_steps = 1;  // lr decays linearly from base_lr to base_lr/total_steps
    double lr_for_step(long step_1based) const;
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW); 0 unless configured
    LinearSchedule schedule;
    long step = 0;
    std::vector<double> m;  // first moment
    std::vector<double> v;  // second moment

    static AdamState make(size_t n, LinearSchedule sched, double weight_decay = 0.0);
};

// One optimizer step. When `projection` is given it must be unit-norm; the
// gradient component parallel to it is removed before the moment updates.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads,
               const std::vector<double>* projection = nullptr);

// ---------------------------------------------------------------------------
// spectral
// ---------------------------------------------------------------------------

// Unit-norm v maximizing ||Xv||^2 by power iteration on X^T X
// (max 1000 iterations, tol 1e-10 on the eigenvector change).
// Sign convention: first entry with |v_i| > 1e-12 is positive.
std::vector<double> top_principal_component(const Matrix& x);

// Top `n` components by power iteration with deflation, same conventions.
std::vector<std::vector<double>> top_principal_components(const Matrix& x, int n);

}  // namespace steerlab::numkit
