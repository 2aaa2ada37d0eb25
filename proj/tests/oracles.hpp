#pragma once

// Test-only oracles, kept independent of the implementation paths they check:
// a dense Jacobi eigensolver, O(P*N) pairwise AUROC, and a hand-composed
// single Adam step.

#include <algorithm>
#include <cmath>
#include <vector>

#include "steerlab/numkit.hpp"

namespace oracles {

// Jacobi eigendecomposition of a symmetric matrix. Returns eigenvalues and the
// eigenvector matrix (columns are eigenvectors), sorted by eigenvalue descending.
inline void jacobi_eigh(steerlab::numkit::Matrix a, std::vector<double>& eigvals,
                        steerlab::numkit::Matrix& eigvecs) {
    using steerlab::numkit::Matrix;
    const int n = a.rows;
    eigvecs = Matrix(n, n);
    for (int i = 0; i < n; ++i) eigvecs(i, i) = 1.0;

    for (int sweep = 0; sweep < 200; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::fabs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = a(p, i), aqi = a(q, i);
                    a(p, i) = c * api - s * aqi;
                    a(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = eigvecs(i, p), viq = eigvecs(i, q);
                    eigvecs(i, p) = c * vip - s * viq;
                    eigvecs(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) > a(j, j); });
    eigvals.resize(n);
    Matrix sorted(n, n);
    for (int c = 0; c < n; ++c) {
        eigvals[c] = a(order[c], order[c]);
        for (int r = 0; r < n; ++r) sorted(r, c) = eigvecs(r, order[c]);
    }
    eigvecs = sorted;
}

// Top eigenvector of X^T X via the Jacobi oracle.
inline std::vector<double> top_eigvec_oracle(const steerlab::numkit::Matrix& x) {
    using steerlab::numkit::Matrix;
    const int d = x.cols;
    Matrix b(d, d);
    for (int r = 0; r < x.rows; ++r)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) b(i, j) += x(r, i) * x(r, j);
    std::vector<double> vals;
    Matrix vecs;
    jacobi_eigh(b, vals, vecs);
    std::vector<double> v(d);
    for (int i = 0; i < d; ++i) v[i] = vecs(i, 0);
    return v;
}

inline double vec_dist_up_to_sign(const std::vector<double>& a, const std::vector<double>& b) {
    double d_plus = 0.0, d_minus = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        d_plus = std::max(d_plus, std::fabs(a[i] - b[i]));
        d_minus = std::max(d_minus, std::fabs(a[i] + b[i]));
    }
    return std::min(d_plus, d_minus);
}

// Brute-force pairwise AUROC, ties as 0.5.
inline double auroc_pairwise(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    long p = 0, n = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 1) {
            ++p;
            for (size_t j = 0; j < scores.size(); ++j) {
                if (labels[j] != 0) continue;
                if (scores[i] > scores[j])
                    wins += 1.0;
                else if (scores[i] == scores[j])
                    wins += 0.5;
            }
        } else {
            ++n;
        }
    }
    return wins / (static_cast<double>(p) * static_cast<double>(n));
}

// One Adam step composed by hand from the update formulas (fresh state).
inline std::vector<double> adam_single_step_oracle(std::vector<double> params,
                                                   const std::vector<double>& grad, double lr,
                                                   double beta1 = 0.9, double beta2 = 0.999,
                                                   double eps = 1e-8) {
    for (size_t i = 0; i < params.size(); ++i) {
        const double m = (1.0 - beta1) * grad[i];
        const double v = (1.0 - beta2) * grad[i] * grad[i];
        const double mhat = m / (1.0 - beta1);
        const double vhat = v / (1.0 - beta2);
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    return params;
}

}  // namespace oracles
