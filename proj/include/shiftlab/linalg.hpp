#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace shiftlab {

using Vec = std::vector<double>;

// Dense row-major matrix. Small problems only; no views, no expression
// templates.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    Vec row(std::size_t i) const { return Vec(data.begin() + i * cols, data.begin() + (i + 1) * cols); }
};

inline double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline double distance(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline Vec matvec(const Matrix& m, const Vec& x) {
    Vec y(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double s = 0.0;
        const double* row = &m.data[i * m.cols];
        for (std::size_t j = 0; j < m.cols; ++j) s += row[j] * x[j];
        y[i] = s;
    }
    return y;
}

inline Vec column_means(const Matrix& x) {
    Vec mean(x.cols, 0.0);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) mean[j] += x(i, j);
    for (double& m : mean) m /= static_cast<double>(x.rows);
    return mean;
}

// Sample covariance with n-1 denominator.
inline Matrix sample_covariance(const Matrix& x, const Vec& mean) {
    if (x.rows < 2) throw std::invalid_argument("sample_covariance: need at least 2 rows");
    Matrix cov(x.cols, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t a = 0; a < x.cols; ++a) {
            double da = x(i, a) - mean[a];
            for (std::size_t b = a; b < x.cols; ++b) cov(a, b) += da * (x(i, b) - mean[b]);
        }
    }
    double denom = static_cast<double>(x.rows - 1);
    for (std::size_t a = 0; a < x.cols; ++a)
        for (std::size_t b = a; b < x.cols; ++b) {
            cov(a, b) /= denom;
            cov(b, a) = cov(a, b);
        }
    return cov;
}

// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
inline Matrix cholesky_factor(const Matrix& a) {
    std::size_t n = a.rows;
    Matrix l(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j) {
                if (s <= 0.0) throw std::runtime_error("cholesky_factor: matrix not positive-definite");
                l(i, i) = std::sqrt(s);
            } else {
                l(i, j) = s / l(j, j);
            }
        }
    }
    return l;
}

// Solves L y = b with L lower-triangular.
inline Vec forward_solve(const Matrix& l, const Vec& b) {
    std::size_t n = l.rows;
    Vec y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t j = 0; j < i; ++j) s -= l(i, j) * y[j];
        y[i] = s / l(i, i);
    }
    return y;
}

// Solves L^T x = y with L lower-triangular.
inline Vec backward_solve_transposed(const Matrix& l, const Vec& y) {
    std::size_t n = l.rows;
    Vec x(n);
    for (std::size_t i = n; i-- > 0;) {
        double s = y[i];
        for (std::size_t j = i + 1; j < n; ++j) s -= l(j, i) * x[j];
        x[i] = s / l(i, i);
    }
    return x;
}

// General dense solve via Gaussian elimination with partial pivoting.
inline Vec solve_linear(Matrix a, Vec b) {
    std::size_t n = a.rows;
    if (a.cols != n || b.size() != n) throw std::invalid_argument("solve_linear: shape mismatch");
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(a(r, col)) > std::fabs(a(pivot, col))) pivot = r;
        if (std::fabs(a(pivot, col)) < 1e-14) throw std::runtime_error("solve_linear: singular system");
        if (pivot != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a(pivot, j), a(col, j));
            std::swap(b[pivot], b[col]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            double f = a(r, col) / a(col, col);
            for (std::size_t j = col; j < n; ++j) a(r, j) -= f * a(col, j);
            b[r] -= f * b[col];
        }
    }
    Vec x(n);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t j = i + 1; j < n; ++j) s -= a(i, j) * x[j];
        x[i] = s / a(i, i);
    }
    return x;
}

struct EigenDecomposition {
    Vec values;      // non-increasing
    Matrix vectors;  // row i is the eigenvector of values[i]
};

// Cyclic Jacobi eigendecomposition for symmetric matrices. Converges to
// machine precision for the small dense problems used here (tolerance
// 1e-10 relative off-diagonal mass; hard cap of 100 sweeps).
inline EigenDecomposition jacobi_eigen_symmetric(Matrix a) {
    std::size_t n = a.rows;
    if (a.cols != n) throw std::invalid_argument("jacobi_eigen_symmetric: matrix not square");
    Matrix v(n, n);
    for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) scale += a(i, j) * a(i, j);
    scale = std::sqrt(scale);
    const double tol = 1e-10 * (scale > 0.0 ? scale : 1.0);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a(i, j) * a(i, j);
        if (std::sqrt(off) <= tol) break;

        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::fabs(a(p, q)) <= 1e-300) continue;
                double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    EigenDecomposition out;
    out.values.resize(n);
    out.vectors = Matrix(n, n);
    for (std::size_t r = 0; r < n; ++r) {
        out.values[r] = a(order[r], order[r]);
        for (std::size_t k = 0; k < n; ++k) out.vectors(r, k) = v(k, order[r]);
    }
    return out;
}

// Order-statistic quantile with linear interpolation at position (n-1)*f.
// The single quantile rule used across the project (percentile tables,
// bootstrap CIs, pair-mining contrast filters).
inline double quantile_sorted(const Vec& sorted, double f) {
    if (sorted.empty()) throw std::invalid_argument("quantile_sorted: empty input");
    if (f <= 0.0) return sorted.front();
    if (f >= 1.0) return sorted.back();
    double pos = f * static_cast<double>(sorted.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double mean_of(const Vec& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double sample_stddev(const Vec& v) {
    if (v.size() < 2) throw std::invalid_argument("sample_stddev: need at least 2 values");
    double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace shiftlab
