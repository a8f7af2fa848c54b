#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace asdlab {

/// Dense row-major matrix of doubles. All model math runs in double so the
/// finite-difference checks have headroom.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> d;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), d(static_cast<std::size_t>(r) * c, 0.0) {
        if (r < 0 || c < 0) throw std::invalid_argument("Mat: negative dimension");
    }

    static Mat filled(int r, int c, double v) {
        Mat m(r, c);
        for (auto& x : m.d) x = v;
        return m;
    }

    double& operator()(int r, int c) { return d[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return d[static_cast<std::size_t>(r) * cols + c]; }

    double* row(int r) { return d.data() + static_cast<std::size_t>(r) * cols; }
    const double* row(int r) const { return d.data() + static_cast<std::size_t>(r) * cols; }

    std::size_t size() const { return d.size(); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double x : d)
            if (!std::isfinite(x)) return false;
        return true;
    }

    void fill(double v) {
        for (auto& x : d) x = v;
    }
};

inline void check_shape(const Mat& a, int rows, int cols, const char* what) {
    if (a.rows != rows || a.cols != cols)
        throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(rows) + "x" +
                                    std::to_string(cols) + ", got " + std::to_string(a.rows) + "x" +
                                    std::to_string(a.cols));
}

/// C += A * B (or C = A * B when accumulate is false). ikj order so the inner
/// loop runs over contiguous rows of B and C.
inline void matmul_nn(const Mat& a, const Mat& b, Mat& c, bool accumulate = false) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul_nn: inner dimension mismatch");
    if (c.rows != a.rows || c.cols != b.cols) c = Mat(a.rows, b.cols);
    if (!accumulate) c.fill(0.0);
    const int n = a.rows, k = a.cols, m = b.cols;
    for (int i = 0; i < n; ++i) {
        double* __restrict__ ci = c.row(i);
        const double* __restrict__ ai = a.row(i);
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* __restrict__ bp = b.row(p);
            for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
}

/// C += A * B^T.
inline void matmul_nt(const Mat& a, const Mat& b, Mat& c, bool accumulate = false) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
    if (c.rows != a.rows || c.cols != b.rows) c = Mat(a.rows, b.rows);
    if (!accumulate) c.fill(0.0);
    const int n = a.rows, k = a.cols, m = b.rows;
    for (int i = 0; i < n; ++i) {
        const double* __restrict__ ai = a.row(i);
        double* __restrict__ ci = c.row(i);
        for (int j = 0; j < m; ++j) {
            const double* __restrict__ bj = b.row(j);
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

/// C += A^T * B.
inline void matmul_tn(const Mat& a, const Mat& b, Mat& c, bool accumulate = false) {
    if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: inner dimension mismatch");
    if (c.rows != a.cols || c.cols != b.cols) c = Mat(a.cols, b.cols);
    if (!accumulate) c.fill(0.0);
    const int n = a.rows, k = a.cols, m = b.cols;
    for (int p = 0; p < n; ++p) {
        const double* __restrict__ ap = a.row(p);
        const double* __restrict__ bp = b.row(p);
        for (int i = 0; i < k; ++i) {
            const double av = ap[i];
            if (av == 0.0) continue;
            double* __restrict__ ci = c.row(i);
            for (int j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
}

inline Mat transpose(const Mat& a) {
    Mat t(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

inline double row_l2_norm(const Mat& a, int r) {
    const double* p = a.row(r);
    double s = 0.0;
    for (int j = 0; j < a.cols; ++j) s += p[j] * p[j];
    return std::sqrt(s);
}

} // namespace asdlab
