#ifndef MOELORA_MATRIX_HPP
#define MOELORA_MATRIX_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "moelora/rng.hpp"

namespace moelora {

/// Dense row-major matrix of doubles with value semantics. All operations on
/// it are single-threaded and accumulate in a fixed order, so results are
/// bit-identical across runs for identical inputs.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw std::invalid_argument("Matrix: data length does not match rows*cols");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    const double& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    Matrix& operator+=(const Matrix& o) {
        require_same_shape(o, "operator+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same_shape(o, "operator-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend Matrix operator+(Matrix a, const Matrix& b) { a += b; return a; }
    friend Matrix operator-(Matrix a, const Matrix& b) { a -= b; return a; }
    friend Matrix operator*(Matrix a, double s) { a *= s; return a; }
    friend Matrix operator*(double s, Matrix a) { a *= s; return a; }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

    std::vector<double> column(std::size_t j) const {
        std::vector<double> out(rows_);
        for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
        return out;
    }

private:
    void require_same_shape(const Matrix& o, const char* what) const {
        if (rows_ != o.rows_ || cols_ != o.cols_)
            throw std::invalid_argument(std::string(what) + ": shape mismatch");
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline std::ostream& operator<<(std::ostream& os, const Matrix& m) {
    os << m.rows() << "x" << m.cols() << " [";
    for (std::size_t i = 0; i < m.rows(); ++i) {
        os << (i ? "; " : "");
        for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
    }
    return os << "]";
}

inline bool all_finite(const Matrix& m) {
    for (double v : m.data())
        if (!std::isfinite(v)) return false;
    return true;
}

inline void require_finite(const Matrix& m, const char* what) {
    if (!all_finite(m))
        throw std::runtime_error(std::string(what) + ": non-finite entry");
}

/// Standard product; each output entry accumulates k in ascending order.
inline Matrix mat_mul(const Matrix& lhs, const Matrix& rhs) {
    if (lhs.cols() != rhs.rows())
        throw std::invalid_argument("mat_mul: inner dimensions disagree");
    Matrix out(lhs.rows(), rhs.cols());
    for (std::size_t i = 0; i < lhs.rows(); ++i)
        for (std::size_t k = 0; k < lhs.cols(); ++k) {
            const double a = lhs(i, k);
            for (std::size_t j = 0; j < rhs.cols(); ++j)
                out(i, j) += a * rhs(k, j);
        }
    require_finite(out, "mat_mul");
    return out;
}

inline Matrix operator*(const Matrix& a, const Matrix& b) { return mat_mul(a, b); }

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j)
            out(j, i) = m(i, j);
    return out;
}

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data()) s += v * v;
    return std::sqrt(s);
}

inline double max_abs(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data()) s = std::max(s, std::abs(v));
    return s;
}

inline double trace(const Matrix& m) {
    if (m.rows() != m.cols())
        throw std::invalid_argument("trace: square matrix required");
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) s += m(i, i);
    return s;
}

/// (m + damping*I)^-1 by Gauss-Jordan with partial pivoting. Intended for the
/// small r x r factors; refuses pivots below 1e-300.
inline Matrix small_inverse(const Matrix& m, double damping) {
    if (m.rows() != m.cols())
        throw std::invalid_argument("small_inverse: square matrix required");
    if (damping < 0.0)
        throw std::invalid_argument("small_inverse: negative damping");
    const std::size_t n = m.rows();
    Matrix aug(n, 2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) aug(i, j) = m(i, j);
        aug(i, i) += damping;
        aug(i, n + i) = 1.0;
    }
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        double best = std::abs(aug(col, col));
        for (std::size_t row = col + 1; row < n; ++row) {
            const double v = std::abs(aug(row, col));
            if (v > best) { best = v; pivot = row; }
        }
        if (best < 1e-300)
            throw std::runtime_error("small_inverse: singular matrix (pivot below 1e-300)");
        if (pivot != col)
            for (std::size_t j = 0; j < 2 * n; ++j)
                std::swap(aug(col, j), aug(pivot, j));
        const double scale = aug(col, col);
        for (std::size_t j = 0; j < 2 * n; ++j) aug(col, j) /= scale;
        for (std::size_t row = 0; row < n; ++row) {
            if (row == col) continue;
            const double factor = aug(row, col);
            if (factor == 0.0) continue;
            for (std::size_t j = 0; j < 2 * n; ++j)
                aug(row, j) -= factor * aug(col, j);
        }
    }
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out(i, j) = aug(i, n + j);
    require_finite(out, "small_inverse");
    return out;
}

/// Max-subtracted softmax; entries positive, sum 1 within 1e-12.
inline std::vector<double> softmax(const std::vector<double>& v) {
    if (v.empty())
        throw std::invalid_argument("softmax: empty input");
    for (double x : v)
        if (!std::isfinite(x))
            throw std::invalid_argument("softmax: non-finite input");
    const double m = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        sum += out[i];
    }
    for (double& x : out) x /= sum;
    return out;
}

/// Indices of the k largest entries, ties broken by lower index; the result
/// is sorted ascending.
inline std::vector<std::size_t> top_k_select(const std::vector<double>& v, std::size_t k) {
    if (k < 1 || k > v.size())
        throw std::invalid_argument("top_k_select: k out of range");
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// i.i.d. N(0, sigma^2) entries drawn row-major from the stream.
inline Matrix seeded_gaussian(RngStream& rng, std::size_t rows, std::size_t cols, double sigma) {
    if (!(sigma >= 0.0))
        throw std::invalid_argument("seeded_gaussian: sigma must be >= 0");
    Matrix out(rows, cols);
    for (double& v : out.data()) v = sigma * rng.next_gaussian();
    return out;
}

} // namespace moelora

#endif // MOELORA_MATRIX_HPP
