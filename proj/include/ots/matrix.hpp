// Dense row-major f64 matrix plus the kernel set every module builds on.
// Matrices are immutable values once returned from a kernel; every kernel
// validates that its result is finite.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ots/parallel.hpp"

namespace ots {

using index_t = std::int64_t;

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what), offset(0) {}
    FormatError(const std::string& what, std::uint64_t at)
        : std::runtime_error(what + " at offset " + std::to_string(at)), offset(at) {}
    std::uint64_t offset;
};

namespace detail {
struct Uninit {};
}  // namespace detail

class Matrix {
public:
    Matrix() = default;

    Matrix(index_t rows, index_t cols)
        : rows_(rows), cols_(cols), size_(static_cast<std::size_t>(checked_size(rows, cols))),
          data_(new double[size_]()) {}

    // Kernel-internal: storage left uninitialized, caller must write every
    // element before the matrix escapes.
    Matrix(index_t rows, index_t cols, detail::Uninit)
        : rows_(rows), cols_(cols), size_(static_cast<std::size_t>(checked_size(rows, cols))),
          data_(std::make_unique_for_overwrite<double[]>(size_)) {}

    Matrix(index_t rows, index_t cols, const std::vector<double>& data)
        : Matrix(rows, cols, detail::Uninit{}) {
        if (size_ != data.size()) {
            throw ShapeError("matrix data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_string(rows, cols));
        }
        std::copy(data.begin(), data.end(), data_.get());
        for (std::size_t i = 0; i < size_; ++i) {
            if (!std::isfinite(data_[i])) {
                throw NumericError("matrix constructed with non-finite entry");
            }
        }
    }

    Matrix(const Matrix& o)
        : rows_(o.rows_), cols_(o.cols_), size_(o.size_),
          data_(o.size_ ? std::make_unique_for_overwrite<double[]>(o.size_) : nullptr) {
        std::copy(o.data_.get(), o.data_.get() + size_, data_.get());
    }

    Matrix& operator=(const Matrix& o) {
        if (this != &o) *this = Matrix(o);
        return *this;
    }

    Matrix(Matrix&& o) noexcept
        : rows_(o.rows_), cols_(o.cols_), size_(o.size_), data_(std::move(o.data_)) {
        o.rows_ = o.cols_ = 0;
        o.size_ = 0;
    }

    Matrix& operator=(Matrix&& o) noexcept {
        rows_ = o.rows_;
        cols_ = o.cols_;
        size_ = o.size_;
        data_ = std::move(o.data_);
        o.rows_ = o.cols_ = 0;
        o.size_ = 0;
        return *this;
    }

    static Matrix zeros(index_t rows, index_t cols) { return Matrix(rows, cols); }

    static Matrix constant(index_t rows, index_t cols, double v) {
        Matrix m(rows, cols);
        m.fill(v);
        return m;
    }

    static Matrix identity(index_t n) {
        Matrix m(n, n);
        for (index_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const index_t r = static_cast<index_t>(rows.size());
        if (r == 0) throw ShapeError("from_rows: empty row list");
        const index_t c = static_cast<index_t>(rows.begin()->size());
        Matrix m(r, c);
        index_t i = 0;
        for (const auto& row : rows) {
            if (static_cast<index_t>(row.size()) != c) throw ShapeError("from_rows: ragged rows");
            index_t j = 0;
            for (double v : row) m(i, j++) = v;
            ++i;
        }
        return m;
    }

    index_t rows() const { return rows_; }
    index_t cols() const { return cols_; }
    index_t size() const { return rows_ * cols_; }

    double& operator()(index_t r, index_t c) { return data_[static_cast<std::size_t>(r * cols_ + c)]; }
    double operator()(index_t r, index_t c) const { return data_[static_cast<std::size_t>(r * cols_ + c)]; }

    double& at(index_t r, index_t c) {
        check_index(r, c);
        return (*this)(r, c);
    }
    double at(index_t r, index_t c) const {
        check_index(r, c);
        return (*this)(r, c);
    }

    double* data() { return data_.get(); }
    const double* data() const { return data_.get(); }

    void fill(double v) { std::fill(data_.get(), data_.get() + size_, v); }

    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    // v - v is zero only for finite v; the form vectorizes well.
    bool all_finite() const {
        bool ok = true;
        for (std::size_t i = 0; i < size_; ++i) ok &= (data_[i] - data_[i] == 0.0);
        return ok;
    }

    static std::string shape_string(index_t r, index_t c) {
        return std::to_string(r) + "x" + std::to_string(c);
    }
    std::string shape_string() const { return shape_string(rows_, cols_); }

private:
    static index_t checked_size(index_t rows, index_t cols) {
        if (rows <= 0 || cols <= 0) {
            throw ShapeError("matrix dimensions must be positive, got " + shape_string(rows, cols));
        }
        return rows * cols;
    }

    void check_index(index_t r, index_t c) const {
        if (r < 0 || r >= rows_ || c < 0 || c >= cols_) {
            throw ShapeError("index (" + std::to_string(r) + "," + std::to_string(c) +
                             ") out of range for " + shape_string());
        }
    }

    index_t rows_ = 0;
    index_t cols_ = 0;
    std::size_t size_ = 0;
    std::unique_ptr<double[]> data_;
};

namespace detail {

using EMap = Eigen::Map<Eigen::MatrixXd>;
using ECMap = Eigen::Map<const Eigen::MatrixXd>;

inline void require_finite(const Matrix& m, const char* op) {
    if (!m.all_finite()) throw NumericError(std::string(op) + " produced a non-finite value");
}

// Output rows are split into fixed blocks whenever the product is large; the
// split depends only on the shape so a run with any pool width produces the
// same bits.
constexpr index_t kRowBlock = 256;
constexpr double kBlockMinWork = 2.0 * 1024 * 1024;

template <typename Fn>
inline void gemm_rows(index_t m, double work, Fn&& block) {
    if (m >= 2 * kRowBlock && work >= kBlockMinWork) {
        const index_t nblocks = (m + kRowBlock - 1) / kRowBlock;
        parallel_for(nblocks, [&](index_t bi) {
            const index_t r0 = bi * kRowBlock;
            block(r0, std::min(kRowBlock, m - r0));
        });
    } else {
        block(0, m);
    }
}

enum class MatOp { NN, TN, NT };

// Dimensions of op(a) * op(b) with conformance checking.
inline std::array<index_t, 3> product_dims(const Matrix& a, const Matrix& b, MatOp op,
                                           const char* name) {
    const index_t m = op == MatOp::TN ? a.cols() : a.rows();
    const index_t k = op == MatOp::TN ? a.rows() : a.cols();
    const index_t kb = op == MatOp::NT ? b.cols() : b.rows();
    const index_t n = op == MatOp::NT ? b.rows() : b.cols();
    if (k != kb) {
        throw ShapeError(std::string(name) + ": inner dimensions disagree, " + a.shape_string() +
                         " by " + b.shape_string());
    }
    return {m, k, n};
}

// c (m x n, row-major) = or += op(a) * op(b). Row-major buffers seen as
// column-major are the transposes, so the product runs as c^T = op(b)^T
// op(a)^T on Eigen's native layout.
template <bool Accumulate>
inline void gemm_into(Matrix& c, const Matrix& a, const Matrix& b, MatOp op, index_t m, index_t k,
                      index_t n) {
    ECMap at = op == MatOp::TN ? ECMap(a.data(), m, k) : ECMap(a.data(), k, m);
    ECMap bt = op == MatOp::NT ? ECMap(b.data(), k, n) : ECMap(b.data(), n, k);
    EMap ct(c.data(), n, m);
    gemm_rows(m, double(m) * k * n, [&](index_t r0, index_t len) {
        auto dst = ct.middleCols(r0, len);
        if (op == MatOp::TN) {
            if constexpr (Accumulate) dst.noalias() += bt * at.transpose().middleCols(r0, len);
            else dst.noalias() = bt * at.transpose().middleCols(r0, len);
        } else if (op == MatOp::NT) {
            if constexpr (Accumulate) dst.noalias() += bt.transpose() * at.middleCols(r0, len);
            else dst.noalias() = bt.transpose() * at.middleCols(r0, len);
        } else {
            if constexpr (Accumulate) dst.noalias() += bt * at.middleCols(r0, len);
            else dst.noalias() = bt * at.middleCols(r0, len);
        }
    });
}

inline Matrix gemm(const Matrix& a, const Matrix& b, MatOp op, const char* name) {
    const auto [m, k, n] = product_dims(a, b, op, name);
    Matrix c(m, n, Uninit{});
    gemm_into<false>(c, a, b, op, m, k, n);
    require_finite(c, name);
    return c;
}

// dst += op(a) * op(b); the unchecked accumulate path backward rules use.
inline void add_gemm(Matrix& dst, const Matrix& a, const Matrix& b, MatOp op) {
    const auto [m, k, n] = product_dims(a, b, op, "add_gemm");
    if (dst.rows() != m || dst.cols() != n) {
        throw ShapeError("add_gemm: destination " + dst.shape_string() + " cannot hold " +
                         Matrix::shape_string(m, n));
    }
    gemm_into<true>(dst, a, b, op, m, k, n);
}

}  // namespace detail

// c = a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    return detail::gemm(a, b, detail::MatOp::NN, "matmul");
}

// c = a^T * b  (a: k x m, b: k x n, c: m x n)
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    return detail::gemm(a, b, detail::MatOp::TN, "matmul_tn");
}

// c = a * b^T  (a: m x k, b: n x k, c: m x n)
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    return detail::gemm(a, b, detail::MatOp::NT, "matmul_nt");
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows(), detail::Uninit{});
    for (index_t i = 0; i < a.rows(); ++i)
        for (index_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("add: shape mismatch, " + a.shape_string() + " vs " + b.shape_string());
    }
    Matrix c(a.rows(), a.cols(), detail::Uninit{});
    for (index_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] + b.data()[i];
    detail::require_finite(c, "add");
    return c;
}

inline Matrix mul(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("mul: shape mismatch, " + a.shape_string() + " vs " + b.shape_string());
    }
    Matrix c(a.rows(), a.cols(), detail::Uninit{});
    for (index_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * b.data()[i];
    detail::require_finite(c, "mul");
    return c;
}

inline Matrix scale(const Matrix& a, double s) {
    Matrix c(a.rows(), a.cols(), detail::Uninit{});
    for (index_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] * s;
    detail::require_finite(c, "scale");
    return c;
}

// Column-wise softmax with per-column max subtraction.
inline Matrix softmax_cols(const Matrix& a) {
    Matrix p(a.rows(), a.cols(), detail::Uninit{});
    for (index_t j = 0; j < a.cols(); ++j) {
        double mx = -std::numeric_limits<double>::infinity();
        for (index_t i = 0; i < a.rows(); ++i) mx = std::max(mx, a(i, j));
        double sum = 0.0;
        for (index_t i = 0; i < a.rows(); ++i) {
            const double e = std::exp(a(i, j) - mx);
            p(i, j) = e;
            sum += e;
        }
        for (index_t i = 0; i < a.rows(); ++i) p(i, j) /= sum;
    }
    return p;
}

inline Matrix concat_rows(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("concat_rows: column counts disagree, " + a.shape_string() + " vs " +
                         b.shape_string());
    }
    Matrix c(a.rows() + b.rows(), a.cols(), detail::Uninit{});
    std::copy(a.data(), a.data() + a.size(), c.data());
    std::copy(b.data(), b.data() + b.size(), c.data() + a.size());
    return c;
}

inline std::pair<Matrix, Matrix> split_rows(const Matrix& m, index_t top_rows) {
    if (top_rows <= 0 || top_rows >= m.rows()) {
        throw ShapeError("split_rows: split point " + std::to_string(top_rows) +
                         " outside " + m.shape_string());
    }
    Matrix a(top_rows, m.cols(), detail::Uninit{}), b(m.rows() - top_rows, m.cols(), detail::Uninit{});
    std::copy(m.data(), m.data() + a.size(), a.data());
    std::copy(m.data() + a.size(), m.data() + m.size(), b.data());
    return {std::move(a), std::move(b)};
}

inline Matrix row_sum(const Matrix& a) {
    Matrix s(a.rows(), 1, detail::Uninit{});
    for (index_t i = 0; i < a.rows(); ++i) {
        double acc = 0.0;
        for (index_t j = 0; j < a.cols(); ++j) acc += a(i, j);
        s(i, 0) = acc;
    }
    detail::require_finite(s, "row_sum");
    return s;
}

inline Matrix col_sum(const Matrix& a) {
    Matrix s(1, a.cols(), detail::Uninit{});
    for (index_t j = 0; j < a.cols(); ++j) {
        double acc = 0.0;
        for (index_t i = 0; i < a.rows(); ++i) acc += a(i, j);
        s(0, j) = acc;
    }
    detail::require_finite(s, "col_sum");
    return s;
}

inline Matrix row_mean(const Matrix& a) {
    Matrix s = row_sum(a);
    const double inv = 1.0 / static_cast<double>(a.cols());
    for (index_t i = 0; i < s.size(); ++i) s.data()[i] *= inv;
    return s;
}

// Per-row maximum; optionally reports the first attaining column per row.
inline Matrix row_max(const Matrix& a, std::vector<index_t>* argmax = nullptr) {
    Matrix s(a.rows(), 1, detail::Uninit{});
    if (argmax) argmax->assign(static_cast<std::size_t>(a.rows()), 0);
    for (index_t i = 0; i < a.rows(); ++i) {
        double best = a(i, 0);
        index_t best_j = 0;
        for (index_t j = 1; j < a.cols(); ++j) {
            if (a(i, j) > best) {
                best = a(i, j);
                best_j = j;
            }
        }
        s(i, 0) = best;
        if (argmax) (*argmax)[static_cast<std::size_t>(i)] = best_j;
    }
    return s;
}

inline Matrix relu(const Matrix& a) {
    Matrix c(a.rows(), a.cols(), detail::Uninit{});
    for (index_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    return c;
}

inline Matrix log_elem(const Matrix& a) {
    Matrix c(a.rows(), a.cols(), detail::Uninit{});
    for (index_t i = 0; i < a.size(); ++i) c.data()[i] = std::log(a.data()[i]);
    detail::require_finite(c, "log");
    return c;
}

inline Matrix reshape(const Matrix& a, index_t rows, index_t cols) {
    if (rows * cols != a.size()) {
        throw ShapeError("reshape: cannot view " + a.shape_string() + " as " +
                         Matrix::shape_string(rows, cols));
    }
    Matrix c(rows, cols, detail::Uninit{});
    std::copy(a.data(), a.data() + a.size(), c.data());
    return c;
}

inline double sum_all(const Matrix& a) {
    double acc = 0.0;
    for (index_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    if (!std::isfinite(acc)) throw NumericError("sum_all produced a non-finite value");
    return acc;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) {
        throw ShapeError("max_abs_diff: shape mismatch, " + a.shape_string() + " vs " +
                         b.shape_string());
    }
    double d = 0.0;
    for (index_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.data()[i] - b.data()[i]));
    return d;
}

}  // namespace ots
