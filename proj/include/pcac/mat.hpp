#pragma once

#include <Eigen/Dense>

#include <cassert>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <vector>

namespace pcac {

// Dense row-major matrix. The single carrier for features, weights and
// gradients; heavy products go through Eigen maps, everything else is
// plain loops so the accumulation order stays fixed.
template <typename T>
class Mat {
public:
    Mat() = default;
    Mat(int rows, int cols) : rows_(rows), cols_(cols), d_(static_cast<size_t>(rows) * cols, T(0)) {
        assert(rows >= 0 && cols >= 0);
    }

    static Mat zeros(int rows, int cols) { return Mat(rows, cols); }

    static Mat full(int rows, int cols, T v) {
        Mat m(rows, cols);
        std::fill(m.d_.begin(), m.d_.end(), v);
        return m;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return d_.size(); }
    bool empty() const { return d_.empty(); }

    T* data() { return d_.data(); }
    const T* data() const { return d_.data(); }
    T* row(int r) { return d_.data() + static_cast<size_t>(r) * cols_; }
    const T* row(int r) const { return d_.data() + static_cast<size_t>(r) * cols_; }

    T& operator()(int r, int c) { return d_[static_cast<size_t>(r) * cols_ + c]; }
    T operator()(int r, int c) const { return d_[static_cast<size_t>(r) * cols_ + c]; }

    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    template <typename U>
    Mat<U> cast() const {
        Mat<U> out(rows_, cols_);
        for (size_t i = 0; i < d_.size(); ++i) out.data()[i] = static_cast<U>(d_[i]);
        return out;
    }

    using EigenMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using ConstEigenMap =
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

    EigenMap map() { return EigenMap(d_.data(), rows_, cols_); }
    ConstEigenMap map() const { return ConstEigenMap(d_.data(), rows_, cols_); }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> d_;
};

template <typename T>
inline void check_shape(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
}

// C = A * B
template <typename T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
    Mat<T> c(a.rows(), b.cols());
    c.map().noalias() = a.map() * b.map();
    return c;
}

// C = A * B^T
template <typename T>
Mat<T> matmul_nt(const Mat<T>& a, const Mat<T>& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimensions differ");
    Mat<T> c(a.rows(), b.rows());
    c.map().noalias() = a.map() * b.map().transpose();
    return c;
}

// C = A^T * B
template <typename T>
Mat<T> matmul_tn(const Mat<T>& a, const Mat<T>& b) {
    if (a.rows() != b.rows()) throw std::invalid_argument("matmul_tn: inner dimensions differ");
    Mat<T> c(a.cols(), b.cols());
    c.map().noalias() = a.map().transpose() * b.map();
    return c;
}

// C += A^T * B
template <typename T>
void add_matmul_tn(Mat<T>& c, const Mat<T>& a, const Mat<T>& b) {
    c.map().noalias() += a.map().transpose() * b.map();
}

template <typename T>
void add_inplace(Mat<T>& dst, const Mat<T>& src) {
    if (!dst.same_shape(src)) throw std::invalid_argument("add_inplace: shape mismatch");
    for (size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

template <typename T>
Mat<T> gather_rows(const Mat<T>& x, const std::vector<int32_t>& idx) {
    Mat<T> out(static_cast<int>(idx.size()), x.cols());
    for (size_t j = 0; j < idx.size(); ++j)
        std::memcpy(out.row(static_cast<int>(j)), x.row(idx[j]), sizeof(T) * x.cols());
    return out;
}

template <typename T>
void scatter_add_rows(Mat<T>& dst, const Mat<T>& src, const std::vector<int32_t>& idx) {
    assert(static_cast<size_t>(src.rows()) == idx.size());
    const int c = dst.cols();
    for (size_t j = 0; j < idx.size(); ++j) {
        T* d = dst.row(idx[j]);
        const T* s = src.row(static_cast<int>(j));
        for (int k = 0; k < c; ++k) d[k] += s[k];
    }
}

template <typename T>
Mat<T> random_normal(int rows, int cols, T stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    Mat<T> m(rows, cols);
    for (size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
    return m;
}

template <typename T>
Mat<T> random_uniform(int rows, int cols, T lo, T hi, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    Mat<T> m(rows, cols);
    for (size_t i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
    return m;
}

}  // namespace pcac
