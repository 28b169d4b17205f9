#pragma once

// Dense row-major matrices and the small matmul kernels everything sits on.
// Templated on the scalar so the whole stack runs in float for speed or in
// double when gradients are checked against finite differences.

#include <cmath>
#include <cstddef>
#include <vector>

#include "ramdg/common.hpp"

namespace ramdg {

template <class T>
class Tensor {
 public:
  Tensor() : rows_(0), cols_(0) {}
  Tensor(size_t rows, size_t cols, T value = T(0)) : rows_(rows), cols_(cols), data_(rows * cols, value) {}
  Tensor(size_t rows, size_t cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) throw ConfigError("Tensor: data size does not match shape");
  }

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  size_t size() const { return data_.size(); }

  T& at(size_t i, size_t j) { return data_[i * cols_ + j]; }
  const T& at(size_t i, size_t j) const { return data_[i * cols_ + j]; }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }
  T* row(size_t i) { return data_.data() + i * cols_; }
  const T* row(size_t i) const { return data_.data() + i * cols_; }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(rows_, cols_);
    for (size_t i = 0; i < data_.size(); ++i) out[i] = U(data_[i]);
    return out;
  }

 private:
  size_t rows_, cols_;
  std::vector<T> data_;
};

// c += a * b        a: m x k, b: k x n, c: m x n
template <class T>
inline void gemm_nn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      T aip = ai[p];
      const T* bp = b + p * n;
      for (size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c += a * b^T      a: m x k, b: n x k, c: m x n
template <class T>
inline void gemm_nt(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c += a^T * b      a: k x m, b: k x n, c: m x n
template <class T>
inline void gemm_tn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (size_t i = 0; i < m; ++i) {
      T api = ap[i];
      T* ci = c + i * n;
      for (size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

template <class T>
inline Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) throw ConfigError("matmul: inner dimensions differ");
  Tensor<T> c(a.rows(), b.cols());
  gemm_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

}  // namespace ramdg
