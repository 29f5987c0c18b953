// Minimal dense row-major matrix type and the handful of matmul kernels the
// encoder needs. Templated on the scalar so tests can run the exact same
// code in double precision.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dstd/error.hpp"

namespace dstd {

template <typename T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {}

  T* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  T at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return data.size(); }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

template <typename T>
using Vec = std::vector<T>;

// C += A * B    (A: m x k, B: k x n, C: m x n)
template <typename T>
void matmul_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int k = 0; k < a.cols; ++k) {
      T av = arow[k];
      const T* brow = b.row(k);
      for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T  (A: m x k, B: n x k, C: m x n)
template <typename T>
void matmul_nt_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const T* brow = b.row(j);
      T acc = T(0);
      for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
      crow[j] += acc;
    }
  }
}

// C += A^T * B  (A: m x k, B: m x n, C: k x n)
template <typename T>
void matmul_tn_acc(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    const T* brow = b.row(i);
    for (int k = 0; k < a.cols; ++k) {
      T av = arow[k];
      T* crow = c.row(k);
      for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

// y = x * W + bias broadcast over rows   (x: m x k, w: k x n)
template <typename T>
void linear(const Mat<T>& x, const Mat<T>& w, const Vec<T>& bias, Mat<T>& out) {
  require(x.cols == w.rows, Errc::shape_mismatch, "linear: inner dimensions differ");
  out = Mat<T>(x.rows, w.cols);
  for (int i = 0; i < out.rows; ++i) {
    T* orow = out.row(i);
    for (int j = 0; j < out.cols; ++j) orow[j] = bias[j];
  }
  matmul_acc(x, w, out);
}

template <typename T>
void add_col_sums(const Mat<T>& m, Vec<T>& out) {
  for (int i = 0; i < m.rows; ++i) {
    const T* row = m.row(i);
    for (int j = 0; j < m.cols; ++j) out[j] += row[j];
  }
}

template <typename T>
bool all_finite(const Mat<T>& m) {
  for (T v : m.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename T>
bool all_finite(const Vec<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

}  // namespace dstd
