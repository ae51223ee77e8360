// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "spt/errors.hpp"
#include "spt/rng.hpp"

namespace spt {

// Dense row-major matrix. All kernels below accumulate each output element in
// a fixed order that depends only on the reduction length, never on the number
// of rows processed, so chunked and monolithic forwards agree bit-exactly.
template <class T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, T(0)) {}

  T* row(int i) { return data.data() + static_cast<std::size_t>(i) * cols; }
  const T* row(int i) const { return data.data() + static_cast<std::size_t>(i) * cols; }
  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * cols + j]; }
  T at(int i, int j) const { return data[static_cast<std::size_t>(i) * cols + j]; }

  std::size_t size() const { return data.size(); }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool operator==(const Matrix& o) const {
    return rows == o.rows && cols == o.cols && data == o.data;
  }

  static Matrix randn(int r, int c, T stddev, Rng& rng) {
    Matrix m(r, c);
    for (auto& v : m.data) v = static_cast<T>(rng.normal()) * stddev;
    return m;
  }
};

// C = A * B, with C [m x n], A [m x k], B [k x n].
// ikj loop order: the inner j loop vectorizes and the accumulation order per
// output element is the sequential k order, independent of m.
template <class T>
inline void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  if (a.cols != b.rows) fail(Errc::ShapeMismatch, "matmul inner dims");
  if (c.rows != a.rows || c.cols != b.cols) c = Matrix<T>(a.rows, b.cols);
  else c.fill(T(0));
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const T av = arow[k];
      const T* brow = b.row(k);
      for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B
template <class T>
inline void matmul_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols)
    fail(Errc::ShapeMismatch, "matmul_acc dims");
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const T av = arow[k];
      const T* brow = b.row(k);
      for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

// C = A * B^T, with C [m x n], A [m x k], B [n x k].
template <class T>
inline void matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  if (a.cols != b.cols) fail(Errc::ShapeMismatch, "matmul_nt inner dims");
  if (c.rows != a.rows || c.cols != b.rows) c = Matrix<T>(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    T* crow = c.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const T* brow = b.row(j);
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      int k = 0;
      const int kk = a.cols & ~3;
      for (; k < kk; k += 4) {
        s0 += arow[k] * brow[k];
        s1 += arow[k + 1] * brow[k + 1];
        s2 += arow[k + 2] * brow[k + 2];
        s3 += arow[k + 3] * brow[k + 3];
      }
      T s = ((s0 + s1) + (s2 + s3));
      for (; k < a.cols; ++k) s += arow[k] * brow[k];
      crow[j] = s;
    }
  }
}

// C += A^T * B, with C [k x n], A [m x k], B [m x n]. Used for weight grads.
template <class T>
inline void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  if (a.rows != b.rows || c.rows != a.cols || c.cols != b.cols)
    fail(Errc::ShapeMismatch, "matmul_tn_acc dims");
  for (int i = 0; i < a.rows; ++i) {
    const T* arow = a.row(i);
    const T* brow = b.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const T av = arow[k];
      T* crow = c.row(k);
      for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
inline T dot(const T* a, const T* b, int n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  int k = 0;
  const int kk = n & ~3;
  for (; k < kk; k += 4) {
    s0 += a[k] * b[k];
    s1 += a[k + 1] * b[k + 1];
    s2 += a[k + 2] * b[k + 2];
    s3 += a[k + 3] * b[k + 3];
  }
  T s = ((s0 + s1) + (s2 + s3));
  for (; k < n; ++k) s += a[k] * b[k];
  return s;
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace spt
