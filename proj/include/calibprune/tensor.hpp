// Copyright 2026 The calibprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "calibprune/error.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace calibprune {

// Dense row-major f32 matrix. Vectors are 1×n matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(size_t rows, size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(size_t rows, size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    Require(data_.size() == rows_ * cols_, ErrorCode::kShapeMismatch,
            "data length " + std::to_string(data_.size()) + " != " +
                std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  Matrix(std::initializer_list<std::initializer_list<float>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      Require(r.size() == cols_, ErrorCode::kShapeMismatch, "ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  size_t rows() const noexcept { return rows_; }
  size_t cols() const noexcept { return cols_; }
  size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(size_t r, size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(size_t r, size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> row(size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> flat() noexcept { return data_; }
  std::span<const float> flat() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  std::string shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](float v) { return std::isfinite(v); });
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  size_t rows_ = 0;
  size_t cols_ = 0;
  std::vector<float> data_;
};

// Bitwise equality (distinguishes -0.0 from 0.0, NaN payloads equal to themselves).
inline bool BitwiseEqual(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::equal(a.flat().begin(), a.flat().end(), b.flat().begin(),
                    [](float x, float y) {
                      return std::bit_cast<uint32_t>(x) == std::bit_cast<uint32_t>(y);
                    });
}

namespace detail {

// Every output element c[i][k] = Σ_j a[i][j]·b[j][k] is accumulated as
// acc = fma(a[i][j], b[j][k], acc) for j = 0, 1, ..., n-1 starting from zero,
// on every code path. Results therefore do not depend on tiling, on the SIMD
// path taken, or on how many rows are computed together.
inline void GemmScalar(const float* a, size_t lda, const float* b, size_t ldb, float* c,
                       size_t ldc, size_t row_begin, size_t row_end, size_t col_begin,
                       size_t col_end, size_t n) {
  for (size_t i = row_begin; i < row_end; ++i) {
    float* crow = c + i * ldc;
    std::fill(crow + col_begin, crow + col_end, 0.0f);
    for (size_t j = 0; j < n; ++j) {
      const float av = a[i * lda + j];
      const float* brow = b + j * ldb;
      for (size_t k = col_begin; k < col_end; ++k) crow[k] = std::fma(av, brow[k], crow[k]);
    }
  }
}

#if defined(__AVX2__) && defined(__FMA__)

inline void GemmKernel(const float* a, size_t lda, const float* b, size_t ldb, float* c,
                       size_t ldc, size_t m, size_t n, size_t p) {
  constexpr size_t kRows = 6;
  constexpr size_t kCols = 16;
  const size_t m_full = m - m % kRows;
  const size_t p_full = p - p % kCols;
  // Long inner dimensions stream B from far apart rows; packing the column
  // panel keeps it resident in L2.
  const bool pack = n >= 1024;
  std::vector<float> panel(pack ? n * kCols : 0);
  for (size_t k0 = 0; k0 < p_full; k0 += kCols) {
    const float* bp = b + k0;
    size_t bstride = ldb;
    if (pack) {
      for (size_t j = 0; j < n; ++j) std::copy_n(b + j * ldb + k0, kCols, panel.data() + j * kCols);
      bp = panel.data();
      bstride = kCols;
    }
    for (size_t i = 0; i < m_full; i += kRows) {
      __m256 acc[kRows][2];
      for (size_t r = 0; r < kRows; ++r) {
        acc[r][0] = _mm256_setzero_ps();
        acc[r][1] = _mm256_setzero_ps();
      }
      for (size_t j = 0; j < n; ++j) {
        const float* brow = bp + j * bstride;
        const __m256 b0 = _mm256_loadu_ps(brow);
        const __m256 b1 = _mm256_loadu_ps(brow + 8);
        for (size_t r = 0; r < kRows; ++r) {
          const __m256 av = _mm256_broadcast_ss(a + (i + r) * lda + j);
          acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
          acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
        }
      }
      for (size_t r = 0; r < kRows; ++r) {
        _mm256_storeu_ps(c + (i + r) * ldc + k0, acc[r][0]);
        _mm256_storeu_ps(c + (i + r) * ldc + k0 + 8, acc[r][1]);
      }
    }
  }
  if (p_full < p) GemmScalar(a, lda, b, ldb, c, ldc, 0, m_full, p_full, p, n);
  if (m_full < m) GemmScalar(a, lda, b, ldb, c, ldc, m_full, m, 0, p, n);
}

#else

inline void GemmKernel(const float* a, size_t lda, const float* b, size_t ldb, float* c,
                       size_t ldc, size_t m, size_t n, size_t p) {
  GemmScalar(a, lda, b, ldb, c, ldc, 0, m, 0, p, n);
}

#endif

}  // namespace detail

inline Matrix Transpose(const Matrix& a) {
  constexpr size_t kTile = 32;
  Matrix t(a.cols(), a.rows());
  for (size_t i0 = 0; i0 < a.rows(); i0 += kTile) {
    const size_t i1 = std::min(a.rows(), i0 + kTile);
    for (size_t j0 = 0; j0 < a.cols(); j0 += kTile) {
      const size_t j1 = std::min(a.cols(), j0 + kTile);
      for (size_t i = i0; i < i1; ++i) {
        for (size_t j = j0; j < j1; ++j) t(j, i) = a(i, j);
      }
    }
  }
  return t;
}

inline Matrix Matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    Fail(ErrorCode::kShapeMismatch,
         "matmul " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix c(a.rows(), b.cols());
  if (c.empty()) return c;
  detail::GemmKernel(a.data(), a.cols(), b.data(), b.cols(), c.data(), c.cols(),
                     a.rows(), a.cols(), b.cols());
  return c;
}

// a · bᵀ, the linear-layer product x·Wᵀ for W stored [out × in].
inline Matrix MatmulTransposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    Fail(ErrorCode::kShapeMismatch,
         "matmul_t " + a.shape_string() + " x " + b.shape_string() + "^T");
  }
  return Matmul(a, Transpose(b));
}

inline float FrobeniusNorm(const Matrix& a) {
  double acc = 0.0;
  for (float v : a.flat()) acc += static_cast<double>(v) * v;
  return static_cast<float>(std::sqrt(acc));
}

// Numerically stable softmax of logits / temperature. Greedy selection is a
// separate code path; temperature must be strictly positive.
inline std::vector<float> Softmax(std::span<const float> logits, float temperature = 1.0f) {
  Require(temperature > 0.0f && std::isfinite(temperature), ErrorCode::kInvalidArgument,
          "softmax temperature must be > 0, got " + std::to_string(temperature));
  std::vector<float> out(logits.size());
  if (logits.empty()) return out;
  float max_logit = -std::numeric_limits<float>::infinity();
  for (float l : logits) {
    Require(std::isfinite(l), ErrorCode::kNonFinite, "softmax logit");
    max_logit = std::max(max_logit, l);
  }
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double e = std::exp((static_cast<double>(logits[i]) - max_logit) / temperature);
    out[i] = static_cast<float>(e);
    sum += e;
  }
  for (float& v : out) v = static_cast<float>(v / sum);
  return out;
}

// log-softmax in double; used where log-probabilities feed statistics.
inline std::vector<double> LogSoftmax(std::span<const float> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  double max_logit = -std::numeric_limits<double>::infinity();
  for (float l : logits) max_logit = std::max<double>(max_logit, l);
  double sum = 0.0;
  for (float l : logits) sum += std::exp(static_cast<double>(l) - max_logit);
  const double log_z = max_logit + std::log(sum);
  for (size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - log_z;
  return out;
}

}  // namespace calibprune
