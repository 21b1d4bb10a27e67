// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <vector>

#include "shardsim/lowp.hpp"
#include "shardsim/rng.hpp"

namespace shardsim {

// Dense row-major 1-D or 2-D tensor stored in double precision. A tensor may
// carry a storage format; every write through set()/assign() is rounded to
// that format so all stored elements stay representable. A 1-D tensor of
// length n reports rows() == n and cols() == 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor vector(std::size_t n);
  static Tensor vector(std::vector<double> data);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor full(std::size_t rows, std::size_t cols, double value);
  static Tensor identity(std::size_t n);
  // rows x cols with ones on the main diagonal.
  static Tensor eye(std::size_t rows, std::size_t cols);
  static Tensor gaussian(std::size_t rows, std::size_t cols, Rng& rng,
                         double stddev = 1.0);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  int rank() const { return rank_; }
  bool empty() const { return data_.empty(); }
  bool same_shape(const Tensor& other) const {
    return rank_ == other.rank_ && rows_ == other.rows_ && cols_ == other.cols_;
  }

  std::span<const double> values() const { return data_; }
  const double* data() const { return data_.data(); }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * cols_ + j];
  }
  double operator[](std::size_t i) const { return data_[i]; }

  void set(std::size_t i, std::size_t j, double v);
  void set(std::size_t flat_index, double v);
  // Replaces all elements; rounds through the storage format if present.
  void assign(std::span<const double> values);

  // Direct mutable access for untagged tensors. Throws std::logic_error for
  // tensors carrying a storage format.
  std::span<double> mutable_values();
  double* mutable_data() { return mutable_values().data(); }

  const std::optional<lowp::FloatFormatSpec>& format() const { return format_; }
  // Copy rounded to `fmt` and tagged with it.
  Tensor with_format(const lowp::FloatFormatSpec& fmt) const;
  // Copy with the storage tag removed (values unchanged).
  Tensor untagged() const;

  bool operator==(const Tensor& other) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  int rank_ = 2;
  std::vector<double> data_;
  std::optional<lowp::FloatFormatSpec> format_;
};

// Product op(a) * op(b). Each output element accumulates its terms in
// ascending inner index starting from zero, independent of kernel choice.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double alpha);
Tensor divided(const Tensor& a, double divisor);
// y += alpha * x  (y must be untagged)
void axpy(double alpha, const Tensor& x, Tensor& y);

double dot(const Tensor& a, const Tensor& b);
double squared_norm(const Tensor& a);
double frobenius_norm(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& a);

// Concatenation / slicing of 2-D tensors along axis 0 (rows) or 1 (cols).
// Rank-1 tensors are treated as columns and concatenate along axis 0.
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t count);

}  // namespace shardsim
