// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "shardsim/kernels.hpp"

namespace shardsim {
namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

Tensor like(const Tensor& a) {
  return a.rank() == 1 ? Tensor::vector(a.size()) : Tensor(a.rows(), a.cols());
}

}  // namespace

Tensor::Tensor(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("Tensor: data length does not match shape");
  }
}

Tensor Tensor::vector(std::size_t n) {
  Tensor t(n, 1);
  t.rank_ = 1;
  return t;
}

Tensor Tensor::vector(std::vector<double> data) {
  const std::size_t n = data.size();
  Tensor t(n, 1, std::move(data));
  t.rank_ = 1;
  return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

Tensor Tensor::full(std::size_t rows, std::size_t cols, double value) {
  return Tensor(rows, cols, std::vector<double>(rows * cols, value));
}

Tensor Tensor::identity(std::size_t n) { return eye(n, n); }

Tensor Tensor::eye(std::size_t rows, std::size_t cols) {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < rows && i < cols; ++i) t.data_[i * cols + i] = 1.0;
  return t;
}

Tensor Tensor::gaussian(std::size_t rows, std::size_t cols, Rng& rng,
                        double stddev) {
  Tensor t(rows, cols);
  for (double& v : t.data_) v = stddev * rng.normal();
  return t;
}

void Tensor::set(std::size_t i, std::size_t j, double v) {
  set(i * cols_ + j, v);
}

void Tensor::set(std::size_t flat_index, double v) {
  data_.at(flat_index) = format_ ? lowp::quantize(v, *format_) : v;
}

void Tensor::assign(std::span<const double> values) {
  if (values.size() != data_.size()) {
    throw std::invalid_argument("Tensor::assign: size mismatch");
  }
  if (format_) {
    lowp::quantize(values, data_, *format_);
  } else {
    std::copy(values.begin(), values.end(), data_.begin());
  }
}

std::span<double> Tensor::mutable_values() {
  if (format_) {
    throw std::logic_error("Tensor: direct writes to a format-tagged tensor");
  }
  return data_;
}

Tensor Tensor::with_format(const lowp::FloatFormatSpec& fmt) const {
  Tensor t = *this;
  lowp::quantize(data_, t.data_, fmt);
  t.format_ = fmt;
  return t;
}

Tensor Tensor::untagged() const {
  Tensor t = *this;
  t.format_.reset();
  return t;
}

bool Tensor::operator==(const Tensor& other) const {
  return same_shape(other) && data_ == other.data_;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a,
              bool transpose_b) {
  const std::size_t m = transpose_a ? a.cols() : a.rows();
  const std::size_t k = transpose_a ? a.rows() : a.cols();
  const std::size_t kb = transpose_b ? b.cols() : b.rows();
  const std::size_t n = transpose_b ? b.rows() : b.cols();
  if (k != kb) {
    throw std::invalid_argument("matmul: inner dimensions differ (" +
                                std::to_string(k) + " vs " +
                                std::to_string(kb) + ")");
  }
  const Tensor bt = transpose_b ? transpose(b) : Tensor();
  const Tensor& rhs = transpose_b ? bt : b;
  const auto axpy_fn = kernels::active().axpy;

  Tensor c(m, n);
  double* out = c.mutable_data();
  const double* bp = rhs.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = transpose_a ? a(p, i) : a(i, p);
      axpy_fn(aip, bp + p * n, crow, n);
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  Tensor t(a.cols(), a.rows());
  double* out = t.mutable_data();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out[j * a.rows() + i] = a(i, j);
  }
  return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = like(a);
  kernels::active().add(a.data(), b.data(), c.mutable_data(), a.size());
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = like(a);
  kernels::active().sub(a.data(), b.data(), c.mutable_data(), a.size());
  return c;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor c = like(a);
  kernels::active().mul(a.data(), b.data(), c.mutable_data(), a.size());
  return c;
}

Tensor scaled(const Tensor& a, double alpha) {
  Tensor c = like(a);
  kernels::active().scale(alpha, a.data(), c.mutable_data(), a.size());
  return c;
}

Tensor divided(const Tensor& a, double divisor) {
  Tensor c = like(a);
  kernels::active().divide(divisor, a.data(), c.mutable_data(), a.size());
  return c;
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  kernels::active().axpy(alpha, x.data(), y.mutable_data(), x.size());
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return s;
}

double frobenius_norm(const Tensor& a) { return std::sqrt(squared_norm(a)); }

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.values()) {
    if (std::isnan(v)) return v;
    m = std::max(m, std::fabs(v));
  }
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::fabs(a[i] - b[i]);
    if (std::isnan(d)) return d;
    m = std::max(m, d);
  }
  return m;
}

bool all_finite(const Tensor& a) {
  for (double v : a.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no parts");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  const Tensor& first = parts.front();
  if (axis == 0) {
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
      if (p.cols() != first.cols() || p.rank() != first.rank()) {
        throw std::invalid_argument("concat: shape mismatch");
      }
      rows += p.rows();
    }
    std::vector<double> data;
    data.reserve(rows * first.cols());
    for (const Tensor& p : parts) data.insert(data.end(), p.values().begin(), p.values().end());
    if (first.rank() == 1) return Tensor::vector(std::move(data));
    return Tensor(rows, first.cols(), std::move(data));
  }
  std::size_t cols = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != first.rows()) throw std::invalid_argument("concat: shape mismatch");
    cols += p.cols();
  }
  Tensor out(first.rows(), cols);
  double* o = out.mutable_data();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i) {
      for (std::size_t j = 0; j < p.cols(); ++j) o[i * cols + offset + j] = p(i, j);
    }
    offset += p.cols();
  }
  return out;
}

Tensor slice(const Tensor& a, int axis, std::size_t begin, std::size_t count) {
  if (axis == 0) {
    if (begin + count > a.rows()) throw std::out_of_range("slice: rows out of range");
    std::vector<double> data(a.values().begin() + begin * a.cols(),
                             a.values().begin() + (begin + count) * a.cols());
    if (a.rank() == 1) return Tensor::vector(std::move(data));
    return Tensor(count, a.cols(), std::move(data));
  }
  if (axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
  if (begin + count > a.cols()) throw std::out_of_range("slice: cols out of range");
  Tensor out(a.rows(), count);
  double* o = out.mutable_data();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < count; ++j) o[i * count + j] = a(i, begin + j);
  }
  return out;
}

}  // namespace shardsim
