// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Elementwise kernels with a scalar reference implementation and optional
// SIMD variants. Every variant produces bit-identical results to the scalar
// reference; the active table is chosen once at startup and can be
// overridden with SHARDSIM_KERNELS=scalar|avx2 or kernels::select().

#pragma once

#include <cstddef>
#include <string_view>

namespace shardsim::kernels {

// Flattened description of a floating-point storage format.
struct QuantizeParams {
  int min_exponent = 0;  // exponent of the smallest normal binade
  int max_exponent = 0;  // exponent of the largest finite binade
  int significand_bits = 0;
  double max_finite = 0.0;
  double min_normal = 0.0;
  bool is_signed = true;
  bool has_inf_nan = true;
  bool saturate = false;
  bool subnormals = true;
};

// Writes quantized values to `out` (may alias `in`) and returns the number
// of NaN inputs seen.
using QuantizeFn = std::size_t (*)(const double* in, double* out,
                                   std::size_t n, const QuantizeParams& p);
// y[i] += alpha * x[i]
using AxpyFn = void (*)(double alpha, const double* x, double* y,
                        std::size_t n);
// out[i] = alpha * x[i]  (or x[i] / alpha for DivideFn)
using ScalarFn = void (*)(double alpha, const double* x, double* out,
                          std::size_t n);
// out[i] = a[i] (op) b[i]
using BinaryFn = void (*)(const double* a, const double* b, double* out,
                          std::size_t n);

enum class Isa { kScalar, kAvx2 };

struct KernelTable {
  Isa isa;
  const char* name;
  QuantizeFn quantize;
  AxpyFn axpy;
  ScalarFn scale;
  ScalarFn divide;
  BinaryFn add;
  BinaryFn sub;
  BinaryFn mul;
};

// True when the variant was compiled in and the running CPU supports it.
bool available(Isa isa);

// Throws std::invalid_argument when the variant is unavailable.
const KernelTable& table(Isa isa);

const KernelTable& active();
void select(Isa isa);
Isa best_available();
std::string_view isa_name(Isa isa);

// Scalar reference for a single element; shared by lowp::quantize.
double quantize_one(double x, const QuantizeParams& p, std::size_t& nan_count);

namespace detail {
const KernelTable& scalar_table();
const KernelTable* avx2_table();
}  // namespace detail

}  // namespace shardsim::kernels
