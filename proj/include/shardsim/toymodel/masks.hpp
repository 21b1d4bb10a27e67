// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Sparse attention masks over a [text | image raster] sequence.
//
// Positions 0..text_len-1 are text; image position (r, c) sits at
// text_len + r * grid_w + c. Text queries are causal over text. Image
// queries always see every text position and themselves; which earlier
// image positions they see depends on the mask kind:
//
//   row     the grid_w + 1 preceding raster positions
//   column  the same column in every earlier row
//   conv    a k x k causal window on the raster, wrapping across rows

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace shardsim::toymodel {

struct SequenceLayout {
  std::size_t text_len = 6;
  std::size_t grid_h = 4;
  std::size_t grid_w = 4;

  void validate() const;
  bool operator==(const SequenceLayout& other) const = default;
  std::size_t image_len() const { return grid_h * grid_w; }
  std::size_t total_len() const { return text_len + image_len(); }
  std::size_t image_position(std::size_t r, std::size_t c) const {
    return text_len + r * grid_w + c;
  }
};

enum class MaskKind { kRow, kColumn, kConv };

std::string_view mask_kind_name(MaskKind kind);

class MaskMatrix {
 public:
  explicit MaskMatrix(SequenceLayout layout);

  const SequenceLayout& layout() const { return layout_; }
  std::size_t size() const { return n_; }
  bool allowed(std::size_t query, std::size_t key) const {
    return bits_[query * n_ + key] != 0;
  }
  void set(std::size_t query, std::size_t key, bool value) {
    bits_[query * n_ + key] = value ? 1 : 0;
  }
  std::size_t allowed_count() const;
  bool operator==(const MaskMatrix& other) const = default;

  // '#' for allowed, '.' for masked; one line per query.
  std::string to_ascii() const;
  // Binary PGM (P5); allowed cells are white.
  std::string to_pgm(std::size_t cell_pixels = 4) const;

 private:
  SequenceLayout layout_;
  std::size_t n_;
  std::vector<unsigned char> bits_;
};

// Layer kind for layer i (1-based) of L: conv for the last layer, column
// when (i - 2) mod 4 == 0, row otherwise.
MaskKind layer_mask_kind(std::size_t i, std::size_t L);

MaskMatrix build_row_mask(const SequenceLayout& layout);
// With `transposed`, image positions are taken in column-major order (the
// grid is transposed before attention), so the mask is the column mask
// conjugated by the transposition permutation.
MaskMatrix build_column_mask(const SequenceLayout& layout, bool transposed = false);
// k odd, 1 <= k <= 2 * grid_w - 1.
MaskMatrix build_conv_mask(const SequenceLayout& layout, std::size_t k);

MaskMatrix build_mask(MaskKind kind, const SequenceLayout& layout,
                      std::size_t conv_kernel);

// perm[i] is the index in transposed order of image position i.
std::vector<std::size_t> transpose_permutation(const SequenceLayout& layout);

// Causal, image queries see all text, text queries causal over text.
bool satisfies_structure(const MaskMatrix& mask);

}  // namespace shardsim::toymodel
