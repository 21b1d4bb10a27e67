// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/toymodel/masks.hpp"

#include <stdexcept>

namespace shardsim::toymodel {

void SequenceLayout::validate() const {
  if (text_len < 1 || grid_h < 1 || grid_w < 1) {
    throw std::invalid_argument("SequenceLayout: all dimensions must be >= 1");
  }
}

std::string_view mask_kind_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::kRow:
      return "row";
    case MaskKind::kColumn:
      return "column";
    case MaskKind::kConv:
      return "conv";
  }
  return "row";
}

MaskMatrix::MaskMatrix(SequenceLayout layout)
    : layout_(layout), n_(layout.total_len()), bits_(n_ * n_, 0) {
  layout_.validate();
}

std::size_t MaskMatrix::allowed_count() const {
  std::size_t n = 0;
  for (unsigned char b : bits_) n += b;
  return n;
}

std::string MaskMatrix::to_ascii() const {
  std::string s;
  s.reserve(n_ * (n_ + 1));
  for (std::size_t q = 0; q < n_; ++q) {
    for (std::size_t k = 0; k < n_; ++k) s.push_back(allowed(q, k) ? '#' : '.');
    s.push_back('\n');
  }
  return s;
}

std::string MaskMatrix::to_pgm(std::size_t cell_pixels) const {
  const std::size_t side = n_ * cell_pixels;
  std::string s = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      s.push_back(allowed(y / cell_pixels, x / cell_pixels) ? static_cast<char>(255) : 0);
    }
  }
  return s;
}

MaskKind layer_mask_kind(std::size_t i, std::size_t L) {
  if (L < 1 || i < 1 || i > L) throw std::out_of_range("layer_mask_kind: index out of range");
  if (i == L) return MaskKind::kConv;
  if (i >= 2 && (i - 2) % 4 == 0) return MaskKind::kColumn;
  return MaskKind::kRow;
}

namespace {

// Text rows and the text columns of image rows; shared by every kind.
void fill_common(MaskMatrix& mask) {
  const SequenceLayout& l = mask.layout();
  for (std::size_t q = 0; q < l.text_len; ++q) {
    for (std::size_t k = 0; k <= q; ++k) mask.set(q, k, true);
  }
  for (std::size_t q = l.text_len; q < l.total_len(); ++q) {
    for (std::size_t k = 0; k < l.text_len; ++k) mask.set(q, k, true);
    mask.set(q, q, true);
  }
}

}  // namespace

MaskMatrix build_row_mask(const SequenceLayout& layout) {
  MaskMatrix mask(layout);
  fill_common(mask);
  const std::size_t extent = layout.grid_w + 1;
  for (std::size_t j = 0; j < layout.image_len(); ++j) {
    const std::size_t lo = j >= extent ? j - extent : 0;
    for (std::size_t i = lo; i < j; ++i) {
      mask.set(layout.text_len + j, layout.text_len + i, true);
    }
  }
  return mask;
}

std::vector<std::size_t> transpose_permutation(const SequenceLayout& layout) {
  std::vector<std::size_t> perm(layout.image_len());
  for (std::size_t r = 0; r < layout.grid_h; ++r) {
    for (std::size_t c = 0; c < layout.grid_w; ++c) {
      perm[r * layout.grid_w + c] = c * layout.grid_h + r;
    }
  }
  return perm;
}

MaskMatrix build_column_mask(const SequenceLayout& layout, bool transposed) {
  MaskMatrix mask(layout);
  fill_common(mask);
  const std::size_t t = layout.text_len;
  const std::vector<std::size_t> perm =
      transposed ? transpose_permutation(layout) : std::vector<std::size_t>{};
  auto place = [&](std::size_t image_index) {
    return t + (transposed ? perm[image_index] : image_index);
  };
  for (std::size_t r = 0; r < layout.grid_h; ++r) {
    for (std::size_t c = 0; c < layout.grid_w; ++c) {
      const std::size_t q = r * layout.grid_w + c;
      for (std::size_t rr = 0; rr < r; ++rr) {
        mask.set(place(q), place(rr * layout.grid_w + c), true);
      }
    }
  }
  return mask;
}

MaskMatrix build_conv_mask(const SequenceLayout& layout, std::size_t k) {
  if (k % 2 == 0 || k < 1 || k > 2 * layout.grid_w - 1) {
    throw std::invalid_argument("build_conv_mask: kernel must be odd and <= 2*grid_w-1");
  }
  MaskMatrix mask(layout);
  fill_common(mask);
  const auto half = static_cast<long>((k - 1) / 2);
  const auto w = static_cast<long>(layout.grid_w);
  for (std::size_t r = 0; r < layout.grid_h; ++r) {
    for (std::size_t c = 0; c < layout.grid_w; ++c) {
      const long query = static_cast<long>(r) * w + static_cast<long>(c);
      const long r_lo = static_cast<long>(r) - static_cast<long>(k - 1);
      for (long rr = std::max(0L, r_lo); rr <= static_cast<long>(r); ++rr) {
        for (long dc = -half; dc <= half; ++dc) {
          const long key = rr * w + static_cast<long>(c) + dc;
          if (key < 0 || key > query) continue;
          mask.set(layout.text_len + static_cast<std::size_t>(query),
                   layout.text_len + static_cast<std::size_t>(key), true);
        }
      }
    }
  }
  return mask;
}

MaskMatrix build_mask(MaskKind kind, const SequenceLayout& layout,
                      std::size_t conv_kernel) {
  switch (kind) {
    case MaskKind::kRow:
      return build_row_mask(layout);
    case MaskKind::kColumn:
      return build_column_mask(layout, false);
    case MaskKind::kConv:
      return build_conv_mask(layout, conv_kernel);
  }
  return build_row_mask(layout);
}

bool satisfies_structure(const MaskMatrix& mask) {
  const SequenceLayout& l = mask.layout();
  for (std::size_t q = 0; q < mask.size(); ++q) {
    if (!mask.allowed(q, q)) return false;
    for (std::size_t k = q + 1; k < mask.size(); ++k) {
      if (mask.allowed(q, k)) return false;
    }
    if (q >= l.text_len) {
      for (std::size_t k = 0; k < l.text_len; ++k) {
        if (!mask.allowed(q, k)) return false;
      }
    } else {
      for (std::size_t k = 0; k <= q; ++k) {
        if (!mask.allowed(q, k)) return false;
      }
    }
  }
  return true;
}

}  // namespace shardsim::toymodel
