// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "shardsim/tensor.hpp"
#include "shardsim/toymodel/masks.hpp"

namespace shardsim::toymodel {

using Token = std::int32_t;

// Non-owning view of the six embedding tables.
//   token     text_vocab x d
//   text_pos  text_len x d   (added for real caption tokens)
//   pad       text_len x d   (one learned pad embedding per text position)
//   image     image_vocab x d
//   row       grid_h x d
//   col       grid_w x d
template <typename T>
struct EmbeddingTablesT {
  T* token = nullptr;
  T* text_pos = nullptr;
  T* pad = nullptr;
  T* image = nullptr;
  T* row = nullptr;
  T* col = nullptr;
};
using EmbeddingTables = EmbeddingTablesT<const Tensor>;
using EmbeddingGrads = EmbeddingTablesT<Tensor>;

class EmbeddingScheme {
 public:
  EmbeddingScheme(SequenceLayout layout, std::size_t text_vocab,
                  std::size_t image_vocab, std::size_t d_model);
  static EmbeddingScheme random(SequenceLayout layout, std::size_t text_vocab,
                                std::size_t image_vocab, std::size_t d_model,
                                Rng& rng, double stddev = 0.02);

  const SequenceLayout& layout() const { return layout_; }
  std::size_t text_vocab() const { return token_.rows(); }
  std::size_t image_vocab() const { return image_.rows(); }
  std::size_t d_model() const { return token_.cols(); }
  EmbeddingTables tables() const;

  Tensor token_;
  Tensor text_pos_;
  Tensor pad_;
  Tensor image_;
  Tensor row_;
  Tensor col_;

 private:
  SequenceLayout layout_;
};

// Returns a total_len x d matrix. Text position p < len(text) holds
// token[text[p]] + text_pos[p]; later text positions hold pad[p]. Image
// position (r, c) holds image[tok] + row[r] + col[c]; image positions past
// the end of `image` are zero.
Tensor embed_sequence(std::span<const Token> text, std::span<const Token> image,
                      const SequenceLayout& layout, const EmbeddingTables& tables);
Tensor embed_sequence(std::span<const Token> text, std::span<const Token> image,
                      const EmbeddingScheme& scheme);

// Accumulates dL/d(tables) given dL/d(embedded sequence).
void embed_backward(std::span<const Token> text, std::span<const Token> image,
                    const SequenceLayout& layout, const Tensor& grad,
                    const EmbeddingGrads& grads);

}  // namespace shardsim::toymodel
