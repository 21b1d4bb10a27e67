// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/toymodel/embedding.hpp"

#include <stdexcept>
#include <string>

namespace shardsim::toymodel {

EmbeddingScheme::EmbeddingScheme(SequenceLayout layout, std::size_t text_vocab,
                                 std::size_t image_vocab, std::size_t d_model)
    : token_(text_vocab, d_model),
      text_pos_(layout.text_len, d_model),
      pad_(layout.text_len, d_model),
      image_(image_vocab, d_model),
      row_(layout.grid_h, d_model),
      col_(layout.grid_w, d_model),
      layout_(layout) {
  layout.validate();
  if (text_vocab < 1 || image_vocab < 1 || d_model < 1) {
    throw std::invalid_argument("EmbeddingScheme: sizes must be >= 1");
  }
}

EmbeddingScheme EmbeddingScheme::random(SequenceLayout layout, std::size_t text_vocab,
                                        std::size_t image_vocab, std::size_t d_model,
                                        Rng& rng, double stddev) {
  EmbeddingScheme s(layout, text_vocab, image_vocab, d_model);
  for (Tensor* t : {&s.token_, &s.text_pos_, &s.pad_, &s.image_, &s.row_, &s.col_}) {
    *t = Tensor::gaussian(t->rows(), t->cols(), rng, stddev);
  }
  return s;
}

EmbeddingTables EmbeddingScheme::tables() const {
  return EmbeddingTables{&token_, &text_pos_, &pad_, &image_, &row_, &col_};
}

namespace {

void check_inputs(std::span<const Token> text, std::span<const Token> image,
                  const SequenceLayout& layout, std::size_t text_vocab,
                  std::size_t image_vocab) {
  if (text.size() > layout.text_len) throw std::invalid_argument("embed: caption too long");
  if (image.size() > layout.image_len()) throw std::invalid_argument("embed: too many image tokens");
  for (Token t : text) {
    if (t < 0 || static_cast<std::size_t>(t) >= text_vocab) {
      throw std::out_of_range("embed: text token " + std::to_string(t) + " out of vocab");
    }
  }
  for (Token t : image) {
    if (t < 0 || static_cast<std::size_t>(t) >= image_vocab) {
      throw std::out_of_range("embed: image token " + std::to_string(t) + " out of vocab");
    }
  }
}

void add_row(double* dst, const Tensor& table, std::size_t row) {
  const std::size_t d = table.cols();
  const double* src = table.data() + row * d;
  for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
}

void add_to_row(Tensor& table, std::size_t row, const double* src) {
  const std::size_t d = table.cols();
  double* dst = table.mutable_data() + row * d;
  for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
}

}  // namespace

Tensor embed_sequence(std::span<const Token> text, std::span<const Token> image,
                      const SequenceLayout& layout, const EmbeddingTables& tables) {
  check_inputs(text, image, layout, tables.token->rows(), tables.image->rows());
  const std::size_t d = tables.token->cols();
  Tensor out(layout.total_len(), d);
  double* o = out.mutable_data();
  for (std::size_t p = 0; p < layout.text_len; ++p) {
    double* dst = o + p * d;
    if (p < text.size()) {
      add_row(dst, *tables.token, static_cast<std::size_t>(text[p]));
      add_row(dst, *tables.text_pos, p);
    } else {
      add_row(dst, *tables.pad, p);
    }
  }
  for (std::size_t i = 0; i < image.size(); ++i) {
    double* dst = o + (layout.text_len + i) * d;
    add_row(dst, *tables.image, static_cast<std::size_t>(image[i]));
    add_row(dst, *tables.row, i / layout.grid_w);
    add_row(dst, *tables.col, i % layout.grid_w);
  }
  return out;
}

Tensor embed_sequence(std::span<const Token> text, std::span<const Token> image,
                      const EmbeddingScheme& scheme) {
  return embed_sequence(text, image, scheme.layout(), scheme.tables());
}

void embed_backward(std::span<const Token> text, std::span<const Token> image,
                    const SequenceLayout& layout, const Tensor& grad,
                    const EmbeddingGrads& grads) {
  const std::size_t d = grad.cols();
  for (std::size_t p = 0; p < layout.text_len; ++p) {
    const double* g = grad.data() + p * d;
    if (p < text.size()) {
      add_to_row(*grads.token, static_cast<std::size_t>(text[p]), g);
      add_to_row(*grads.text_pos, p, g);
    } else {
      add_to_row(*grads.pad, p, g);
    }
  }
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double* g = grad.data() + (layout.text_len + i) * d;
    add_to_row(*grads.image, static_cast<std::size_t>(image[i]), g);
    add_to_row(*grads.row, i / layout.grid_w, g);
    add_to_row(*grads.col, i % layout.grid_w, g);
  }
}

}  // namespace shardsim::toymodel
