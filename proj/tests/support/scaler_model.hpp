// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>

namespace shardsim::oracle {

// Straight transcription of the scaler rules, kept separate from the class.
struct ModelScaler {
  double scale;
  double lo;
  double hi;
  std::optional<std::int64_t> last_backoff;
  explicit ModelScaler(double m)
      : scale(m * 8192.0), lo(m * 128.0), hi(m * 16777216.0) {}
  bool step(bool finite, std::int64_t t) {
    if (finite) {
      scale = std::min(scale * std::pow(2.0, 1.0 / 1000.0), hi);
      return true;
    }
    if (!last_backoff || t - *last_backoff >= 125) {
      scale = std::max(scale / std::sqrt(2.0), lo);
      last_backoff = t;
    }
    return false;
  }
};


}  // namespace shardsim::oracle
