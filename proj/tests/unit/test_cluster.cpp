// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "shardsim/cluster.hpp"
#include "shardsim/lowp.hpp"
#include "shardsim/rng.hpp"
#include "shardsim/tensor.hpp"

using namespace shardsim;
using namespace shardsim::cluster;

namespace {

Tensor vec(std::vector<double> v) { return Tensor::vector(std::move(v)); }

std::vector<Tensor> random_tensors(std::size_t count, std::size_t rows, std::size_t cols,
                                   Rng& rng) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(Tensor::gaussian(rows, cols, rng));
  return out;
}

// Concatenation by explicit index arithmetic.
Tensor naive_concat(const std::vector<Tensor>& parts, int axis) {
  std::size_t rows = parts[0].rows(), cols = parts[0].cols();
  if (axis == 0) rows *= parts.size(); else cols *= parts.size();
  Tensor out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < parts[k].rows(); ++i) {
      for (std::size_t j = 0; j < parts[k].cols(); ++j) {
        if (axis == 0) out.set(k * parts[k].rows() + i, j, parts[k](i, j));
        else out.set(i, k * parts[k].cols() + j, parts[k](i, j));
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("topology validation") {
  CHECK_THROWS_AS(SimCluster({0, 1, 0}), std::invalid_argument);
  CHECK_THROWS_AS(SimCluster({1, 0, 0}), std::invalid_argument);
  CHECK(Topology{3, 4, 0}.world_size() == 12);
}

TEST_CASE("all_gather") {
  SimCluster two({1, 2, 0});
  std::vector<Tensor> shards = {vec({1, 2}), vec({3, 4})};
  for (auto& s : shards) s = transpose(s);  // 1 x 2 rows
  const auto full = two.all_gather(shards, 1);
  REQUIRE(full.size() == 2);
  for (const auto& f : full) CHECK(f == Tensor::from_rows({{1, 2, 3, 4}}));

  SimCluster one({1, 1, 0});
  Rng rng(1);
  const auto single = random_tensors(1, 3, 5, rng);
  CHECK(one.all_gather(single, 1)[0] == single[0]);

  SimCluster eight({1, 8, 0});
  for (int axis : {0, 1}) {
    const auto parts = random_tensors(8, 3, 2, rng);
    const Tensor want = naive_concat(parts, axis);
    for (const auto& f : eight.all_gather(parts, axis)) CHECK(f == want);
  }
  CHECK(eight.ledger().count(Group::kIntra, "other") == 2);
  CHECK_THROWS_AS(eight.all_gather(random_tensors(3, 1, 1, rng), 0), std::invalid_argument);
}

TEST_CASE("reduce_scatter_avg") {
  SimCluster two({1, 2, 0});
  const std::vector<Tensor> grads = {vec({2, 4}), vec({4, 8})};
  const auto out = two.reduce_scatter_avg(grads, 0);
  CHECK(out[0] == vec({3}));
  CHECK(out[1] == vec({6}));

  Rng rng(2);
  for (std::size_t m = 1; m <= 4; ++m) {
    SimCluster c({1, m, 0});
    const Tensor x = Tensor::gaussian(4, 4 * m, rng);
    const std::vector<Tensor> same(m, x);
    const auto sh = c.reduce_scatter_avg(same, 1);
    for (std::size_t k = 0; k < m; ++k) CHECK(max_abs_diff(sh[k], slice(x, 1, 4 * k, 4)) <= 4e-16 * max_abs(x));

    const auto many = random_tensors(m, 2 * m, 3, rng);
    const auto got = c.reduce_scatter_avg(many, 0);
    for (std::size_t k = 0; k < m; ++k) {
      for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
          double sum = 0;
          for (std::size_t g = 0; g < m; ++g) sum += many[g](2 * k + i, j);
          CHECK(got[k](i, j) == doctest::Approx(sum / m).epsilon(1e-14));
        }
      }
    }
  }

  SimCluster four({1, 4, 0});
  auto bad = random_tensors(4, 8, 2, rng);
  bad[2].set(5, 1, std::numeric_limits<double>::quiet_NaN());
  const auto r = four.reduce_scatter_avg(bad, 0);
  for (std::size_t k = 0; k < 4; ++k) CHECK(all_finite(r[k]) == (k != 2));
  CHECK(std::isnan(r[2](1, 1)));
}

TEST_CASE("all_reduce_mean") {
  SimCluster two({2, 1, 0});
  const std::vector<Tensor> v = {vec({8}), vec({16})};
  for (const auto& r : {two.all_reduce_mean(v, lowp::m169(), false)}) {
    CHECK(r.value == vec({12}));
    CHECK_FALSE(r.had_nonfinite);
  }

  const std::vector<Tensor> inf = {vec({std::numeric_limits<double>::infinity()}),
                                   vec({1.0})};
  const auto clamped = two.all_reduce_mean(inf, lowp::m169(), true);
  CHECK(clamped.had_nonfinite);
  CHECK(clamped.value[0] == 15.984375);
  CHECK(clamped.value[0] == lowp::max_finite(lowp::m169()));
  const auto unclamped = two.all_reduce_mean(inf, lowp::m169(), false);
  CHECK(std::isinf(unclamped.value[0]));

  Rng rng(3);
  SimCluster four({4, 1, 0});
  for (int trial = 0; trial < 20; ++trial) {
    const auto vals = random_tensors(4, 5, 5, rng);
    const auto r = four.all_reduce_mean(vals, lowp::m169(), true);
    for (std::size_t e = 0; e < 25; ++e) {
      double mean = 0;
      for (const auto& t : vals) mean += t[e];
      mean /= 4;
      CHECK(lowp::ulp_distance(r.value[e], lowp::quantize(mean, lowp::m169()), lowp::m169()) <= 1.0);
    }
  }
}

TEST_CASE("sum all_reduce and group sizes") {
  SimCluster c({3, 2, 0});
  const std::vector<Tensor> v = {vec({1}), vec({2}), vec({4})};
  CHECK(c.all_reduce(v, ReduceOp::kSum, Group::kInter, nullptr, false).value == vec({7}));
  CHECK_THROWS_AS(c.all_reduce(v, ReduceOp::kSum, Group::kIntra, nullptr, false),
                  std::invalid_argument);
}

TEST_CASE("grouped_all_reduce") {
  Rng rng(4);
  SimCluster c({2, 1, 0});
  std::vector<std::vector<Tensor>> buffers(2);
  for (auto& b : buffers) b = random_tensors(3, 2, 5, rng);
  const auto grouped = c.grouped_all_reduce(buffers, ReduceOp::kMean, Group::kInter,
                                            &lowp::m169(), true);
  REQUIRE(c.ledger().entries().size() == 1);
  CHECK(c.ledger().entries()[0].element_count == 30);
  CHECK(c.ledger().entries()[0].bits_per_element == 16);
  for (std::size_t b = 0; b < 3; ++b) {
    const std::vector<Tensor> one = {buffers[0][b], buffers[1][b]};
    CHECK(grouped[b].value == c.all_reduce_mean(one, lowp::m169(), true).value);
  }
  SimCluster empty({2, 1, 0});
  std::vector<std::vector<Tensor>> none(2);
  CHECK(empty.grouped_all_reduce(none, ReduceOp::kMean, Group::kInter, nullptr, false).empty());
  CHECK(empty.ledger().entries().empty());
}

TEST_CASE("broadcast") {
  Rng rng(5);
  const Tensor x = Tensor::gaussian(3, 3, rng);
  SimCluster one({1, 1, 0});
  CHECK(one.broadcast(x, 0)[0] == x);
  SimCluster four({4, 1, 0});
  const auto copies = four.broadcast(x, 2);
  CHECK(copies.size() == 4);
  for (const auto& t : copies) CHECK(t == x);
  CHECK(four.ledger().entries().size() == 1);
  CHECK_THROWS_AS(four.broadcast(x, 4), std::out_of_range);
}

TEST_CASE("ledger byte accounting") {
  CollectiveLedger l;
  OpLabel p;
  p.tag = "P";
  l.record("all_reduce", Group::kInter, 10, 16, p);
  l.record("all_reduce", Group::kInter, 3, 16, p);
  l.record("all_reduce", Group::kIntra, 100, 32, p);
  CHECK(l.bytes(Group::kInter, "P") == 26);
  CHECK(l.count(Group::kInter, "P") == 2);
  CHECK(l.bytes(Group::kIntra, "P") == 400);
  CHECK(l.bytes(Group::kInter, "Q") == 0);
  CHECK(payload_bits(nullptr) == 32);
  CHECK(payload_bits(&lowp::fp16()) == 16);
}

TEST_CASE("collectives are deterministic") {
  auto run = [] {
    Rng rng(6);
    SimCluster c({4, 2, 9});
    std::vector<Tensor> out;
    for (int t = 0; t < 5; ++t) {
      const auto vals = random_tensors(4, 3, 4, rng);
      out.push_back(c.all_reduce_mean(vals, lowp::m169(), true).value);
      const auto g = random_tensors(2, 4, 4, rng);
      for (auto& s : c.reduce_scatter_avg(g, 1, &lowp::fp16())) out.push_back(s);
    }
    return std::make_pair(out, c.ledger().entries().size());
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.second == b.second);
  REQUIRE(a.first.size() == b.first.size());
  for (std::size_t i = 0; i < a.first.size(); ++i) CHECK(a.first[i] == b.first[i]);
}
