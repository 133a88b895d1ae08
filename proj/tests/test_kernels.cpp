/* Copyright 2026 the uspsim authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <cmath>
#include <vector>

#include <doctest.h>

#include "uspsim/matrix.hpp"

namespace {

using uspsim::DegenerateRowError;
using uspsim::Mat;
using uspsim::MatD;
using uspsim::Rng;
using uspsim::ShapeError;

/// Independent oracle: naive triple-loop product accumulating in the order
/// (i, j, k), deliberately different from the library's (i, k, j) kernel.
MatD matmul_oracle(const MatD& a, const MatD& b) {
  MatD out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
      out.at(i, j) = acc;
    }
  }
  return out;
}

TEST_CASE("matmul: identity and hand-computed products") {
  const MatD a{{1.0, 2.0}, {3.0, 4.0}};
  CHECK(matmul(a, MatD::identity(2)) == a);
  CHECK(matmul(MatD::identity(2), a) == a);

  const MatD ones{{1.0}, {1.0}};
  const MatD prod = matmul(a, ones);
  CHECK(prod.at(0, 0) == 3.0);
  CHECK(prod.at(1, 0) == 7.0);
}

TEST_CASE("matmul: random matrices match the naive oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const MatD a = MatD::random_normal(7, 5, rng);
    const MatD b = MatD::random_normal(5, 3, rng);
    CHECK(uspsim::max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-12);
  }
}

TEST_CASE("matmul: associativity within float tolerance") {
  Rng rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    const MatD a = MatD::random_uniform(4, 6, rng);
    const MatD b = MatD::random_uniform(6, 5, rng);
    const MatD c = MatD::random_uniform(5, 3, rng);
    CHECK(uspsim::max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-9);
  }
}

TEST_CASE("matmul: shape mismatch throws") {
  const MatD a(2, 3);
  const MatD b(2, 3);
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("softmax_rows: known distributions") {
  const MatD two{{0.0, 0.0}};
  const MatD s2 = softmax_rows(two);
  CHECK(s2.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s2.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));

  // softmax([ln 2, 0]) = [2/3, 1/3].
  const MatD lg{{std::log(2.0), 0.0}};
  const MatD s3 = softmax_rows(lg);
  CHECK(s3.at(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(s3.at(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax_rows: large logits do not overflow") {
  const MatD big{{1000.0, 1000.0}};
  const MatD s = softmax_rows(big);
  CHECK(s.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.all_finite());
}

TEST_CASE("softmax_rows: shift invariance per row") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    MatD m = MatD::random_normal(3, 6, rng);
    MatD shifted = m;
    const double delta = rng.uniform(-50.0, 50.0);
    for (std::size_t j = 0; j < shifted.cols(); ++j) shifted.at(1, j) += delta;
    CHECK(uspsim::max_abs_diff(softmax_rows(m), softmax_rows(shifted)) < 1e-12);
  }
}

TEST_CASE("softmax_rows: fully masked row is an error") {
  const double inf = std::numeric_limits<double>::infinity();
  const MatD masked{{0.0, 1.0}, {-inf, -inf}};
  CHECK_THROWS_AS(softmax_rows(masked), DegenerateRowError);
}

TEST_CASE("layer_norm: constant rows collapse to beta") {
  const MatD x{{5.0, 5.0, 5.0, 5.0}};
  const std::vector<double> gamma(4, 1.0);
  const std::vector<double> beta(4, 0.25);
  const MatD out = layer_norm(x, gamma, beta, 1e-5);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(out.at(0, j) == doctest::Approx(0.25).epsilon(1e-9));
  }
}

TEST_CASE("layer_norm: matches the direct formula") {
  Rng rng(14);
  const MatD x = MatD::random_normal(5, 8, rng);
  std::vector<double> gamma(8), beta(8);
  for (auto& g : gamma) g = rng.uniform(0.5, 1.5);
  for (auto& b : beta) b = rng.uniform(-1.0, 1.0);
  const double eps = 1e-5;
  const MatD out = layer_norm(x, gamma, beta, eps);

  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) mean += x.at(i, j);
    mean /= static_cast<double>(x.cols());
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
    }
    var /= static_cast<double>(x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double want = (x.at(i, j) - mean) / std::sqrt(var + eps) * gamma[j] + beta[j];
      CHECK(out.at(i, j) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer_norm: eps must be positive") {
  const MatD x(2, 3);
  const std::vector<double> ones(3, 1.0);
  CHECK_THROWS_AS(layer_norm(x, ones, ones, 0.0), uspsim::ValueError);
}

TEST_CASE("gelu: fixed points and sign behavior") {
  CHECK(uspsim::gelu(0.0) == 0.0);
  // gelu(x) -> x for large positive x, -> 0 for large negative x.
  CHECK(uspsim::gelu(10.0) == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(std::abs(uspsim::gelu(-10.0)) < 1e-6);
}

TEST_CASE("mlp2: zero weights broadcast the output bias") {
  const MatD x(3, 4, 1.0);
  const MatD w1(4, 5);
  const std::vector<double> b1(5, 0.0);
  const MatD w2(5, 2);
  const std::vector<double> b2{1.5, -2.5};
  const MatD out = mlp2(x, w1, b1, w2, b2);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(out.at(i, 0) == 1.5);
    CHECK(out.at(i, 1) == -2.5);
  }
}

TEST_CASE("mlp2: matches a scalar-loop oracle") {
  Rng rng(15);
  const MatD x = MatD::random_normal(4, 3, rng);
  const MatD w1 = MatD::random_normal(3, 6, rng);
  const MatD w2 = MatD::random_normal(6, 2, rng);
  std::vector<double> b1(6), b2(2);
  for (auto& b : b1) b = rng.uniform(-0.5, 0.5);
  for (auto& b : b2) b = rng.uniform(-0.5, 0.5);

  const MatD out = mlp2(x, w1, b1, w2, b2);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::vector<double> h(6);
    for (std::size_t j = 0; j < 6; ++j) {
      double acc = b1[j];
      for (std::size_t k = 0; k < 3; ++k) acc += x.at(i, k) * w1.at(k, j);
      h[j] = uspsim::gelu(acc);
    }
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = b2[j];
      for (std::size_t k = 0; k < 6; ++k) acc += h[k] * w2.at(k, j);
      CHECK(out.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("mlp2: shape-chain violations throw") {
  const MatD x(2, 3);
  const MatD w1(3, 4);
  const MatD w2(4, 2);
  const std::vector<double> b1(4, 0.0), b2(2, 0.0), bad(5, 0.0);
  CHECK_THROWS_AS(mlp2(x, MatD(2, 4), b1, w2, b2), ShapeError);
  CHECK_THROWS_AS(mlp2(x, w1, bad, w2, b2), ShapeError);
  CHECK_THROWS_AS(mlp2(x, w1, b1, MatD(3, 2), b2), ShapeError);
  CHECK_THROWS_AS(mlp2(x, w1, b1, w2, bad), ShapeError);
}

TEST_CASE("Mat: shape constraints and slicing") {
  CHECK_THROWS_AS(MatD(0, 3), ShapeError);
  CHECK_THROWS_AS(MatD(2, 2, std::vector<double>{1.0, 2.0, 3.0}), ShapeError);

  const MatD m{{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}};
  const MatD mid = m.slice_rows(1, 3);
  CHECK(mid.rows() == 2);
  CHECK(mid.at(0, 0) == 3.0);
  CHECK(mid.at(1, 1) == 6.0);
  CHECK_THROWS_AS(m.slice_rows(2, 2), ShapeError);
}

TEST_CASE("Rng: documented SplitMix64 stream") {
  // First outputs of SplitMix64 from seed 0, as published by the reference
  // implementation.
  Rng rng(0);
  CHECK(rng.next() == 0xE220A8397B1DCDAFull);
  CHECK(rng.next() == 0x6E789E6AA1B965F4ull);
  CHECK(rng.next() == 0x06C45D188009454Full);
}

TEST_CASE("Rng: uniform range and determinism") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    const double x = a.uniform();
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
    CHECK(x == b.uniform());
  }
}

TEST_CASE("Rng: below() stays in range and covers values") {
  Rng rng(7);
  std::vector<int> seen(5, 0);
  for (int i = 0; i < 500; ++i) seen[rng.below(5)] += 1;
  for (int count : seen) CHECK(count > 0);
}

TEST_CASE("Rng: shuffle is a permutation") {
  Rng rng(9);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  rng.shuffle(v);
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 8; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("max_abs_diff: exact on shifted copies") {
  Rng rng(16);
  const MatD m = MatD::random_normal(3, 3, rng);
  MatD shifted = m;
  shifted.at(2, 1) += 0.125;
  CHECK(uspsim::max_abs_diff(m, m) == 0.0);
  CHECK(uspsim::max_abs_diff(m, shifted) == 0.125);
}

}  // namespace
