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

#include "uspsim/attention.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "uspsim/error.hpp"

namespace uspsim {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

template <typename T>
void AttentionProblem<T>::validate() const {
  if (q.empty() || q.size() != k.size() || q.size() != v.size()) {
    throw ShapeError(fmt::format("head counts disagree: q={}, k={}, v={}", q.size(), k.size(),
                                 v.size()));
  }
  const std::size_t s = q[0].rows();
  const std::size_t d = q[0].cols();
  for (std::size_t h = 0; h < q.size(); ++h) {
    for (const Mat<T>* mat : {&q[h], &k[h], &v[h]}) {
      if (mat->rows() != s || mat->cols() != d) {
        throw ShapeError(fmt::format("head {} has shape {}x{}, expected {}x{}", h, mat->rows(),
                                     mat->cols(), s, d));
      }
    }
  }
  if (timeline.size() != s) {
    throw ShapeError(fmt::format("timeline has {} entries for sequence length {}",
                                 timeline.size(), s));
  }
  timeline.validate();
  if (pad_mask.size() != s) {
    throw ShapeError(fmt::format("pad_mask has {} entries for sequence length {}",
                                 pad_mask.size(), s));
  }
  std::size_t valid = 0;
  for (std::uint8_t b : pad_mask) valid += b != 0;
  if (valid == 0) {
    throw ValueError("pad_mask leaves no valid position");
  }
  if (rote.head_dim != d) {
    throw ShapeError(fmt::format("rote head_dim {} does not match d_h {}", rote.head_dim, d));
  }
  rote.validate();
}

PartialAttn PartialAttn::empty(std::size_t n_rows, std::size_t d_h) {
  PartialAttn p;
  p.m.assign(n_rows, kNegInf);
  p.l.assign(n_rows, 0.0);
  p.o = MatD(n_rows, d_h);
  return p;
}

template <typename T>
std::vector<Mat<T>> reference_attention(const AttentionProblem<T>& p) {
  p.validate();
  const std::size_t s = p.seq_len();
  const std::size_t d = p.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  std::vector<Mat<T>> out;
  out.reserve(p.n_heads());
  for (std::size_t h = 0; h < p.n_heads(); ++h) {
    const Mat<T> qr = rotate(p.q[h], p.timeline, p.rote);
    const Mat<T> kr = rotate(p.k[h], p.timeline, p.rote);

    Mat<T> o(s, d);  // zero-initialized; padded query rows stay zero
    std::vector<double> probs(s);
    for (std::size_t i = 0; i < s; ++i) {
      if (p.pad_mask[i] == 0) continue;
      double row_max = kNegInf;
      for (std::size_t j = 0; j < s; ++j) {
        const bool visible = p.pad_mask[j] != 0 && (!p.causal || j <= i);
        if (!visible) {
          probs[j] = kNegInf;
          continue;
        }
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dot += static_cast<double>(qr.at(i, c)) * static_cast<double>(kr.at(j, c));
        }
        probs[j] = dot * scale;
        row_max = std::max(row_max, probs[j]);
      }
      if (row_max == kNegInf) {
        throw DegenerateRowError(fmt::format("query row {} has no visible keys", i));
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        probs[j] = probs[j] == kNegInf ? 0.0 : std::exp(probs[j] - row_max);
        denom += probs[j];
      }
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < s; ++j) {
          acc += probs[j] * static_cast<double>(p.v[h].at(j, c));
        }
        o.at(i, c) = static_cast<T>(acc / denom);
      }
    }
    out.push_back(std::move(o));
  }
  return out;
}

template <typename T>
PartialAttn block_stats(const Mat<T>& q_rows, const Mat<T>& k_block, const Mat<T>& v_block,
                        const BoolMat& mask_block) {
  if (q_rows.cols() != k_block.cols() || k_block.rows() != v_block.rows() ||
      k_block.cols() != v_block.cols()) {
    throw ShapeError(fmt::format("block shapes disagree: q {}x{}, k {}x{}, v {}x{}",
                                 q_rows.rows(), q_rows.cols(), k_block.rows(), k_block.cols(),
                                 v_block.rows(), v_block.cols()));
  }
  if (mask_block.rows != q_rows.rows() || mask_block.cols != k_block.rows()) {
    throw ShapeError(fmt::format("mask is {}x{}, expected {}x{}", mask_block.rows,
                                 mask_block.cols, q_rows.rows(), k_block.rows()));
  }
  const std::size_t d = q_rows.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  PartialAttn p = PartialAttn::empty(q_rows.rows(), d);
  std::vector<double> logits(k_block.rows());
  for (std::size_t i = 0; i < q_rows.rows(); ++i) {
    double row_max = kNegInf;
    for (std::size_t j = 0; j < k_block.rows(); ++j) {
      if (mask_block.at(i, j) == 0) {
        logits[j] = kNegInf;
        continue;
      }
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dot += static_cast<double>(q_rows.at(i, c)) * static_cast<double>(k_block.at(j, c));
      }
      logits[j] = dot * scale;
      row_max = std::max(row_max, logits[j]);
    }
    if (row_max == kNegInf) continue;  // fully masked block: row stays empty
    p.m[i] = row_max;
    for (std::size_t j = 0; j < k_block.rows(); ++j) {
      if (logits[j] == kNegInf) continue;
      const double w = std::exp(logits[j] - row_max);
      p.l[i] += w;
      for (std::size_t c = 0; c < d; ++c) {
        p.o.at(i, c) += w * static_cast<double>(v_block.at(j, c));
      }
    }
  }
  return p;
}

PartialAttn merge_stats(const PartialAttn& a, const PartialAttn& b) {
  if (a.n_rows() != b.n_rows() || a.o.cols() != b.o.cols()) {
    throw ShapeError(fmt::format("cannot merge stats of {} rows x {} with {} rows x {}",
                                 a.n_rows(), a.o.cols(), b.n_rows(), b.o.cols()));
  }
  const std::size_t d = a.o.cols();
  PartialAttn out = PartialAttn::empty(a.n_rows(), d);
  for (std::size_t i = 0; i < a.n_rows(); ++i) {
    // Merging with an empty row is the identity; handling it explicitly also
    // avoids exp(-inf - -inf) when both sides are empty.
    if (a.row_empty(i) && b.row_empty(i)) continue;
    if (a.row_empty(i) || b.row_empty(i)) {
      const PartialAttn& src = a.row_empty(i) ? b : a;
      out.m[i] = src.m[i];
      out.l[i] = src.l[i];
      for (std::size_t c = 0; c < d; ++c) out.o.at(i, c) = src.o.at(i, c);
      continue;
    }
    const double m = std::max(a.m[i], b.m[i]);
    const double wa = std::exp(a.m[i] - m);
    const double wb = std::exp(b.m[i] - m);
    out.m[i] = m;
    out.l[i] = a.l[i] * wa + b.l[i] * wb;
    for (std::size_t c = 0; c < d; ++c) {
      out.o.at(i, c) = a.o.at(i, c) * wa + b.o.at(i, c) * wb;
    }
  }
  return out;
}

MatD finalize(const PartialAttn& p) {
  MatD out(p.n_rows(), p.o.cols());
  for (std::size_t i = 0; i < p.n_rows(); ++i) {
    if (p.row_empty(i)) {
      throw DegenerateRowError(fmt::format("row {} has no visible keys", i));
    }
    for (std::size_t c = 0; c < p.o.cols(); ++c) {
      out.at(i, c) = p.o.at(i, c) / p.l[i];
    }
  }
  return out;
}

template <typename T>
AttentionProblem<T> random_problem(std::size_t seq_len, std::size_t n_heads,
                                   std::size_t head_dim, bool causal, std::size_t n_padded,
                                   std::uint64_t seed) {
  if (seq_len == 0 || n_heads == 0 || head_dim == 0 || head_dim % 2 != 0) {
    throw ValueError(fmt::format("bad problem dims: S={}, H={}, d_h={}", seq_len, n_heads,
                                 head_dim));
  }
  if (n_padded >= seq_len) {
    throw ValueError(fmt::format("{} padded of {} positions leaves no valid token", n_padded,
                                 seq_len));
  }
  Rng rng(seed);
  AttentionProblem<T> p;
  p.causal = causal;
  p.rote.head_dim = head_dim;
  for (std::size_t h = 0; h < n_heads; ++h) {
    p.q.push_back(Mat<T>::random_normal(seq_len, head_dim, rng));
    p.k.push_back(Mat<T>::random_normal(seq_len, head_dim, rng));
    p.v.push_back(Mat<T>::random_normal(seq_len, head_dim, rng));
  }
  p.timeline.taus.resize(seq_len);
  for (std::size_t i = 0; i < seq_len; ++i) {
    p.timeline.taus[i] = static_cast<double>(i) * kAudioTokenStrideSeconds;
  }
  p.pad_mask.assign(seq_len, 1);
  for (std::size_t i = seq_len - n_padded; i < seq_len; ++i) p.pad_mask[i] = 0;
  p.validate();
  return p;
}

template struct AttentionProblem<float>;
template struct AttentionProblem<double>;
template std::vector<Mat<float>> reference_attention<float>(const AttentionProblem<float>&);
template std::vector<Mat<double>> reference_attention<double>(const AttentionProblem<double>&);
template PartialAttn block_stats<float>(const Mat<float>&, const Mat<float>&, const Mat<float>&,
                                        const BoolMat&);
template PartialAttn block_stats<double>(const Mat<double>&, const Mat<double>&,
                                         const Mat<double>&, const BoolMat&);
template AttentionProblem<float> random_problem<float>(std::size_t, std::size_t, std::size_t,
                                                       bool, std::size_t, std::uint64_t);
template AttentionProblem<double> random_problem<double>(std::size_t, std::size_t, std::size_t,
                                                         bool, std::size_t, std::uint64_t);

}  // namespace uspsim
