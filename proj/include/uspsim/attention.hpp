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

#pragma once

#include <cstdint>
#include <vector>

#include "uspsim/matrix.hpp"
#include "uspsim/rng.hpp"
#include "uspsim/rote.hpp"

namespace uspsim {

/// A self-attention problem: H heads of S x d_h queries/keys/values plus the
/// timeline driving RoTE and the causal/padding masks.
template <typename T>
struct AttentionProblem {
  std::vector<Mat<T>> q, k, v;       // H matrices, each S x d_h
  TokenTimeline timeline;            // length S
  bool causal = true;
  std::vector<std::uint8_t> pad_mask;  // length S, 1 = valid
  RoteConfig rote;                   // rote.head_dim must equal d_h

  std::size_t n_heads() const { return q.size(); }
  std::size_t seq_len() const { return q.empty() ? 0 : q[0].rows(); }
  std::size_t head_dim() const { return q.empty() ? 0 : q[0].cols(); }
  void validate() const;
};

/// Online-softmax statistics for a set of query rows: per-row running max m,
/// normalizer l, and weighted value accumulator o. Rows with l = 0 are
/// "empty" (no visible key seen yet) and carry m = -inf, o = 0.
/// Accumulation is always in double, regardless of the problem element type.
struct PartialAttn {
  std::vector<double> m;
  std::vector<double> l;
  MatD o;  // n_rows x d_h

  static PartialAttn empty(std::size_t n_rows, std::size_t d_h);
  std::size_t n_rows() const { return m.size(); }
  bool row_empty(std::size_t i) const { return l[i] == 0.0; }
};

/// Exact single-rank attention. Per head: logits = rotate(Q) rotate(K)^T
/// scaled by 1/sqrt(d_h), -inf at masked pairs (causal j > i and padding),
/// row softmax, times V. Padded query rows produce zeros; a valid query row
/// with no visible key raises DegenerateRowError.
template <typename T>
std::vector<Mat<T>> reference_attention(const AttentionProblem<T>& p);

/// Online-softmax statistics of one KV block against a set of (already
/// rotated) query rows. The 1/sqrt(d_h) scale is applied here. mask_block is
/// n_q x n_k visibility (1 = attend). Fully masked rows stay empty.
template <typename T>
PartialAttn block_stats(const Mat<T>& q_rows, const Mat<T>& k_block, const Mat<T>& v_block,
                        const BoolMat& mask_block);

/// Merges two partial statistics over the same query rows:
///   m = max(m_a, m_b); l = l_a e^(m_a-m) + l_b e^(m_b-m); o likewise.
/// Merging with an empty row is the identity.
PartialAttn merge_stats(const PartialAttn& a, const PartialAttn& b);

/// o / l per row. Raises DegenerateRowError on any empty row.
MatD finalize(const PartialAttn& p);

/// Seeded random attention problem for tests and verification runs. The last
/// n_padded positions are masked out; timestamps follow the 40 ms grid.
template <typename T>
AttentionProblem<T> random_problem(std::size_t seq_len, std::size_t n_heads,
                                   std::size_t head_dim, bool causal, std::size_t n_padded,
                                   std::uint64_t seed);

}  // namespace uspsim
