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

// Sequence-parallel attention over the simulated fabric.
//
// The hybrid scheme composes two orthogonal factorizations of an SP block of
// P = p_u * p_r ranks:
//
//   * a head-scatter / sequence-gather all-to-all across each Ulysses group
//     (p_u ranks), after which every rank holds its group's contiguous
//     sequence span but only H / p_u heads, and
//   * a ring pass across each ring group (p_r ranks) that circulates rotated
//     K/V spans peer-to-peer while queries stay put, folding each visiting
//     block into an online-softmax accumulator.
//
// Everything outside attention (LayerNorm, FFN, residuals) acts row-wise on
// the rank's own shard and moves zero bytes, which is what makes the
// communication ledger of a run directly comparable to the closed forms at
// the bottom of this header.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "uspsim/attention.hpp"
#include "uspsim/fabric.hpp"
#include "uspsim/matrix.hpp"
#include "uspsim/rote.hpp"

namespace uspsim::sp {

// ---------------------------------------------------------------------------
// Shard geometry
// ---------------------------------------------------------------------------

/// How a global (s_global x h_total x d_h) attention problem is cut across
/// the P = p_u * p_r ranks of one SP block.
///
/// Rank with local index L (its position inside the SP block) owns the
/// contiguous row span [L * s_global / P, (L + 1) * s_global / P). Local
/// indices factor as L = r * p_u + u with the Ulysses coordinate u varying
/// fastest, so a Ulysses group (fixed r) owns a contiguous span of
/// s_global / p_r rows — the span each of its members holds after the
/// head-scatter all-to-all.
struct ShardLayout {
  std::size_t s_global = 0;  // global sequence length
  std::size_t h_total = 0;   // total attention heads
  std::size_t d_h = 0;       // head dimension
  std::size_t p_u = 1;       // Ulysses degree
  std::size_t p_r = 1;       // ring degree

  std::size_t sp() const { return p_u * p_r; }
  /// Rows per rank before the Ulysses gather.
  std::size_t shard_len() const { return s_global / sp(); }
  /// Rows per rank after the Ulysses gather (one ring position's span).
  std::size_t span_len() const { return s_global / p_r; }
  /// Heads per rank after the Ulysses scatter.
  std::size_t h_local() const { return h_total / p_u; }

  /// First global row owned by local index `local`.
  std::size_t seq_start(std::size_t local) const { return local * shard_len(); }
  /// First global row of ring position r's gathered span.
  std::size_t span_start(std::size_t r) const { return r * span_len(); }
  /// First head owned by Ulysses coordinate u.
  std::size_t head_start(std::size_t u) const { return u * h_local(); }

  /// Throws ShapeError unless s_global splits evenly into P shards and
  /// h_total into p_u head groups (all extents positive).
  void validate() const;
};

// ---------------------------------------------------------------------------
// Replicated metadata and per-rank shards
// ---------------------------------------------------------------------------

/// Batch metadata every rank holds in full. The loader hands identical
/// batches to all ranks of an SP group, so global timestamps and the global
/// pad mask are replicated for free; only q/k/v payloads ever cross the
/// fabric, keeping the ledger equal to the closed forms.
struct SpMeta {
  ShardLayout layout;
  TokenTimeline timeline;              // global, length s_global
  std::vector<std::uint8_t> pad_mask;  // global, 1 = valid row
  bool causal = true;
  RoteConfig rote;

  void validate() const;
};

/// One rank's slice of the batch: shard_len consecutive rows of every head's
/// q/k/v, plus the matching timeline / pad-mask restrictions.
template <typename T>
struct SpInput {
  std::vector<Mat<T>> q;  // h_total mats of (shard_len x d_h)
  std::vector<Mat<T>> k;
  std::vector<Mat<T>> v;
  TokenTimeline timeline_shard;
  std::vector<std::uint8_t> pad_mask_shard;

  /// Checks shard shapes against `meta` and that the timeline / pad-mask
  /// shards equal the global metadata restricted to local index `local`.
  void validate(const SpMeta& meta, std::size_t local) const;
};

/// Cuts local index `local`'s shard out of a full attention problem.
template <typename T>
SpInput<T> shard_problem(const AttentionProblem<T>& p, const ShardLayout& layout,
                         std::size_t local);

/// Builds the replicated metadata for sharding `p` across a (p_u, p_r) block.
template <typename T>
SpMeta make_meta(const AttentionProblem<T>& p, std::size_t p_u, std::size_t p_r);

/// Reassembles per-local-index output shards (each h_total mats of
/// (shard_len x d_h)) into h_total global (s_global x d_h) mats.
template <typename T>
std::vector<Mat<T>> unshard_heads(const std::vector<std::vector<Mat<T>>>& shards,
                                  const ShardLayout& layout);

// ---------------------------------------------------------------------------
// Attention entry points
// ---------------------------------------------------------------------------

/// Hybrid attention for the calling rank. Scatters heads / gathers sequence
/// across the Ulysses group (phase "qkv_a2a"), circulates rotated K/V spans
/// around the ring group (phases "ring_step_0", "ring_step_1", ...), then
/// scatters outputs back (phase "out_a2a"). Returns the rank's output shard:
/// h_total mats of (shard_len x d_h). Degenerate axes cost zero bytes:
/// p_u = 1 skips both all-to-alls and p_r = 1 performs no ring steps, so
/// (1, 1) reduces to the serial reference with an empty ledger.
template <typename T>
std::vector<Mat<T>> usp_attention(RankContext& ctx, const SpInput<T>& inp,
                                  const SpMeta& meta);

/// Pure Ulysses attention; requires a topology with p_r == 1 (TopologyError
/// otherwise) so the gathered span is the whole sequence.
template <typename T>
std::vector<Mat<T>> ulysses_attention(RankContext& ctx, const SpInput<T>& inp,
                                      const SpMeta& meta);

/// Pure ring attention; requires a topology with p_u == 1 (TopologyError
/// otherwise) so every rank keeps all heads.
template <typename T>
std::vector<Mat<T>> ring_attention(RankContext& ctx, const SpInput<T>& inp,
                                   const SpMeta& meta);

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

/// Dense weights for one pre-norm transformer block with
/// d_model = h_total * d_h.
template <typename T>
struct BlockWeights {
  Mat<T> wq, wk, wv, wo;               // each d_model x d_model
  std::vector<T> ln1_gamma, ln1_beta;  // attention-path LayerNorm
  std::vector<T> ln2_gamma, ln2_beta;  // FFN-path LayerNorm
  Mat<T> ffn_w1;                       // d_model x d_ffn
  std::vector<T> ffn_b1;
  Mat<T> ffn_w2;                       // d_ffn x d_model
  std::vector<T> ffn_b2;

  void validate(std::size_t d_model) const;
};

/// Seeded random block weights: unit LayerNorms, 1/sqrt(fan_in)-scaled
/// normal projections, zero biases.
template <typename T>
BlockWeights<T> make_block_weights(std::size_t d_model, std::size_t d_ffn,
                                   std::uint64_t seed);

/// One pre-norm transformer block on the calling rank's hidden-state shard
/// (shard_len x d_model): LN -> q/k/v projections -> usp_attention -> output
/// projection -> residual, then LN -> 2-layer GELU FFN -> residual. Only the
/// attention phases communicate; LayerNorms and the FFN touch local rows
/// only.
template <typename T>
Mat<T> sp_transformer_block(RankContext& ctx, const Mat<T>& hidden_shard,
                            const BlockWeights<T>& w, const SpMeta& meta);

/// Fabric-free single-rank oracle for sp_transformer_block: identical math
/// on the full (s_global x d_model) hidden state, attention via
/// reference_attention.
template <typename T>
Mat<T> serial_transformer_block(const Mat<T>& hidden, const BlockWeights<T>& w,
                                const SpMeta& meta);

// ---------------------------------------------------------------------------
// Closed-form per-rank byte counts
// ---------------------------------------------------------------------------

/// Bytes one rank sends in phase "qkv_a2a":
/// 3 * shard_len * h_local * d_h * (p_u - 1) * elem_bytes.
std::uint64_t ulysses_qkv_bytes_per_rank(const ShardLayout& layout,
                                         std::size_t elem_bytes);

/// Bytes one rank sends in phase "out_a2a": a third of the qkv phase.
std::uint64_t ulysses_out_bytes_per_rank(const ShardLayout& layout,
                                         std::size_t elem_bytes);

/// Bytes one rank sends across all ring steps combined:
/// (p_r - 1) * 2 * span_len * h_local * d_h * elem_bytes.
std::uint64_t ring_bytes_per_rank(const ShardLayout& layout, std::size_t elem_bytes);

// ---------------------------------------------------------------------------
// Equivalence harness
// ---------------------------------------------------------------------------

/// Outcome of one parallel-vs-serial comparison run.
struct UspReport {
  double max_abs_err = 0.0;       // parallel output vs serial reference
  CommLedger ledger;              // merged ledger of the parallel run
  std::uint64_t expect_qkv = 0;   // closed-form bytes per rank, "qkv_a2a"
  std::uint64_t expect_out = 0;   // closed-form bytes per rank, "out_a2a"
  std::uint64_t expect_ring = 0;  // closed-form bytes per rank, ring steps
  bool ledger_exact = false;      // per-rank per-phase totals match exactly
};

/// Runs a seeded random problem through usp_attention on a (p_u, p_r)
/// topology of p_u * p_r ranks and through the serial reference, then audits
/// the ledger against the closed forms. n_padded trailing rows are masked.
template <typename T>
UspReport run_usp_case(std::size_t seq_len, std::size_t n_heads, std::size_t head_dim,
                       std::size_t p_u, std::size_t p_r, bool causal,
                       std::size_t n_padded, std::uint64_t seed,
                       RunMode mode = RunMode::stepped);

}  // namespace uspsim::sp
