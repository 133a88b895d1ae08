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

#include "uspsim/sp_attention.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <utility>

#include "uspsim/error.hpp"
#include "uspsim/rng.hpp"

namespace uspsim::sp {

namespace {

// LayerNorm epsilon shared by the parallel block and its serial oracle.
constexpr double kLnEps = 1e-5;

template <typename T>
void append_mat(Payload& p, const Mat<T>& m) {
  const auto* bytes = reinterpret_cast<const std::byte*>(m.data().data());
  p.insert(p.end(), bytes, bytes + m.size() * sizeof(T));
}

template <typename T>
Mat<T> take_mat(const Payload& p, std::size_t& off, std::size_t rows, std::size_t cols) {
  const std::size_t n_bytes = rows * cols * sizeof(T);
  if (off + n_bytes > p.size()) {
    throw ValueError(fmt::format("payload too short: need {} bytes at offset {}, have {}",
                                 n_bytes, off, p.size()));
  }
  std::vector<T> vals(rows * cols);
  if (n_bytes > 0) std::memcpy(vals.data(), p.data() + off, n_bytes);
  off += n_bytes;
  return Mat<T>(rows, cols, std::move(vals));
}

template <typename T>
std::vector<Mat<T>> split_heads(const Mat<T>& x, std::size_t n_heads, std::size_t d_h) {
  if (x.cols() != n_heads * d_h) {
    throw ShapeError(fmt::format("split_heads: {} columns cannot split into {} heads of {}",
                                 x.cols(), n_heads, d_h));
  }
  std::vector<Mat<T>> out;
  out.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Mat<T> m(x.rows(), d_h);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      for (std::size_t c = 0; c < d_h; ++c) m.at(i, c) = x.at(i, h * d_h + c);
    }
    out.push_back(std::move(m));
  }
  return out;
}

template <typename T>
Mat<T> merge_heads(const std::vector<Mat<T>>& heads) {
  const std::size_t n = heads.size();
  const std::size_t rows = heads[0].rows();
  const std::size_t d_h = heads[0].cols();
  Mat<T> out(rows, n * d_h);
  for (std::size_t h = 0; h < n; ++h) {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t c = 0; c < d_h; ++c) out.at(i, h * d_h + c) = heads[h].at(i, c);
    }
  }
  return out;
}

template <typename T>
Mat<T> add(const Mat<T>& a, const Mat<T>& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  Mat<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shard geometry
// ---------------------------------------------------------------------------

void ShardLayout::validate() const {
  if (s_global == 0 || h_total == 0 || d_h == 0) {
    throw ShapeError("ShardLayout: s_global, h_total and d_h must be positive");
  }
  if (p_u == 0 || p_r == 0) throw ShapeError("ShardLayout: p_u and p_r must be positive");
  if (s_global % sp() != 0) {
    throw ShapeError(fmt::format("ShardLayout: sequence length {} is not divisible by {} ranks",
                                 s_global, sp()));
  }
  if (h_total % p_u != 0) {
    throw ShapeError(fmt::format(
        "ShardLayout: {} heads are not divisible by Ulysses degree {}", h_total, p_u));
  }
}

void SpMeta::validate() const {
  layout.validate();
  timeline.validate();
  if (timeline.size() != layout.s_global) {
    throw ShapeError(fmt::format("SpMeta: timeline length {} != sequence length {}",
                                 timeline.size(), layout.s_global));
  }
  if (pad_mask.size() != layout.s_global) {
    throw ShapeError(fmt::format("SpMeta: pad mask length {} != sequence length {}",
                                 pad_mask.size(), layout.s_global));
  }
  if (std::find(pad_mask.begin(), pad_mask.end(), std::uint8_t{1}) == pad_mask.end()) {
    throw ValueError("SpMeta: pad mask has no valid rows");
  }
  rote.validate();
  if (rote.head_dim != layout.d_h) {
    throw ShapeError(fmt::format("SpMeta: rote head_dim {} != layout d_h {}", rote.head_dim,
                                 layout.d_h));
  }
}

// ---------------------------------------------------------------------------
// Shards
// ---------------------------------------------------------------------------

template <typename T>
void SpInput<T>::validate(const SpMeta& meta, std::size_t local) const {
  const ShardLayout& ly = meta.layout;
  if (local >= ly.sp()) {
    throw ValueError(fmt::format("SpInput: local index {} out of range for {} ranks", local,
                                 ly.sp()));
  }
  const std::size_t len = ly.shard_len();
  if (q.size() != ly.h_total || k.size() != ly.h_total || v.size() != ly.h_total) {
    throw ShapeError(fmt::format("SpInput: expected {} heads, got q={} k={} v={}", ly.h_total,
                                 q.size(), k.size(), v.size()));
  }
  for (std::size_t h = 0; h < ly.h_total; ++h) {
    for (const Mat<T>* m : {&q[h], &k[h], &v[h]}) {
      if (m->rows() != len || m->cols() != ly.d_h) {
        throw ShapeError(fmt::format("SpInput: head {} shard is {}x{}, expected {}x{}", h,
                                     m->rows(), m->cols(), len, ly.d_h));
      }
    }
  }
  const std::size_t start = ly.seq_start(local);
  if (timeline_shard.size() != len || pad_mask_shard.size() != len) {
    throw ShapeError(fmt::format("SpInput: shard metadata length != {}", len));
  }
  for (std::size_t i = 0; i < len; ++i) {
    if (timeline_shard.taus[i] != meta.timeline.taus[start + i]) {
      throw ValueError(fmt::format(
          "SpInput: timeline shard disagrees with global timeline at row {}", start + i));
    }
    if (pad_mask_shard[i] != meta.pad_mask[start + i]) {
      throw ValueError(fmt::format(
          "SpInput: pad-mask shard disagrees with global mask at row {}", start + i));
    }
  }
}

template <typename T>
SpInput<T> shard_problem(const AttentionProblem<T>& p, const ShardLayout& layout,
                         std::size_t local) {
  layout.validate();
  p.validate();
  if (p.seq_len() != layout.s_global || p.n_heads() != layout.h_total ||
      p.head_dim() != layout.d_h) {
    throw ShapeError(fmt::format(
        "shard_problem: problem ({} x {} x {}) does not match layout ({} x {} x {})",
        p.seq_len(), p.n_heads(), p.head_dim(), layout.s_global, layout.h_total, layout.d_h));
  }
  if (local >= layout.sp()) {
    throw ValueError(fmt::format("shard_problem: local index {} out of range for {} ranks",
                                 local, layout.sp()));
  }
  const std::size_t begin = layout.seq_start(local);
  const std::size_t end = begin + layout.shard_len();
  SpInput<T> inp;
  inp.q.reserve(layout.h_total);
  inp.k.reserve(layout.h_total);
  inp.v.reserve(layout.h_total);
  for (std::size_t h = 0; h < layout.h_total; ++h) {
    inp.q.push_back(p.q[h].slice_rows(begin, end));
    inp.k.push_back(p.k[h].slice_rows(begin, end));
    inp.v.push_back(p.v[h].slice_rows(begin, end));
  }
  inp.timeline_shard = p.timeline.slice(begin, end);
  inp.pad_mask_shard.assign(p.pad_mask.begin() + static_cast<std::ptrdiff_t>(begin),
                            p.pad_mask.begin() + static_cast<std::ptrdiff_t>(end));
  return inp;
}

template <typename T>
SpMeta make_meta(const AttentionProblem<T>& p, std::size_t p_u, std::size_t p_r) {
  SpMeta meta;
  meta.layout = ShardLayout{p.seq_len(), p.n_heads(), p.head_dim(), p_u, p_r};
  meta.timeline = p.timeline;
  meta.pad_mask = p.pad_mask;
  meta.causal = p.causal;
  meta.rote = p.rote;
  meta.validate();
  return meta;
}

template <typename T>
std::vector<Mat<T>> unshard_heads(const std::vector<std::vector<Mat<T>>>& shards,
                                  const ShardLayout& layout) {
  layout.validate();
  if (shards.size() != layout.sp()) {
    throw ShapeError(fmt::format("unshard_heads: {} shards for {} ranks", shards.size(),
                                 layout.sp()));
  }
  const std::size_t len = layout.shard_len();
  std::vector<Mat<T>> out(layout.h_total, Mat<T>(layout.s_global, layout.d_h));
  for (std::size_t local = 0; local < layout.sp(); ++local) {
    if (shards[local].size() != layout.h_total) {
      throw ShapeError(fmt::format("unshard_heads: shard {} has {} heads, expected {}", local,
                                   shards[local].size(), layout.h_total));
    }
    const std::size_t start = layout.seq_start(local);
    for (std::size_t h = 0; h < layout.h_total; ++h) {
      const Mat<T>& part = shards[local][h];
      if (part.rows() != len || part.cols() != layout.d_h) {
        throw ShapeError(fmt::format("unshard_heads: shard {} head {} is {}x{}", local, h,
                                     part.rows(), part.cols()));
      }
      for (std::size_t i = 0; i < len; ++i) {
        std::copy(part.row(i).begin(), part.row(i).end(), out[h].row(start + i).begin());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hybrid attention
// ---------------------------------------------------------------------------

template <typename T>
std::vector<Mat<T>> usp_attention(RankContext& ctx, const SpInput<T>& inp, const SpMeta& meta) {
  meta.validate();
  const ShardLayout& ly = meta.layout;
  const ProcessTopology& topo = ctx.topology();
  if (topo.p_u != ly.p_u || topo.p_r != ly.p_r) {
    throw TopologyError(fmt::format(
        "usp_attention: layout degrees ({}, {}) do not match topology ({}, {})", ly.p_u,
        ly.p_r, topo.p_u, topo.p_r));
  }
  const std::size_t local = ctx.rank() % ly.sp();
  inp.validate(meta, local);

  const std::size_t r = topo.ring_index(ctx.rank());
  const std::size_t shard = ly.shard_len();
  const std::size_t span = ly.span_len();
  const std::size_t hl = ly.h_local();
  const std::size_t dh = ly.d_h;

  // Ulysses stage: scatter heads, gather the group's sequence span. After
  // this, the rank holds span rows of its own hl-head slice.
  std::vector<Mat<T>> gq, gk, gv;
  if (ly.p_u == 1) {
    gq = inp.q;
    gk = inp.k;
    gv = inp.v;
  } else {
    std::vector<Payload> shards(ly.p_u);
    for (std::size_t g = 0; g < ly.p_u; ++g) {
      Payload pay;
      pay.reserve(3 * hl * shard * dh * sizeof(T));
      for (const auto* tensor : {&inp.q, &inp.k, &inp.v}) {
        for (std::size_t j = 0; j < hl; ++j) append_mat(pay, (*tensor)[ly.head_start(g) + j]);
      }
      shards[g] = std::move(pay);
    }
    std::vector<Payload> got = ctx.all_to_all(GroupKind::ulysses, std::move(shards), "qkv_a2a");

    gq.assign(hl, Mat<T>(span, dh));
    gk.assign(hl, Mat<T>(span, dh));
    gv.assign(hl, Mat<T>(span, dh));
    const std::size_t expect = 3 * hl * shard * dh * sizeof(T);
    for (std::size_t g = 0; g < ly.p_u; ++g) {
      if (got[g].size() != expect) {
        throw ValueError(fmt::format("qkv_a2a shard from group index {} has {} bytes, expected {}",
                                     g, got[g].size(), expect));
      }
      // Group member g's rows sit at [g * shard, (g + 1) * shard) of the span.
      std::size_t off = 0;
      for (auto* dst : {&gq, &gk, &gv}) {
        for (std::size_t j = 0; j < hl; ++j) {
          Mat<T> part = take_mat<T>(got[g], off, shard, dh);
          for (std::size_t i = 0; i < shard; ++i) {
            std::copy(part.row(i).begin(), part.row(i).end(),
                      (*dst)[j].row(g * shard + i).begin());
          }
        }
      }
    }
  }

  // Rotate queries and keys once, at the span that owns them; circulated K
  // blocks travel pre-rotated so every rank sees source-timeline angles.
  const std::size_t span_start = ly.span_start(r);
  const TokenTimeline span_tl = meta.timeline.slice(span_start, span_start + span);
  std::vector<Mat<T>> qrot, cur_k, cur_v;
  qrot.reserve(hl);
  cur_k.reserve(hl);
  for (std::size_t j = 0; j < hl; ++j) {
    qrot.push_back(rotate(gq[j], span_tl, meta.rote));
    cur_k.push_back(rotate(gk[j], span_tl, meta.rote));
  }
  cur_v = std::move(gv);

  // Ring stage: fold each visiting KV span into the online-softmax stats,
  // then pass the block along. p_r - 1 steps visit every span exactly once.
  std::vector<PartialAttn> acc;
  acc.reserve(hl);
  for (std::size_t j = 0; j < hl; ++j) acc.push_back(PartialAttn::empty(span, dh));

  const std::vector<std::size_t>& ring_group = topo.ring_group_of(ctx.rank());
  const std::size_t next = ring_group[(r + 1) % ly.p_r];
  const std::size_t prev = ring_group[(r + ly.p_r - 1) % ly.p_r];
  std::size_t cur_pos = r;  // ring position whose span cur_k / cur_v cover

  for (std::size_t t = 0; t < ly.p_r; ++t) {
    const std::size_t ks = ly.span_start(cur_pos);
    BoolMat mask(span, span, 0);
    for (std::size_t i = 0; i < span; ++i) {
      if (meta.pad_mask[span_start + i] == 0) continue;  // padded query row
      const std::size_t qi = span_start + i;
      for (std::size_t c = 0; c < span; ++c) {
        const std::size_t kg = ks + c;
        mask.at(i, c) = (meta.pad_mask[kg] != 0 && (!meta.causal || kg <= qi)) ? 1 : 0;
      }
    }
    for (std::size_t j = 0; j < hl; ++j) {
      acc[j] = merge_stats(acc[j], block_stats(qrot[j], cur_k[j], cur_v[j], mask));
    }

    if (t + 1 < ly.p_r) {
      Payload pay;
      pay.reserve(2 * hl * span * dh * sizeof(T));
      for (std::size_t j = 0; j < hl; ++j) append_mat(pay, cur_k[j]);
      for (std::size_t j = 0; j < hl; ++j) append_mat(pay, cur_v[j]);
      Payload got = ctx.send_recv(next, prev, std::move(pay), fmt::format("ring_step_{}", t));
      const std::size_t expect = 2 * hl * span * dh * sizeof(T);
      if (got.size() != expect) {
        throw ValueError(fmt::format("ring step {} payload has {} bytes, expected {}", t,
                                     got.size(), expect));
      }
      std::size_t off = 0;
      for (std::size_t j = 0; j < hl; ++j) cur_k[j] = take_mat<T>(got, off, span, dh);
      for (std::size_t j = 0; j < hl; ++j) cur_v[j] = take_mat<T>(got, off, span, dh);
      cur_pos = (cur_pos + ly.p_r - 1) % ly.p_r;
    }
  }

  // Finalize: padded rows stay zero, valid rows must have seen a key.
  std::vector<Mat<T>> out_span;
  out_span.reserve(hl);
  for (std::size_t j = 0; j < hl; ++j) {
    Mat<T> o(span, dh);
    for (std::size_t i = 0; i < span; ++i) {
      if (acc[j].row_empty(i)) {
        if (meta.pad_mask[span_start + i] != 0) {
          throw DegenerateRowError(
              fmt::format("query row {} has no visible keys", span_start + i));
        }
        continue;
      }
      for (std::size_t c = 0; c < dh; ++c) {
        o.at(i, c) = static_cast<T>(acc[j].o.at(i, c) / acc[j].l[i]);
      }
    }
    out_span.push_back(std::move(o));
  }

  // Reverse Ulysses stage: scatter the span output back to row owners,
  // regathering all heads for the rank's own shard.
  if (ly.p_u == 1) return out_span;

  std::vector<Payload> oshards(ly.p_u);
  for (std::size_t g = 0; g < ly.p_u; ++g) {
    Payload pay;
    pay.reserve(hl * shard * dh * sizeof(T));
    for (std::size_t j = 0; j < hl; ++j) {
      append_mat(pay, out_span[j].slice_rows(g * shard, (g + 1) * shard));
    }
    oshards[g] = std::move(pay);
  }
  std::vector<Payload> got = ctx.all_to_all(GroupKind::ulysses, std::move(oshards), "out_a2a");

  std::vector<Mat<T>> out(ly.h_total, Mat<T>(shard, dh));
  const std::size_t expect = hl * shard * dh * sizeof(T);
  for (std::size_t g = 0; g < ly.p_u; ++g) {
    if (got[g].size() != expect) {
      throw ValueError(fmt::format("out_a2a shard from group index {} has {} bytes, expected {}",
                                   g, got[g].size(), expect));
    }
    std::size_t off = 0;
    for (std::size_t j = 0; j < hl; ++j) {
      out[g * hl + j] = take_mat<T>(got[g], off, shard, dh);
    }
  }
  return out;
}

template <typename T>
std::vector<Mat<T>> ulysses_attention(RankContext& ctx, const SpInput<T>& inp,
                                      const SpMeta& meta) {
  if (ctx.topology().p_r != 1) {
    throw TopologyError(fmt::format("ulysses_attention requires p_r = 1, topology has p_r = {}",
                                    ctx.topology().p_r));
  }
  return usp_attention(ctx, inp, meta);
}

template <typename T>
std::vector<Mat<T>> ring_attention(RankContext& ctx, const SpInput<T>& inp, const SpMeta& meta) {
  if (ctx.topology().p_u != 1) {
    throw TopologyError(fmt::format("ring_attention requires p_u = 1, topology has p_u = {}",
                                    ctx.topology().p_u));
  }
  return usp_attention(ctx, inp, meta);
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

template <typename T>
void BlockWeights<T>::validate(std::size_t d_model) const {
  for (const Mat<T>* m : {&wq, &wk, &wv, &wo}) {
    if (m->rows() != d_model || m->cols() != d_model) {
      throw ShapeError(fmt::format("BlockWeights: projection is {}x{}, expected {}x{}",
                                   m->rows(), m->cols(), d_model, d_model));
    }
  }
  if (ln1_gamma.size() != d_model || ln1_beta.size() != d_model ||
      ln2_gamma.size() != d_model || ln2_beta.size() != d_model) {
    throw ShapeError("BlockWeights: LayerNorm parameter length != d_model");
  }
  if (ffn_w1.rows() != d_model || ffn_w1.cols() != ffn_b1.size() ||
      ffn_w2.rows() != ffn_w1.cols() || ffn_w2.cols() != d_model ||
      ffn_b2.size() != d_model) {
    throw ShapeError("BlockWeights: FFN shapes are inconsistent");
  }
}

template <typename T>
BlockWeights<T> make_block_weights(std::size_t d_model, std::size_t d_ffn, std::uint64_t seed) {
  if (d_model == 0 || d_ffn == 0) {
    throw ValueError("make_block_weights: d_model and d_ffn must be positive");
  }
  Rng rng(seed);
  const double s_model = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double s_ffn = 1.0 / std::sqrt(static_cast<double>(d_ffn));
  BlockWeights<T> w;
  w.wq = Mat<T>::random_normal(d_model, d_model, rng, 0.0, s_model);
  w.wk = Mat<T>::random_normal(d_model, d_model, rng, 0.0, s_model);
  w.wv = Mat<T>::random_normal(d_model, d_model, rng, 0.0, s_model);
  w.wo = Mat<T>::random_normal(d_model, d_model, rng, 0.0, s_model);
  w.ln1_gamma.assign(d_model, T{1});
  w.ln1_beta.assign(d_model, T{0});
  w.ln2_gamma.assign(d_model, T{1});
  w.ln2_beta.assign(d_model, T{0});
  w.ffn_w1 = Mat<T>::random_normal(d_model, d_ffn, rng, 0.0, s_model);
  w.ffn_b1.assign(d_ffn, T{0});
  w.ffn_w2 = Mat<T>::random_normal(d_ffn, d_model, rng, 0.0, s_ffn);
  w.ffn_b2.assign(d_model, T{0});
  return w;
}

template <typename T>
Mat<T> sp_transformer_block(RankContext& ctx, const Mat<T>& hidden_shard,
                            const BlockWeights<T>& w, const SpMeta& meta) {
  meta.validate();
  const ShardLayout& ly = meta.layout;
  const std::size_t d_model = ly.h_total * ly.d_h;
  w.validate(d_model);
  if (hidden_shard.rows() != ly.shard_len() || hidden_shard.cols() != d_model) {
    throw ShapeError(fmt::format("sp_transformer_block: hidden shard is {}x{}, expected {}x{}",
                                 hidden_shard.rows(), hidden_shard.cols(), ly.shard_len(),
                                 d_model));
  }
  const std::size_t local = ctx.rank() % ly.sp();
  const std::size_t start = ly.seq_start(local);
  const std::size_t end = start + ly.shard_len();

  // Attention path. LayerNorm and the projections touch local rows only.
  const Mat<T> x1 = layer_norm(hidden_shard, w.ln1_gamma, w.ln1_beta, static_cast<T>(kLnEps));
  SpInput<T> inp;
  inp.q = split_heads(matmul(x1, w.wq), ly.h_total, ly.d_h);
  inp.k = split_heads(matmul(x1, w.wk), ly.h_total, ly.d_h);
  inp.v = split_heads(matmul(x1, w.wv), ly.h_total, ly.d_h);
  inp.timeline_shard = meta.timeline.slice(start, end);
  inp.pad_mask_shard.assign(meta.pad_mask.begin() + static_cast<std::ptrdiff_t>(start),
                            meta.pad_mask.begin() + static_cast<std::ptrdiff_t>(end));
  const std::vector<Mat<T>> attn = usp_attention(ctx, inp, meta);
  const Mat<T> h1 = add(hidden_shard, matmul(merge_heads(attn), w.wo));

  // FFN path, entirely local.
  const Mat<T> x2 = layer_norm(h1, w.ln2_gamma, w.ln2_beta, static_cast<T>(kLnEps));
  return add(h1, mlp2(x2, w.ffn_w1, w.ffn_b1, w.ffn_w2, w.ffn_b2));
}

template <typename T>
Mat<T> serial_transformer_block(const Mat<T>& hidden, const BlockWeights<T>& w,
                                const SpMeta& meta) {
  meta.validate();
  const ShardLayout& ly = meta.layout;
  const std::size_t d_model = ly.h_total * ly.d_h;
  w.validate(d_model);
  if (hidden.rows() != ly.s_global || hidden.cols() != d_model) {
    throw ShapeError(fmt::format("serial_transformer_block: hidden is {}x{}, expected {}x{}",
                                 hidden.rows(), hidden.cols(), ly.s_global, d_model));
  }

  const Mat<T> x1 = layer_norm(hidden, w.ln1_gamma, w.ln1_beta, static_cast<T>(kLnEps));
  AttentionProblem<T> prob;
  prob.q = split_heads(matmul(x1, w.wq), ly.h_total, ly.d_h);
  prob.k = split_heads(matmul(x1, w.wk), ly.h_total, ly.d_h);
  prob.v = split_heads(matmul(x1, w.wv), ly.h_total, ly.d_h);
  prob.timeline = meta.timeline;
  prob.causal = meta.causal;
  prob.pad_mask = meta.pad_mask;
  prob.rote = meta.rote;
  const std::vector<Mat<T>> attn = reference_attention(prob);
  const Mat<T> h1 = add(hidden, matmul(merge_heads(attn), w.wo));

  const Mat<T> x2 = layer_norm(h1, w.ln2_gamma, w.ln2_beta, static_cast<T>(kLnEps));
  return add(h1, mlp2(x2, w.ffn_w1, w.ffn_b1, w.ffn_w2, w.ffn_b2));
}

// ---------------------------------------------------------------------------
// Closed-form byte counts
// ---------------------------------------------------------------------------

std::uint64_t ulysses_qkv_bytes_per_rank(const ShardLayout& layout, std::size_t elem_bytes) {
  layout.validate();
  return std::uint64_t{3} * layout.shard_len() * layout.h_local() * layout.d_h *
         (layout.p_u - 1) * elem_bytes;
}

std::uint64_t ulysses_out_bytes_per_rank(const ShardLayout& layout, std::size_t elem_bytes) {
  return ulysses_qkv_bytes_per_rank(layout, elem_bytes) / 3;
}

std::uint64_t ring_bytes_per_rank(const ShardLayout& layout, std::size_t elem_bytes) {
  layout.validate();
  return std::uint64_t{layout.p_r - 1} * 2 * layout.span_len() * layout.h_local() * layout.d_h *
         elem_bytes;
}

// ---------------------------------------------------------------------------
// Equivalence harness
// ---------------------------------------------------------------------------

template <typename T>
UspReport run_usp_case(std::size_t seq_len, std::size_t n_heads, std::size_t head_dim,
                       std::size_t p_u, std::size_t p_r, bool causal, std::size_t n_padded,
                       std::uint64_t seed, RunMode mode) {
  ShardLayout ly{seq_len, n_heads, head_dim, p_u, p_r};
  ly.validate();
  const AttentionProblem<T> prob =
      random_problem<T>(seq_len, n_heads, head_dim, causal, n_padded, seed);
  const SpMeta meta = make_meta(prob, p_u, p_r);
  const std::size_t n_ranks = ly.sp();
  const ProcessTopology topo = build_topology(n_ranks, p_u, p_r);

  const std::function<std::vector<Mat<T>>(RankContext&)> program =
      [&](RankContext& ctx) -> std::vector<Mat<T>> {
    const SpInput<T> inp = shard_problem(prob, ly, ctx.rank() % n_ranks);
    return usp_attention(ctx, inp, meta);
  };
  RunOptions opts;
  opts.mode = mode;
  auto [shards, ledger] = run_collect<std::vector<Mat<T>>>(topo, program, opts);

  const std::vector<Mat<T>> got = unshard_heads(shards, ly);
  const std::vector<Mat<T>> want = reference_attention(prob);

  UspReport rep;
  rep.ledger = std::move(ledger);
  for (std::size_t h = 0; h < n_heads; ++h) {
    rep.max_abs_err = std::max(rep.max_abs_err, max_abs_diff(got[h], want[h]));
  }
  rep.expect_qkv = ulysses_qkv_bytes_per_rank(ly, sizeof(T));
  rep.expect_out = ulysses_out_bytes_per_rank(ly, sizeof(T));
  rep.expect_ring = ring_bytes_per_rank(ly, sizeof(T));

  // Exactness means every rank's per-phase totals hit the closed forms and
  // nothing else was sent at all.
  rep.ledger_exact = true;
  const std::uint64_t per_step =
      p_r > 1 ? rep.expect_ring / (std::uint64_t{p_r} - 1) : 0;
  for (std::size_t rank = 0; rank < n_ranks; ++rank) {
    rep.ledger_exact &=
        rep.ledger.total_for_rank(rank, "all_to_all", "qkv_a2a") == rep.expect_qkv;
    rep.ledger_exact &=
        rep.ledger.total_for_rank(rank, "all_to_all", "out_a2a") == rep.expect_out;
    rep.ledger_exact &= rep.ledger.total_for_rank(rank, "p2p") == rep.expect_ring;
    for (std::size_t t = 0; t + 1 < p_r; ++t) {
      rep.ledger_exact &=
          rep.ledger.total_for_rank(rank, "p2p", fmt::format("ring_step_{}", t)) == per_step;
    }
  }
  rep.ledger_exact &= rep.ledger.total_bytes() ==
                      n_ranks * (rep.expect_qkv + rep.expect_out + rep.expect_ring);
  return rep;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

template struct SpInput<float>;
template struct SpInput<double>;
template struct BlockWeights<float>;
template struct BlockWeights<double>;

template SpInput<float> shard_problem(const AttentionProblem<float>&, const ShardLayout&,
                                      std::size_t);
template SpInput<double> shard_problem(const AttentionProblem<double>&, const ShardLayout&,
                                       std::size_t);
template SpMeta make_meta(const AttentionProblem<float>&, std::size_t, std::size_t);
template SpMeta make_meta(const AttentionProblem<double>&, std::size_t, std::size_t);
template std::vector<Mat<float>> unshard_heads(const std::vector<std::vector<Mat<float>>>&,
                                               const ShardLayout&);
template std::vector<Mat<double>> unshard_heads(const std::vector<std::vector<Mat<double>>>&,
                                                const ShardLayout&);
template std::vector<Mat<float>> usp_attention(RankContext&, const SpInput<float>&,
                                               const SpMeta&);
template std::vector<Mat<double>> usp_attention(RankContext&, const SpInput<double>&,
                                                const SpMeta&);
template std::vector<Mat<float>> ulysses_attention(RankContext&, const SpInput<float>&,
                                                   const SpMeta&);
template std::vector<Mat<double>> ulysses_attention(RankContext&, const SpInput<double>&,
                                                    const SpMeta&);
template std::vector<Mat<float>> ring_attention(RankContext&, const SpInput<float>&,
                                                const SpMeta&);
template std::vector<Mat<double>> ring_attention(RankContext&, const SpInput<double>&,
                                                 const SpMeta&);
template BlockWeights<float> make_block_weights(std::size_t, std::size_t, std::uint64_t);
template BlockWeights<double> make_block_weights(std::size_t, std::size_t, std::uint64_t);
template Mat<float> sp_transformer_block(RankContext&, const Mat<float>&,
                                         const BlockWeights<float>&, const SpMeta&);
template Mat<double> sp_transformer_block(RankContext&, const Mat<double>&,
                                          const BlockWeights<double>&, const SpMeta&);
template Mat<float> serial_transformer_block(const Mat<float>&, const BlockWeights<float>&,
                                             const SpMeta&);
template Mat<double> serial_transformer_block(const Mat<double>&, const BlockWeights<double>&,
                                              const SpMeta&);
template UspReport run_usp_case<float>(std::size_t, std::size_t, std::size_t, std::size_t,
                                       std::size_t, bool, std::size_t, std::uint64_t, RunMode);
template UspReport run_usp_case<double>(std::size_t, std::size_t, std::size_t, std::size_t,
                                        std::size_t, bool, std::size_t, std::uint64_t, RunMode);

}  // namespace uspsim::sp
