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

#include "uspsim/verify.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "uspsim/attention.hpp"
#include "uspsim/curriculum.hpp"
#include "uspsim/error.hpp"
#include "uspsim/fabric.hpp"
#include "uspsim/matrix.hpp"
#include "uspsim/mel.hpp"
#include "uspsim/packing.hpp"
#include "uspsim/rng.hpp"
#include "uspsim/rote.hpp"
#include "uspsim/sp_attention.hpp"

namespace uspsim::verify {

namespace {

/// The eight (p_u, p_r) factorizations the artifact promises to verify.
constexpr std::array<std::pair<std::size_t, std::size_t>, 8> kTopologies = {
    {{1, 1}, {2, 1}, {1, 2}, {2, 2}, {4, 1}, {1, 4}, {2, 4}, {4, 2}}};

/// Shards, runs and reassembles one attention problem on a (p_u, p_r) block.
std::pair<std::vector<MatD>, CommLedger> run_parallel(const AttentionProblem<double>& prob,
                                                      std::size_t pu, std::size_t pr,
                                                      RunMode mode) {
  const sp::SpMeta meta = sp::make_meta(prob, pu, pr);
  const ProcessTopology topo = build_topology(pu * pr, pu, pr);
  const std::function<std::vector<MatD>(RankContext&)> program =
      [&](RankContext& ctx) -> std::vector<MatD> {
    return sp::usp_attention(ctx, sp::shard_problem(prob, meta.layout, ctx.rank()), meta);
  };
  auto [shards, ledger] = run_collect<std::vector<MatD>>(topo, program, {mode});
  return {sp::unshard_heads(shards, meta.layout), std::move(ledger)};
}

}  // namespace

bool VerifyReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(),
                     [](const CheckResult& c) { return c.passed; });
}

VerifyConfig load_verify_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open verify config {}", path));
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(fmt::format("verify config {}: {}", path, e.what()));
  }
  if (!doc.is_object()) {
    throw ValueError(fmt::format("verify config {}: expected a JSON object", path));
  }

  VerifyConfig cfg;
  try {
    cfg.seed = doc.value("seed", cfg.seed);
    cfg.tol_f64 = doc.value("tol_f64", cfg.tol_f64);
    cfg.tol_f32 = doc.value("tol_f32", cfg.tol_f32);
    cfg.tol_merge = doc.value("tol_merge", cfg.tol_merge);
    cfg.tol_rote_shift = doc.value("tol_rote_shift", cfg.tol_rote_shift);
    cfg.tol_rote_relative = doc.value("tol_rote_relative", cfg.tol_rote_relative);
    cfg.n_softmax_problems = doc.value("n_softmax_problems", cfg.n_softmax_problems);
    cfg.n_rote_pairs = doc.value("n_rote_pairs", cfg.n_rote_pairs);
    cfg.n_packing_seeds = doc.value("n_packing_seeds", cfg.n_packing_seeds);
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(fmt::format("verify config {}: {}", path, e.what()));
  }
  return cfg;
}

CheckResult check_usp_equivalence(const VerifyConfig& cfg) {
  // (S, H, d_h) triples; every S divides by the largest block (8 ranks) and
  // every H by the largest Ulysses degree (4).
  const std::array<std::array<std::size_t, 3>, 4> shapes = {
      {{32, 4, 8}, {64, 8, 4}, {16, 16, 8}, {64, 4, 4}}};

  double worst64 = 0.0;
  double worst32 = 0.0;
  std::size_t n64 = 0;
  std::size_t n32 = 0;
  std::uint64_t seed = cfg.seed;
  for (const auto& [pu, pr] : kTopologies) {
    for (const auto& [s, h, dh] : shapes) {
      for (const bool causal : {true, false}) {
        const std::size_t n_padded = (seed % 2 == 0) ? 3 : 0;
        const sp::UspReport rep =
            sp::run_usp_case<double>(s, h, dh, pu, pr, causal, n_padded, seed++);
        worst64 = std::max(worst64, rep.max_abs_err);
        ++n64;
      }
    }
    const sp::UspReport repf = sp::run_usp_case<float>(32, 8, 8, pu, pr, true, 2, seed++);
    worst32 = std::max(worst32, repf.max_abs_err);
    ++n32;
  }

  CheckResult r;
  r.name = "usp_equivalence";
  r.metric = worst64;
  r.tolerance = cfg.tol_f64;
  r.passed = worst64 < cfg.tol_f64 && worst32 < cfg.tol_f32;
  r.detail = fmt::format(
      "{} double cases worst |err| {:.3e} (tol {:.1e}); {} float cases worst "
      "|err| {:.3e} (tol {:.1e})",
      n64, worst64, cfg.tol_f64, n32, worst32, cfg.tol_f32);
  return r;
}

CheckResult check_ledger_closed_forms(const VerifyConfig& cfg) {
  std::size_t violations = 0;
  std::size_t runs = 0;
  for (const auto& [pu, pr] : kTopologies) {
    // Attention alone: per-rank per-phase totals must equal the closed forms
    // exactly for both element widths.
    const sp::UspReport r64 = sp::run_usp_case<double>(16, 4, 8, pu, pr, true, 0, cfg.seed);
    const sp::UspReport r32 = sp::run_usp_case<float>(16, 4, 8, pu, pr, false, 0, cfg.seed);
    violations += !r64.ledger_exact;
    violations += !r32.ledger_exact;
    runs += 2;

    // A whole transformer block must not move a byte more: LayerNorms, the
    // FFN and the residuals are rank-local.
    const AttentionProblem<double> prob =
        random_problem<double>(16, 4, 8, true, 0, cfg.seed + 1);
    const sp::SpMeta meta = sp::make_meta(prob, pu, pr);
    Rng rng(cfg.seed + 2);
    const MatD hidden = MatD::random_normal(16, 32, rng, 0.0, 1.0);
    const sp::BlockWeights<double> w = sp::make_block_weights<double>(32, 64, cfg.seed + 3);
    const ProcessTopology topo = build_topology(pu * pr, pu, pr);
    const std::function<MatD(RankContext&)> program = [&](RankContext& ctx) -> MatD {
      const std::size_t start = meta.layout.seq_start(ctx.rank());
      return sp::sp_transformer_block(
          ctx, hidden.slice_rows(start, start + meta.layout.shard_len()), w, meta);
    };
    auto [shards, ledger] = run_collect<MatD>(topo, program);
    const std::uint64_t per_rank = sp::ulysses_qkv_bytes_per_rank(meta.layout, 8) +
                                   sp::ulysses_out_bytes_per_rank(meta.layout, 8) +
                                   sp::ring_bytes_per_rank(meta.layout, 8);
    violations += ledger.total_bytes() != per_rank * topo.n_gpu;
    for (const LedgerEntry& e : ledger.entries) {
      const bool attention_phase = e.phase == "qkv_a2a" || e.phase == "out_a2a" ||
                                   e.phase.rfind("ring_step_", 0) == 0;
      violations += !attention_phase;
    }
    ++runs;
  }

  CheckResult r;
  r.name = "ledger_closed_forms";
  r.metric = static_cast<double>(violations);
  r.tolerance = 0.0;
  r.passed = violations == 0;
  r.detail = fmt::format("{} runs audited byte-for-byte, {} deviations", runs, violations);
  return r;
}

CheckResult check_rote_properties(const VerifyConfig& cfg) {
  Rng rng(cfg.seed);
  RoteConfig rcfg;
  rcfg.head_dim = 32;
  rcfg.validate();

  const auto random_row = [&rng](std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
  };
  const auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
  };

  // (a) Rotating by time zero is exactly the identity.
  double worst_identity = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::vector<double> row = random_row(32);
    const std::vector<double> rotated = rotate_single<double>(row, 0.0, rcfg);
    for (std::size_t i = 0; i < row.size(); ++i) {
      worst_identity = std::max(worst_identity, std::abs(rotated[i] - row[i]));
    }
  }

  // (b) Attention logits survive a global shift of both timestamps.
  double worst_shift = 0.0;
  for (const double delta : {0.04, 1.0, 100.0, 1000.0}) {
    for (int trial = 0; trial < 50; ++trial) {
      const std::vector<double> q = random_row(32);
      const std::vector<double> k = random_row(32);
      const double tq = rng.uniform(0.0, 30.0);
      const double tk = rng.uniform(0.0, 30.0);
      const double base = dot(rotate_single<double>(q, tq, rcfg),
                              rotate_single<double>(k, tk, rcfg));
      const double moved = dot(rotate_single<double>(q, tq + delta, rcfg),
                               rotate_single<double>(k, tk + delta, rcfg));
      const double rel =
          std::abs(moved - base) / (1.0 + std::max(std::abs(moved), std::abs(base)));
      worst_shift = std::max(worst_shift, rel);
    }
  }

  // (c) The rotation only ever sees time differences.
  double worst_relative = 0.0;
  for (std::size_t trial = 0; trial < cfg.n_rote_pairs; ++trial) {
    const std::vector<double> q = random_row(32);
    const std::vector<double> k = random_row(32);
    const double tq = rng.uniform(0.0, 60.0);
    const double tk = rng.uniform(0.0, 60.0);
    const double paired = dot(rotate_single<double>(q, tq, rcfg),
                              rotate_single<double>(k, tk, rcfg));
    const double collapsed = dot(rotate_single<double>(q, tq - tk, rcfg), k);
    worst_relative = std::max(worst_relative, std::abs(paired - collapsed));
  }

  CheckResult r;
  r.name = "rote_properties";
  r.metric = worst_shift;
  r.tolerance = cfg.tol_rote_shift;
  r.passed = worst_identity == 0.0 && worst_shift < cfg.tol_rote_shift &&
             worst_relative < cfg.tol_rote_relative;
  r.detail = fmt::format(
      "identity residue {:.1e}; shift drift {:.3e} (tol {:.1e}); relative-rotation "
      "gap {:.3e} over {} pairs (tol {:.1e})",
      worst_identity, worst_shift, cfg.tol_rote_shift, worst_relative, cfg.n_rote_pairs,
      cfg.tol_rote_relative);
  return r;
}

CheckResult check_online_softmax(const VerifyConfig& cfg) {
  Rng rng(cfg.seed);
  double worst = 0.0;
  for (std::size_t trial = 0; trial < cfg.n_softmax_problems; ++trial) {
    const std::size_t s = 1 + rng.below(24);
    const std::size_t dh = std::array<std::size_t, 3>{4, 8, 16}[rng.below(3)];
    const bool causal = rng.below(2) == 0;
    const AttentionProblem<double> p =
        random_problem<double>(s, 1, dh, causal, 0, cfg.seed + trial);
    const MatD want = reference_attention(p)[0];

    // Rotate once, then stream the keys through random contiguous blocks,
    // merging the partial statistics in a random order.
    const MatD q = rotate(p.q[0], p.timeline, p.rote);
    const MatD k = rotate(p.k[0], p.timeline, p.rote);

    std::vector<std::size_t> cuts = {0, s};
    const std::size_t extra = rng.below(std::min<std::size_t>(s, 5));
    for (std::size_t c = 0; c < extra; ++c) cuts.push_back(1 + rng.below(s - 1));
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

    std::vector<PartialAttn> parts;
    for (std::size_t b = 0; b + 1 < cuts.size(); ++b) {
      const std::size_t lo = cuts[b];
      const std::size_t hi = cuts[b + 1];
      BoolMat mask(s, hi - lo, 0);
      for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = lo; j < hi; ++j) {
          if (!causal || j <= i) mask.at(i, j - lo) = 1;
        }
      }
      parts.push_back(block_stats(q, k.slice_rows(lo, hi), p.v[0].slice_rows(lo, hi), mask));
    }
    rng.shuffle(parts);
    PartialAttn acc = PartialAttn::empty(s, dh);
    for (const PartialAttn& part : parts) acc = merge_stats(acc, part);
    worst = std::max(worst, max_abs_diff(finalize(acc), want));
  }

  CheckResult r;
  r.name = "online_softmax_merge";
  r.metric = worst;
  r.tolerance = cfg.tol_merge;
  r.passed = worst < cfg.tol_merge;
  r.detail = fmt::format("{} random partitions/merge orders, worst |err| {:.3e} (tol {:.1e})",
                         cfg.n_softmax_problems, worst, cfg.tol_merge);
  return r;
}

CheckResult check_token_arithmetic(const VerifyConfig& cfg) {
  std::size_t violations = 0;

  // 30 s of 16 kHz audio -> 3000 mel frames -> 1500 encoder features at
  // 50 Hz -> 750 audio tokens at the 40 ms stride.
  violations += frame_count(30 * kSampleRate) != 3000;
  AudioClip clip;
  clip.samples.assign(30 * kSampleRate, 0.0);
  const MelSpectrogram mel = log_mel(clip);
  violations += mel.n_frames != 3000 || mel.n_mels != 128;
  const EncoderFeatures enc = encode_stub(mel, 64, cfg.seed);
  violations += enc.n_tokens != 1500 || enc.feature_rate != 50.0;
  const EncoderFeatures pooled = pool_stride2(enc);
  violations += pooled.n_tokens != 750 || pooled.feature_rate != 25.0;
  violations += audio_token_count(30.0) != 750;
  for (std::size_t t = 0; t < pooled.n_tokens; ++t) {
    violations += pooled.timestamps.taus[t] != static_cast<double>(t) * 0.04;
  }

  // A 30-minute clip costs 45000 tokens: inside the final stage's 128K
  // context, far over the 24K mid-training cap.
  violations += audio_token_count(1800.0) != 45000;
  const pack::PackingConfig pcfg;
  pack::RawSample half_hour;
  half_hour.id = "verify-30min";
  half_hour.text_tokens = {pcfg.placeholder_id};
  half_hour.labels = {0};
  half_hour.audio_durations_s = {1800.0};
  using curriculum::Stage;
  violations += !curriculum::validate_sample_for_stage(
                     half_hour, curriculum::stage_config(Stage::mid2), pcfg)
                     .accepted;
  violations += curriculum::validate_sample_for_stage(
                    half_hour, curriculum::stage_config(Stage::mid1), pcfg)
                    .accepted;

  // Greedy 30 s chunking is exact in floating point.
  const std::vector<double> chunks = chunk_audio(95.0);
  violations += chunks != std::vector<double>{30.0, 30.0, 30.0, 5.0};
  double sum = 0.0;
  for (const double c : chunks) sum += c;
  violations += sum != 95.0;

  CheckResult r;
  r.name = "token_arithmetic";
  r.metric = static_cast<double>(violations);
  r.tolerance = 0.0;
  r.passed = violations == 0;
  r.detail = fmt::format(
      "30 s -> 3000 frames -> 1500 features -> 750 tokens; 30 min -> 45000 tokens vs "
      "stage caps; {} deviations",
      violations);
  return r;
}

CheckResult check_packing_invariants(const VerifyConfig& cfg) {
  std::size_t violations = 0;
  const pack::PackingConfig pcfg;

  // Sampling invariants across seeds and topologies.
  const std::vector<std::array<std::size_t, 3>> shapes = {
      {4, 2, 1}, {4, 1, 2}, {8, 2, 2}, {6, 1, 2}};
  const std::size_t n_samples = 23;
  for (const auto& [n_gpu, pu, pr] : shapes) {
    const ProcessTopology topo = build_topology(n_gpu, pu, pr);
    for (std::uint64_t seed = 0; seed < cfg.n_packing_seeds; ++seed) {
      const pack::SampleIndexPlan plan = pack::sp_aware_indices(n_samples, topo, seed, true);
      std::set<std::size_t> seen;
      for (std::size_t rank = 0; rank < n_gpu; ++rank) {
        const std::size_t leader = topo.sp_block(rank) * topo.sp_degree();
        violations += plan.per_rank[rank] != plan.per_rank[leader];
      }
      std::size_t covered = 0;
      for (std::size_t d = 0; d < topo.dp_replicas; ++d) {
        const auto& list = plan.per_rank[d * topo.sp_degree()];
        violations += list.size() != (n_samples - plan.dropped_tail) / topo.dp_replicas;
        covered += list.size();
        for (const std::size_t idx : list) violations += !seen.insert(idx).second;
      }
      violations += covered + plan.dropped_tail != n_samples;
      violations += plan.dropped_tail >= topo.dp_replicas;
    }
  }

  // Collation invariants on random batches.
  Rng rng(cfg.seed);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<pack::ExpandedSample> samples;
    const std::size_t n = 1 + rng.below(4);
    for (std::size_t i = 0; i < n; ++i) {
      pack::RawSample s;
      s.id = "v";
      const std::size_t run = 1 + rng.below(20);
      for (std::size_t t = 0; t < run; ++t) {
        s.text_tokens.push_back(static_cast<pack::TokenId>(t + 1));
        s.labels.push_back(1);
      }
      if (rng.below(2) == 0) {
        s.text_tokens.push_back(pcfg.placeholder_id);
        s.labels.push_back(0);
        s.audio_durations_s.push_back(0.1 + 0.04 * static_cast<double>(rng.below(10)));
      }
      samples.push_back(pack::expand_audio_tokens(s, pcfg));
    }
    const std::size_t pad_multiple = 1 + rng.below(4);
    const std::size_t max_ctx = pad_multiple * (3 + rng.below(8));
    const pack::PackedBatch batch = pack::collate(samples, max_ctx, pad_multiple, pcfg);
    violations += batch.t > max_ctx;
    violations += batch.t % pad_multiple != 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < batch.t; ++j) {
        if (batch.attention_mask[i][j] == 0) {
          violations += batch.labels[i][j] != pcfg.ignore_index;
          violations += batch.token_ids[i][j] != pcfg.pad_id;
        }
      }
    }
  }

  // The worked expansion example: 3 text + 1 s clip + 2 text = 30 tokens.
  pack::RawSample s;
  s.id = "worked";
  s.text_tokens = {1, 2, 3, pcfg.placeholder_id, 4, 5};
  s.labels = {1, 2, 3, 0, 4, 5};
  s.audio_durations_s = {1.0};
  violations += pack::expand_audio_tokens(s, pcfg).size() != 30;

  CheckResult r;
  r.name = "packing_invariants";
  r.metric = static_cast<double>(violations);
  r.tolerance = 0.0;
  r.passed = violations == 0;
  r.detail = fmt::format(
      "{} seeds x {} topologies of sampling plus randomized collation, {} deviations",
      cfg.n_packing_seeds, shapes.size(), violations);
  return r;
}

CheckResult check_curriculum(const VerifyConfig& cfg) {
  std::size_t violations = 0;
  using curriculum::BlendSpec;
  using curriculum::Stage;

  violations += curriculum::blend_count({"think", 43000, 2.0, false}) != 86000;
  violations += curriculum::blend_count({"half", 10, 0.5, false}) != 5;
  violations += curriculum::blend_count({"three-quarters", 10, 0.75, false}) != 8;

  const std::vector<BlendSpec> stage2 = curriculum::derive_stage2_blend(
      {{"a", 10, 1.0, false}, {"b", 10, 0.0, false}, {"c", 10, 2.0, true}});
  violations += stage2[0].beta != 0.5;
  violations += stage2[1].beta != 0.0;
  violations += stage2[2].beta != 1.0;
  violations += curriculum::derive_stage2_blend(stage2)[2].beta != 1.0;

  const auto cap = [&violations](Stage st, double secs, std::size_t ctx) {
    const curriculum::StageConfig sc = curriculum::stage_config(st);
    violations += sc.max_audio_s != secs || sc.max_ctx != ctx;
  };
  cap(Stage::pre1, 30.0, 8192);
  cap(Stage::pre2, 60.0, 8192);
  cap(Stage::mid1, 600.0, 24576);
  cap(Stage::mid2, 1800.0, 131072);

  const std::vector<BlendSpec> blends = {{"a", 100, 1.0, false}, {"b", 40, 2.5, false},
                                         {"c", 10, 0.75, false}};
  const auto schedule = curriculum::epoch_schedule(blends, cfg.seed);
  violations += schedule.size() != 208;
  std::array<std::size_t, 3> counts = {0, 0, 0};
  std::set<std::size_t> subset_indices;
  for (const curriculum::ScheduleEntry& e : schedule) {
    ++counts[e.dataset];
    if (e.dataset == 2) subset_indices.insert(e.index);
  }
  violations += counts != std::array<std::size_t, 3>{100, 100, 8};
  violations += subset_indices.size() != 8;  // beta < 1 draws distinct indices
  violations += curriculum::epoch_schedule(blends, cfg.seed) != schedule;

  CheckResult r;
  r.name = "curriculum_schedule";
  r.metric = static_cast<double>(violations);
  r.tolerance = 0.0;
  r.passed = violations == 0;
  r.detail = fmt::format("blend counts, stage-2 rule, stage caps, schedules; {} deviations",
                         violations);
  return r;
}

CheckResult check_fabric_determinism(const VerifyConfig& cfg) {
  std::size_t violations = 0;
  double worst = 0.0;
  for (const auto& [pu, pr] : kTopologies) {
    const AttentionProblem<double> prob =
        random_problem<double>(16, 4, 8, true, 2, cfg.seed + pu * 8 + pr);
    const auto [out_stepped, ledger_stepped] = run_parallel(prob, pu, pr, RunMode::stepped);
    const auto [out_concurrent, ledger_concurrent] =
        run_parallel(prob, pu, pr, RunMode::concurrent);
    for (std::size_t h = 0; h < prob.q.size(); ++h) {
      const double diff = max_abs_diff(out_stepped[h], out_concurrent[h]);
      worst = std::max(worst, diff);
      violations += diff != 0.0;  // bitwise agreement, not approximate
    }
    violations += !(ledger_stepped == ledger_concurrent);
  }

  CheckResult r;
  r.name = "fabric_determinism";
  r.metric = worst;
  r.tolerance = 0.0;
  r.passed = violations == 0;
  r.detail = fmt::format(
      "stepped vs concurrent schedulers on {} topologies: outputs and ledgers "
      "bitwise identical ({} deviations)",
      kTopologies.size(), violations);
  return r;
}

VerifyReport run_all_checks(const VerifyConfig& cfg) {
  VerifyReport report;
  report.checks.push_back(check_usp_equivalence(cfg));
  report.checks.push_back(check_ledger_closed_forms(cfg));
  report.checks.push_back(check_rote_properties(cfg));
  report.checks.push_back(check_online_softmax(cfg));
  report.checks.push_back(check_token_arithmetic(cfg));
  report.checks.push_back(check_packing_invariants(cfg));
  report.checks.push_back(check_curriculum(cfg));
  report.checks.push_back(check_fabric_determinism(cfg));
  return report;
}

}  // namespace uspsim::verify
