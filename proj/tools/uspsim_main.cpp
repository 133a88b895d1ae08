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

// uspsim — one executable over the library's verification surface.
//
//   verify    run the eight check suites, print one line per check
//   simulate  one parallel-vs-serial attention run with byte accounting
//   pack      manifest -> per-rank packed batch dumps
//   blend     blend spec -> seeded epoch schedule
//   mel       WAV -> log-mel and encoder-feature dumps
//
// Exit codes: 0 everything passed, 1 a verification check failed,
// 2 usage/config/IO errors.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "uspsim/curriculum.hpp"
#include "uspsim/error.hpp"
#include "uspsim/fabric.hpp"
#include "uspsim/matrix.hpp"
#include "uspsim/mel.hpp"
#include "uspsim/packing.hpp"
#include "uspsim/rote.hpp"
#include "uspsim/sp_attention.hpp"
#include "uspsim/tdmp.hpp"
#include "uspsim/verify.hpp"
#include "uspsim/wav.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;
namespace curriculum = uspsim::curriculum;
namespace pack = uspsim::pack;
namespace sp = uspsim::sp;
namespace verify = uspsim::verify;

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw uspsim::IoError(fmt::format("cannot write {}", path));
  out << text;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct VerifyArgs {
  std::string config;
  std::string out;
};

int cmd_verify(const VerifyArgs& args) {
  verify::VerifyConfig cfg;
  if (!args.config.empty()) cfg = verify::load_verify_config(args.config);

  const verify::VerifyReport report = verify::run_all_checks(cfg);
  std::size_t n_passed = 0;
  json checks = json::array();
  for (const verify::CheckResult& c : report.checks) {
    fmt::print("[{}] {}: {}\n", c.passed ? "PASS" : "FAIL", c.name, c.detail);
    n_passed += c.passed;
    checks.push_back({{"name", c.name},
                      {"status", c.passed ? "pass" : "fail"},
                      {"metric", c.metric},
                      {"tolerance", c.tolerance},
                      {"detail", c.detail}});
  }
  fmt::print("{}: {}/{} checks passed\n", report.all_passed() ? "OK" : "FAILED", n_passed,
             report.checks.size());

  if (!args.out.empty()) {
    const json doc = {{"overall", report.all_passed()}, {"checks", checks}};
    write_text(args.out, doc.dump(2) + "\n");
  }
  return report.all_passed() ? 0 : 1;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateArgs {
  std::size_t n_gpu = 0;  // 0: exactly one SP block (p_u * p_r)
  std::size_t pu = 1;
  std::size_t pr = 1;
  std::size_t seq = 32;
  std::size_t heads = 8;
  std::size_t dh = 8;
  bool causal = false;
  std::size_t padded = 0;
  std::uint64_t seed = 2026;
  bool f32 = false;
  std::string mode = "stepped";
  std::string out;
  std::string ledger_csv;
};

int cmd_simulate(const SimulateArgs& args) {
  const std::size_t n_gpu = args.n_gpu == 0 ? args.pu * args.pr : args.n_gpu;
  // Validates divisibility up front so a bad topology is a usage error.
  const uspsim::ProcessTopology topo = uspsim::build_topology(n_gpu, args.pu, args.pr);

  uspsim::RunMode mode;
  if (args.mode == "stepped") {
    mode = uspsim::RunMode::stepped;
  } else if (args.mode == "concurrent") {
    mode = uspsim::RunMode::concurrent;
  } else {
    throw uspsim::ValueError(fmt::format("unknown mode '{}', expected stepped|concurrent",
                                         args.mode));
  }

  // Every DP replica would run the identical SP schedule, so one block's run
  // carries the whole story; the report scales per-rank numbers by P.
  const sp::UspReport rep =
      args.f32 ? sp::run_usp_case<float>(args.seq, args.heads, args.dh, args.pu, args.pr,
                                         args.causal, args.padded, args.seed, mode)
               : sp::run_usp_case<double>(args.seq, args.heads, args.dh, args.pu, args.pr,
                                          args.causal, args.padded, args.seed, mode);
  const double tol = args.f32 ? 1e-3 : 1e-10;
  const bool pass = rep.max_abs_err < tol && rep.ledger_exact;

  const json doc = {
      {"topology",
       {{"n_gpu", n_gpu},
        {"p_u", args.pu},
        {"p_r", args.pr},
        {"dp_replicas", topo.dp_replicas}}},
      {"problem",
       {{"seq", args.seq},
        {"heads", args.heads},
        {"head_dim", args.dh},
        {"causal", args.causal},
        {"padded", args.padded},
        {"seed", args.seed},
        {"dtype", args.f32 ? "f32" : "f64"},
        {"mode", args.mode}}},
      {"max_abs_err", rep.max_abs_err},
      {"tolerance", tol},
      {"ledger",
       {{"per_rank_qkv_a2a_bytes", rep.expect_qkv},
        {"per_rank_out_a2a_bytes", rep.expect_out},
        {"per_rank_ring_bytes", rep.expect_ring},
        {"total_bytes", rep.ledger.total_bytes()},
        {"matches_closed_form", rep.ledger_exact}}},
      {"pass", pass}};
  fmt::print("{}\n", doc.dump(2));
  if (!args.out.empty()) write_text(args.out, doc.dump(2) + "\n");
  if (!args.ledger_csv.empty()) rep.ledger.write_csv(args.ledger_csv);
  return pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// pack
// ---------------------------------------------------------------------------

struct PackArgs {
  std::string manifest;
  std::size_t n_gpu = 1;
  std::size_t pu = 1;
  std::size_t pr = 1;
  std::size_t max_ctx = 8192;
  std::uint64_t seed = 2026;
  bool no_shuffle = false;
  std::string out_dir = "pack_out";
};

uspsim::MatD ids_to_mat(const std::vector<std::vector<pack::TokenId>>& rows) {
  uspsim::MatD m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      m.at(i, j) = static_cast<double>(rows[i][j]);
    }
  }
  return m;
}

uspsim::MatD mask_to_mat(const std::vector<std::vector<std::uint8_t>>& rows) {
  uspsim::MatD m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      m.at(i, j) = static_cast<double>(rows[i][j]);
    }
  }
  return m;
}

int cmd_pack(const PackArgs& args) {
  const uspsim::ProcessTopology topo = uspsim::build_topology(args.n_gpu, args.pu, args.pr);
  const pack::PackingConfig cfg;
  const std::vector<pack::RawSample> samples = pack::load_manifest(args.manifest, cfg);
  const pack::SampleIndexPlan plan =
      pack::sp_aware_indices(samples.size(), topo, args.seed, !args.no_shuffle);

  // The sequence dimension must split evenly across an SP block, so the
  // block's size is the pad multiple.
  const std::size_t p = topo.sp_degree();
  fs::create_directories(args.out_dir);

  std::vector<pack::PackedBatch> replica_batches;
  for (std::size_t d = 0; d < topo.dp_replicas; ++d) {
    std::vector<pack::ExpandedSample> expanded;
    for (const std::size_t idx : plan.per_rank[d * p]) {
      expanded.push_back(pack::expand_audio_tokens(samples[idx], cfg));
    }
    replica_batches.push_back(pack::collate(expanded, args.max_ctx, p, cfg));
  }

  json files = json::array();
  for (std::size_t rank = 0; rank < topo.n_gpu; ++rank) {
    const pack::PackedBatch& batch = replica_batches[topo.sp_block(rank)];
    const std::string stem = fmt::format("{}/rank{}", args.out_dir, rank);
    uspsim::tdmp::write_matrix(stem + "_tokens.tdmp", ids_to_mat(batch.token_ids));
    uspsim::tdmp::write_matrix(stem + "_mask.tdmp", mask_to_mat(batch.attention_mask));
    uspsim::tdmp::write_matrix(stem + "_labels.tdmp", ids_to_mat(batch.labels));
    uspsim::MatD taus(batch.timelines.size(), batch.t);
    for (std::size_t i = 0; i < batch.timelines.size(); ++i) {
      for (std::size_t j = 0; j < batch.t; ++j) taus.at(i, j) = batch.timelines[i].taus[j];
    }
    uspsim::tdmp::write_matrix(stem + "_taus.tdmp", taus);
    files.push_back(stem + "_tokens.tdmp");
  }

  json per_replica = json::array();
  for (std::size_t d = 0; d < topo.dp_replicas; ++d) {
    per_replica.push_back({{"replica", d},
                           {"n_sequences", replica_batches[d].token_ids.size()},
                           {"t", replica_batches[d].t},
                           {"truncations", replica_batches[d].truncations}});
  }
  const json doc = {{"n_samples", samples.size()},
                    {"dp_replicas", topo.dp_replicas},
                    {"sp_degree", p},
                    {"dropped_tail", plan.dropped_tail},
                    {"per_replica", per_replica},
                    {"files", files}};
  fmt::print("{}\n", doc.dump(2));
  write_text(args.out_dir + "/summary.json", doc.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------
// blend
// ---------------------------------------------------------------------------

struct BlendArgs {
  std::string spec;
  std::string stage = "pre1";
  std::uint64_t seed = 2026;
  std::string out = "schedule.jsonl";
};

int cmd_blend(const BlendArgs& args) {
  const curriculum::Stage stage = curriculum::stage_from_name(args.stage);
  const curriculum::StageConfig stage_cfg = curriculum::stage_config(stage);

  std::vector<curriculum::BlendSpec> blends = curriculum::load_blends(args.spec);
  // The mixture file describes the stage-1 (pre-training) mixture; the
  // mid-training stages schedule its reweighted derivative.
  if (stage == curriculum::Stage::mid1 || stage == curriculum::Stage::mid2) {
    blends = curriculum::derive_stage2_blend(blends);
  }

  const std::vector<curriculum::ScheduleEntry> schedule =
      curriculum::epoch_schedule(blends, args.seed);

  std::ofstream out(args.out);
  if (!out) throw uspsim::IoError(fmt::format("cannot write {}", args.out));
  std::map<std::string, std::size_t> per_dataset;
  for (const curriculum::ScheduleEntry& e : schedule) {
    const json line = {{"dataset", blends[e.dataset].name}, {"index", e.index}};
    out << line.dump() << "\n";
    ++per_dataset[blends[e.dataset].name];
  }

  const json doc = {{"stage", args.stage},
                    {"max_audio_s", stage_cfg.max_audio_s},
                    {"max_ctx", stage_cfg.max_ctx},
                    {"seed", args.seed},
                    {"total_entries", schedule.size()},
                    {"per_dataset", per_dataset},
                    {"out", args.out}};
  fmt::print("{}\n", doc.dump(2));
  return 0;
}

// ---------------------------------------------------------------------------
// mel
// ---------------------------------------------------------------------------

struct MelArgs {
  std::string wav;
  std::size_t dim = uspsim::kEncoderDim;
  std::uint64_t seed = 0;
  std::string out_dir = "mel_out";
};

int cmd_mel(const MelArgs& args) {
  const uspsim::wav::WavData data = uspsim::wav::read(args.wav);
  uspsim::AudioClip clip;
  clip.samples = data.samples;
  clip.sample_rate = static_cast<std::size_t>(data.sample_rate);
  clip.validate();

  // Clips longer than 30 s are processed chunk by chunk, like the real
  // frontend; frames and tokens are concatenated with shifted timestamps.
  const std::vector<double> chunks = uspsim::chunk_audio(clip.duration_s());
  std::vector<uspsim::MelSpectrogram> mels;
  std::size_t total_frames = 0;
  std::size_t offset = 0;
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    const std::size_t n = c + 1 < chunks.size()
                              ? static_cast<std::size_t>(30.0 * uspsim::kSampleRate)
                              : clip.samples.size() - offset;
    uspsim::AudioClip piece;
    piece.samples.assign(clip.samples.begin() + static_cast<std::ptrdiff_t>(offset),
                         clip.samples.begin() + static_cast<std::ptrdiff_t>(offset + n));
    offset += n;
    mels.push_back(uspsim::log_mel(piece));
    total_frames += mels.back().n_frames;
  }

  uspsim::MatD mel_all(uspsim::kNumMels, total_frames);
  std::size_t col = 0;
  for (const uspsim::MelSpectrogram& mel : mels) {
    for (std::size_t i = 0; i < mel.n_mels; ++i) {
      for (std::size_t j = 0; j < mel.n_frames; ++j) {
        mel_all.at(i, col + j) = mel.values.at(i, j);
      }
    }
    col += mel.n_frames;
  }

  std::size_t total_tokens = 0;
  std::vector<uspsim::EncoderFeatures> pooled;
  for (const uspsim::MelSpectrogram& mel : mels) {
    pooled.push_back(uspsim::pool_stride2(uspsim::encode_stub(mel, args.dim, args.seed)));
    total_tokens += pooled.back().n_tokens;
  }
  uspsim::MatD features(total_tokens, args.dim);
  std::vector<double> taus;
  taus.reserve(total_tokens);
  std::size_t row = 0;
  double clock = 0.0;
  for (std::size_t c = 0; c < pooled.size(); ++c) {
    for (std::size_t i = 0; i < pooled[c].n_tokens; ++i) {
      for (std::size_t j = 0; j < args.dim; ++j) {
        features.at(row, j) = pooled[c].values.at(i, j);
      }
      taus.push_back(clock + pooled[c].timestamps.taus[i]);
      ++row;
    }
    clock += chunks[c];
  }

  fs::create_directories(args.out_dir);
  uspsim::tdmp::write_matrix(args.out_dir + "/mel.tdmp", mel_all);
  uspsim::tdmp::write_matrix(args.out_dir + "/features.tdmp", features);
  uspsim::tdmp::write(args.out_dir + "/taus.tdmp",
                      {{static_cast<std::uint64_t>(taus.size())}, taus});

  const json doc = {{"duration_s", clip.duration_s()},
                    {"chunks", chunks.size()},
                    {"n_frames", total_frames},
                    {"n_tokens", total_tokens},
                    {"encoder_dim", args.dim},
                    {"files", {args.out_dir + "/mel.tdmp", args.out_dir + "/features.tdmp",
                               args.out_dir + "/taus.tdmp"}}};
  fmt::print("{}\n", doc.dump(2));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Deterministic long-context training arithmetic: sequence-parallel attention "
      "over a simulated fabric, time-rotary embeddings, the audio token pipeline, "
      "batch packing and curriculum planning."};
  app.require_subcommand(1);

  VerifyArgs verify_args;
  CLI::App* verify_cmd = app.add_subcommand("verify", "Run the eight verification suites");
  verify_cmd->add_option("--config", verify_args.config, "JSON config (seeds, tolerances)");
  verify_cmd->add_option("--out", verify_args.out, "Write the JSON report here");

  SimulateArgs sim_args;
  CLI::App* sim_cmd =
      app.add_subcommand("simulate", "One parallel-vs-serial attention comparison");
  sim_cmd->add_option("--n-gpu", sim_args.n_gpu, "Total ranks (default: one SP block)");
  sim_cmd->add_option("--pu", sim_args.pu, "Ulysses degree")->capture_default_str();
  sim_cmd->add_option("--pr", sim_args.pr, "Ring degree")->capture_default_str();
  sim_cmd->add_option("--seq", sim_args.seq, "Sequence length")->capture_default_str();
  sim_cmd->add_option("--heads", sim_args.heads, "Attention heads")->capture_default_str();
  sim_cmd->add_option("--dh", sim_args.dh, "Head dimension")->capture_default_str();
  sim_cmd->add_flag("--causal", sim_args.causal, "Causal masking");
  sim_cmd->add_option("--padded", sim_args.padded, "Trailing padded positions");
  sim_cmd->add_option("--seed", sim_args.seed, "Problem seed")->capture_default_str();
  sim_cmd->add_flag("--f32", sim_args.f32, "32-bit payloads (tolerance 1e-3)");
  sim_cmd->add_option("--mode", sim_args.mode, "stepped|concurrent")->capture_default_str();
  sim_cmd->add_option("--out", sim_args.out, "Write the JSON report here");
  sim_cmd->add_option("--ledger-csv", sim_args.ledger_csv, "Write the raw ledger as CSV");

  PackArgs pack_args;
  CLI::App* pack_cmd = app.add_subcommand("pack", "Pack a manifest into per-rank batches");
  pack_cmd->add_option("--manifest", pack_args.manifest, "JSONL manifest")->required();
  pack_cmd->add_option("--n-gpu", pack_args.n_gpu, "Total ranks")->capture_default_str();
  pack_cmd->add_option("--pu", pack_args.pu, "Ulysses degree")->capture_default_str();
  pack_cmd->add_option("--pr", pack_args.pr, "Ring degree")->capture_default_str();
  pack_cmd->add_option("--max-ctx", pack_args.max_ctx, "Context cap")->capture_default_str();
  pack_cmd->add_option("--seed", pack_args.seed, "Shuffle seed")->capture_default_str();
  pack_cmd->add_flag("--no-shuffle", pack_args.no_shuffle, "Keep manifest order");
  pack_cmd->add_option("--out-dir", pack_args.out_dir, "Dump directory")
      ->capture_default_str();

  BlendArgs blend_args;
  CLI::App* blend_cmd = app.add_subcommand("blend", "Plan one blend-weighted epoch");
  blend_cmd->add_option("--spec", blend_args.spec, "blends.json")->required();
  blend_cmd->add_option("--stage", blend_args.stage, "pre1|pre2|mid1|mid2")
      ->capture_default_str();
  blend_cmd->add_option("--seed", blend_args.seed, "Schedule seed")->capture_default_str();
  blend_cmd->add_option("--out", blend_args.out, "Schedule JSONL path")
      ->capture_default_str();

  MelArgs mel_args;
  CLI::App* mel_cmd = app.add_subcommand("mel", "Audio frontend dumps for a WAV file");
  mel_cmd->add_option("--wav", mel_args.wav, "Input WAV (16 kHz mono)")->required();
  mel_cmd->add_option("--dim", mel_args.dim, "Encoder width")->capture_default_str();
  mel_cmd->add_option("--seed", mel_args.seed, "Encoder/projection seed")
      ->capture_default_str();
  mel_cmd->add_option("--out-dir", mel_args.out_dir, "Dump directory")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // --help stays success; parse errors are usage errors
  }

  try {
    if (verify_cmd->parsed()) return cmd_verify(verify_args);
    if (sim_cmd->parsed()) return cmd_simulate(sim_args);
    if (pack_cmd->parsed()) return cmd_pack(pack_args);
    if (blend_cmd->parsed()) return cmd_blend(blend_args);
    if (mel_cmd->parsed()) return cmd_mel(mel_args);
  } catch (const uspsim::Error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  }
  return 2;  // unreachable with require_subcommand(1)
}
