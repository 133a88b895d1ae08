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

// Blend-weight curriculum planning: every dataset d contributes
// round(beta_d * size_d) samples to an epoch, the four training stages cap
// clip length and context length, and the stage-2 rule reweights a stage-1
// mixture (halve everything, long-audio datasets to 1).

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "uspsim/packing.hpp"

namespace uspsim::curriculum {

/// One dataset's share of the training mixture.
struct BlendSpec {
  std::string name;
  std::size_t size = 0;       // samples in the dataset
  double beta = 0.0;          // blend weight, >= 0
  bool is_long_audio = false;

  void validate() const;  // beta finite and non-negative
};

/// Samples an epoch contributes from dataset `spec`: round(beta * size),
/// half values rounding up.
std::size_t blend_count(const BlendSpec& spec);

/// One scheduled sample: dataset position in the blend list + sample index.
struct ScheduleEntry {
  std::size_t dataset = 0;
  std::size_t index = 0;

  friend bool operator==(const ScheduleEntry&, const ScheduleEntry&) = default;
};

/// Plans one epoch: dataset d contributes blend_count(d) entries — a seeded
/// subset without replacement when beta <= 1, full per-cycle reshuffled
/// passes plus a partial pass when beta > 1 — and the combined stream is
/// shuffled once. Throws ValueError when no dataset contributes anything.
std::vector<ScheduleEntry> epoch_schedule(const std::vector<BlendSpec>& blends,
                                          std::uint64_t seed);

/// The mid-training reweighting rule: non-long-audio blend weights are
/// halved, long-audio datasets move to weight 1.
std::vector<BlendSpec> derive_stage2_blend(const std::vector<BlendSpec>& stage1);

/// The four training stages, in curriculum order.
enum class Stage { pre1, pre2, mid1, mid2 };

/// Parses "pre1" | "pre2" | "mid1" | "mid2"; anything else is a ValueError.
Stage stage_from_name(const std::string& name);
std::string stage_name(Stage stage);

/// Per-stage caps on clip length and packed context length.
struct StageConfig {
  Stage stage = Stage::pre1;
  double max_audio_s = 0.0;
  std::size_t max_ctx = 0;
};

/// pre1 -> 30 s / 8192, pre2 -> 60 s / 8192, mid1 -> 600 s / 24576,
/// mid2 -> 1800 s / 131072.
StageConfig stage_config(Stage stage);

/// Outcome of checking one sample against a stage's caps. Rejection is a
/// result, not an error.
struct StageCheck {
  bool accepted = false;
  std::string reason;  // empty when accepted
};

/// Rejects the sample when any clip exceeds max_audio_s or its expanded
/// token count exceeds max_ctx.
StageCheck validate_sample_for_stage(const pack::RawSample& sample, const StageConfig& cfg,
                                     const pack::PackingConfig& pcfg);

/// Reads a blend list from JSON: [{"name", "size", "beta", "long_audio"}].
/// Throws IoError when unreadable, ValueError on malformed entries.
std::vector<BlendSpec> load_blends(const std::string& path);

}  // namespace uspsim::curriculum
