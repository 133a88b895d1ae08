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

#include "uspsim/curriculum.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>
#include <json.hpp>

#include "uspsim/error.hpp"
#include "uspsim/mel.hpp"
#include "uspsim/rng.hpp"

namespace uspsim::curriculum {

void BlendSpec::validate() const {
  if (!std::isfinite(beta) || beta < 0.0) {
    throw ValueError(fmt::format("blend {}: beta {} must be finite and non-negative", name,
                                 beta));
  }
}

std::size_t blend_count(const BlendSpec& spec) {
  spec.validate();
  // Round half up. The 1e-9 nudge keeps products that are exactly k + 1/2 in
  // real arithmetic (e.g. 0.75 * 10) from landing a hair below the boundary.
  const double scaled = spec.beta * static_cast<double>(spec.size);
  return static_cast<std::size_t>(std::floor(scaled + 0.5 + 1e-9));
}

std::vector<ScheduleEntry> epoch_schedule(const std::vector<BlendSpec>& blends,
                                          std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ScheduleEntry> schedule;
  for (std::size_t d = 0; d < blends.size(); ++d) {
    const BlendSpec& spec = blends[d];
    std::size_t want = blend_count(spec);
    if (want == 0) continue;  // covers empty datasets: beta * 0 rounds to 0

    schedule.reserve(schedule.size() + want);
    std::vector<std::size_t> perm(spec.size);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    // Full passes repeat every index; each pass (and the final partial one)
    // gets its own shuffle. beta <= 1 degenerates to one partial pass, i.e.
    // a subset without replacement.
    while (want > 0) {
      rng.shuffle(perm);
      const std::size_t take = std::min(want, spec.size);
      for (std::size_t p = 0; p < take; ++p) schedule.push_back({d, perm[p]});
      want -= take;
    }
  }
  if (schedule.empty()) {
    throw ValueError("epoch_schedule: no dataset contributes any samples");
  }
  rng.shuffle(schedule);
  return schedule;
}

std::vector<BlendSpec> derive_stage2_blend(const std::vector<BlendSpec>& stage1) {
  std::vector<BlendSpec> out = stage1;
  for (BlendSpec& spec : out) {
    spec.validate();
    spec.beta = spec.is_long_audio ? 1.0 : spec.beta / 2.0;
  }
  return out;
}

Stage stage_from_name(const std::string& name) {
  if (name == "pre1") return Stage::pre1;
  if (name == "pre2") return Stage::pre2;
  if (name == "mid1") return Stage::mid1;
  if (name == "mid2") return Stage::mid2;
  throw ValueError(fmt::format("unknown stage '{}', expected pre1|pre2|mid1|mid2", name));
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::pre1: return "pre1";
    case Stage::pre2: return "pre2";
    case Stage::mid1: return "mid1";
    case Stage::mid2: return "mid2";
  }
  throw ValueError("unknown stage value");
}

StageConfig stage_config(Stage stage) {
  switch (stage) {
    case Stage::pre1: return {stage, 30.0, 8192};
    case Stage::pre2: return {stage, 60.0, 8192};
    case Stage::mid1: return {stage, 600.0, 24576};
    case Stage::mid2: return {stage, 1800.0, 131072};
  }
  throw ValueError("unknown stage value");
}

StageCheck validate_sample_for_stage(const pack::RawSample& sample, const StageConfig& cfg,
                                     const pack::PackingConfig& pcfg) {
  sample.validate(pcfg);
  for (std::size_t i = 0; i < sample.audio_durations_s.size(); ++i) {
    const double d = sample.audio_durations_s[i];
    if (d > cfg.max_audio_s) {
      return {false, fmt::format("clip {} runs {} s, over the {} s cap of stage {}", i, d,
                                 cfg.max_audio_s, stage_name(cfg.stage))};
    }
  }
  std::size_t expanded = 0;
  for (const pack::TokenId tok : sample.text_tokens) {
    if (tok != pcfg.placeholder_id) ++expanded;
  }
  for (const double d : sample.audio_durations_s) expanded += audio_token_count(d);
  if (expanded > cfg.max_ctx) {
    return {false, fmt::format("expands to {} tokens, over the {} token cap of stage {}",
                               expanded, cfg.max_ctx, stage_name(cfg.stage))};
  }
  return {true, {}};
}

std::vector<BlendSpec> load_blends(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open blend spec {}", path));

  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(fmt::format("blend spec {}: {}", path, e.what()));
  }
  if (!doc.is_array()) {
    throw ValueError(fmt::format("blend spec {}: expected a JSON array", path));
  }

  std::vector<BlendSpec> blends;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const nlohmann::json& entry = doc[i];
    BlendSpec spec;
    try {
      spec.name = entry.at("name").get<std::string>();
      spec.size = entry.at("size").get<std::size_t>();
      spec.beta = entry.at("beta").get<double>();
      spec.is_long_audio = entry.value("long_audio", false);
    } catch (const nlohmann::json::exception& e) {
      throw ValueError(fmt::format("blend spec {} entry {}: {}", path, i, e.what()));
    }
    spec.validate();
    blends.push_back(std::move(spec));
  }
  return blends;
}

}  // namespace uspsim::curriculum
