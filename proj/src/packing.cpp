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

#include "uspsim/packing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include <fmt/format.h>
#include <json.hpp>

#include "uspsim/error.hpp"
#include "uspsim/mel.hpp"
#include "uspsim/rng.hpp"

namespace uspsim::pack {

void PackingConfig::validate() const {
  const TokenId ids[] = {placeholder_id, audio_token_id, pad_id, ignore_index};
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) {
      if (ids[i] == ids[j]) {
        throw ValueError(fmt::format(
            "packing config: sentinel ids must be distinct, got {} twice", ids[i]));
      }
    }
  }
}

void RawSample::validate(const PackingConfig& cfg) const {
  cfg.validate();
  if (text_tokens.empty()) {
    throw ValueError(fmt::format("sample {}: no tokens", id));
  }
  const std::size_t n_placeholders = static_cast<std::size_t>(
      std::count(text_tokens.begin(), text_tokens.end(), cfg.placeholder_id));
  if (n_placeholders != audio_durations_s.size()) {
    throw ValueError(fmt::format("sample {}: {} audio placeholders but {} durations", id,
                                 n_placeholders, audio_durations_s.size()));
  }
  for (std::size_t i = 0; i < audio_durations_s.size(); ++i) {
    const double d = audio_durations_s[i];
    if (!std::isfinite(d) || d <= 0.0) {
      throw ValueError(fmt::format("sample {}: clip {} has non-positive duration {}", id, i, d));
    }
  }
  if (labels.size() != text_tokens.size()) {
    throw ValueError(fmt::format("sample {}: {} labels for {} tokens", id, labels.size(),
                                 text_tokens.size()));
  }
  if (std::find(text_tokens.begin(), text_tokens.end(), cfg.audio_token_id) !=
      text_tokens.end()) {
    throw ValueError(fmt::format("sample {}: raw text may not contain the audio token id {}",
                                 id, cfg.audio_token_id));
  }
}

ExpandedSample expand_audio_tokens(const RawSample& s, const PackingConfig& cfg,
                                   double virtual_stride) {
  s.validate(cfg);
  ExpandedSample out;
  out.id = s.id;

  // Segments mirror the token emission below exactly: audio_token_count
  // drives both the emitted run length and build_timeline's audio segments.
  std::vector<TimelineSegment> segments;
  std::size_t text_run = 0;
  std::size_t next_clip = 0;
  for (std::size_t i = 0; i < s.text_tokens.size(); ++i) {
    if (s.text_tokens[i] != cfg.placeholder_id) {
      ++text_run;
      out.tokens.push_back(s.text_tokens[i]);
      out.labels.push_back(s.labels[i]);
      continue;
    }
    if (text_run > 0) {
      segments.push_back(TimelineSegment::text(text_run));
      text_run = 0;
    }
    const double duration = s.audio_durations_s[next_clip++];
    const std::size_t n_audio = audio_token_count(duration);
    segments.push_back(TimelineSegment::audio(duration));
    const std::size_t begin = out.tokens.size();
    out.tokens.insert(out.tokens.end(), n_audio, cfg.audio_token_id);
    out.labels.insert(out.labels.end(), n_audio, cfg.ignore_index);
    out.audio_runs.emplace_back(begin, begin + n_audio);
  }
  if (text_run > 0) segments.push_back(TimelineSegment::text(text_run));

  out.timeline = build_timeline(segments, virtual_stride);
  if (out.timeline.size() != out.tokens.size()) {
    throw ValueError(fmt::format("sample {}: timeline length {} != token count {}", s.id,
                                 out.timeline.size(), out.tokens.size()));
  }
  return out;
}

SampleIndexPlan sp_aware_indices(std::size_t n_samples, const ProcessTopology& topo,
                                 std::uint64_t seed, bool shuffle) {
  topo.validate();
  const std::size_t dp = topo.dp_replicas;
  if (n_samples < dp) {
    throw ValueError(fmt::format("sp_aware_indices: {} samples cannot feed {} DP replicas",
                                 n_samples, dp));
  }

  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(order);
  }

  SampleIndexPlan plan;
  plan.dp_replicas = dp;
  plan.seed = seed;
  plan.dropped_tail = n_samples % dp;

  // Position p of the (shuffled) epoch goes to replica p mod dp, so the
  // replicas advance through the epoch in lock step and end up equal length.
  std::vector<std::vector<std::size_t>> replica_lists(dp);
  const std::size_t usable = n_samples - plan.dropped_tail;
  for (std::size_t r = 0; r < dp; ++r) replica_lists[r].reserve(usable / dp);
  for (std::size_t p = 0; p < usable; ++p) replica_lists[p % dp].push_back(order[p]);

  plan.per_rank.reserve(topo.n_gpu);
  for (std::size_t rank = 0; rank < topo.n_gpu; ++rank) {
    plan.per_rank.push_back(replica_lists[topo.sp_block(rank)]);
  }
  return plan;
}

namespace {

// Moves a right-truncation cut out of the middle of any clip's audio run:
// a partially present clip would change its own token count, so the cut
// backs up to the run's start instead.
std::size_t adjust_cut(const ExpandedSample& s, std::size_t cut, std::size_t t) {
  for (const auto& [begin, end] : s.audio_runs) {
    if (begin < cut && cut < end) {
      cut = begin;
      break;  // runs are disjoint and ordered; at most one straddles
    }
  }
  if (cut == 0) {
    throw ValueError(fmt::format(
        "sample {}: leading audio run of {} tokens exceeds the {}-token context", s.id,
        s.audio_runs.front().second - s.audio_runs.front().first, t));
  }
  return cut;
}

}  // namespace

PackedBatch collate(const std::vector<ExpandedSample>& samples, std::size_t max_ctx,
                    std::size_t pad_multiple, const PackingConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw ValueError("collate: empty batch");
  if (max_ctx == 0) throw ValueError("collate: max_ctx must be positive");
  if (pad_multiple == 0) throw ValueError("collate: pad_multiple must be positive");
  if (max_ctx % pad_multiple != 0) {
    throw ValueError(fmt::format("collate: max_ctx {} is not a multiple of pad_multiple {}",
                                 max_ctx, pad_multiple));
  }

  std::size_t max_len = 0;
  for (const ExpandedSample& s : samples) {
    if (s.size() == 0) throw ValueError(fmt::format("sample {}: empty sequence", s.id));
    if (s.size() != s.labels.size() || s.size() != s.timeline.size()) {
      throw ValueError(fmt::format("sample {}: tokens, labels and timeline disagree", s.id));
    }
    max_len = std::max(max_len, s.size());
  }

  // The shorter of the longest sequence and the context cap, then rounded up
  // so the sequence dimension stays divisible across an SP block. max_ctx is
  // itself a multiple of pad_multiple, so T never exceeds the cap.
  std::size_t t = std::min(max_len, max_ctx);
  t = (t + pad_multiple - 1) / pad_multiple * pad_multiple;

  PackedBatch batch;
  batch.t = t;
  for (const ExpandedSample& s : samples) {
    std::size_t cut = std::min(s.size(), t);
    if (cut < s.size()) {
      cut = adjust_cut(s, cut, t);
      ++batch.truncations;
    }

    std::vector<TokenId> ids(s.tokens.begin(), s.tokens.begin() + cut);
    ids.resize(t, cfg.pad_id);
    std::vector<std::uint8_t> mask(cut, 1);
    mask.resize(t, 0);
    std::vector<TokenId> labels(s.labels.begin(), s.labels.begin() + cut);
    labels.resize(t, cfg.ignore_index);

    // Padded positions stay on the 40 ms grid past the last real token so
    // the timeline remains monotone; their rows are masked out anyway.
    TokenTimeline timeline = s.timeline.slice(0, cut);
    timeline.taus.reserve(t);
    const double last = timeline.taus.back();
    for (std::size_t p = cut; p < t; ++p) {
      timeline.taus.push_back(last +
                              static_cast<double>(p - cut + 1) * kAudioTokenStrideSeconds);
    }

    batch.token_ids.push_back(std::move(ids));
    batch.attention_mask.push_back(std::move(mask));
    batch.labels.push_back(std::move(labels));
    batch.timelines.push_back(std::move(timeline));
  }
  return batch;
}

std::vector<RawSample> load_manifest(const std::string& path, const PackingConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open manifest {}", path));

  std::vector<RawSample> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ValueError(fmt::format("manifest line {}: {}", line_no, e.what()));
    }
    if (!doc.is_object() || !doc.contains("text_tokens") || !doc["text_tokens"].is_array()) {
      throw ValueError(
          fmt::format("manifest line {}: expected an object with text_tokens", line_no));
    }

    RawSample s;
    s.id = doc.value("id", fmt::format("sample-{}", line_no));
    try {
      s.text_tokens = doc["text_tokens"].get<std::vector<TokenId>>();
      if (doc.contains("audio")) {
        for (const auto& clip : doc["audio"]) {
          s.audio_durations_s.push_back(clip.at("duration_s").get<double>());
        }
      }
      if (doc.contains("labels")) {
        s.labels = doc["labels"].get<std::vector<TokenId>>();
      } else {
        s.labels = s.text_tokens;
      }
    } catch (const nlohmann::json::exception& e) {
      throw ValueError(fmt::format("manifest line {}: {}", line_no, e.what()));
    }
    s.validate(cfg);
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace uspsim::pack
