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

// Three-stage batch packing for sequence-parallel training:
//
//   1. SP-aware sampling — the epoch's sample indices are dealt round-robin
//      across data-parallel replicas so that every rank inside one SP group
//      sees the identical list (the group shards a single sequence, so its
//      members must agree on which sequence that is).
//   2. Audio expansion — each audio placeholder in a raw sample is replaced
//      by the clip's duration-determined number of audio-embedding tokens,
//      stamped onto a real-time token timeline.
//   3. Collation — expanded samples are padded (or right-truncated) to a
//      common length with a binary attention mask and ignore-index labels.
//
// All three stages are pure functions of their inputs plus a seed, so every
// rank can plan independently and arrive at byte-identical batches.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "uspsim/fabric.hpp"
#include "uspsim/rote.hpp"

namespace uspsim::pack {

/// Token ids are signed so sentinel ids can live below zero, away from any
/// real vocabulary.
using TokenId = std::int64_t;

/// Sentinel ids and padding conventions shared by the pipeline.
struct PackingConfig {
  TokenId placeholder_id = -1;   // marks "insert this clip's audio tokens here"
  TokenId audio_token_id = -2;   // id emitted for every expanded audio slot
  TokenId pad_id = 0;            // id written at padded positions
  TokenId ignore_index = -100;   // label at padded and audio positions

  void validate() const;  // sentinels must be pairwise distinct
};

/// One manifest entry: text tokens with placeholder markers, the clip
/// duration behind each placeholder (in order), and per-token labels.
struct RawSample {
  std::string id;
  std::vector<TokenId> text_tokens;
  std::vector<double> audio_durations_s;  // one per placeholder occurrence
  std::vector<TokenId> labels;            // same length as text_tokens

  /// Throws ValueError unless placeholder occurrences match the duration
  /// count, durations are positive and finite, labels align with the text,
  /// and the sample is non-empty.
  void validate(const PackingConfig& cfg) const;
};

/// A RawSample after audio expansion: every placeholder replaced by its
/// clip's audio_token_count(duration) audio tokens (labels ignore_index
/// there), with per-token timestamps from build_timeline.
struct ExpandedSample {
  std::string id;
  std::vector<TokenId> tokens;
  std::vector<TokenId> labels;
  TokenTimeline timeline;
  /// Half-open [begin, end) token ranges covered by each clip's expansion,
  /// in clip order. Truncation must not split one of these runs.
  std::vector<std::pair<std::size_t, std::size_t>> audio_runs;

  std::size_t size() const { return tokens.size(); }
};

/// Replaces each placeholder with its clip's audio tokens and builds the
/// interleaved timeline. Text tokens advance the clock by virtual_stride.
ExpandedSample expand_audio_tokens(const RawSample& s, const PackingConfig& cfg,
                                   double virtual_stride = kAudioTokenStrideSeconds);

/// Which sample indices each rank consumes during one epoch.
struct SampleIndexPlan {
  std::size_t dp_replicas = 0;
  std::uint64_t seed = 0;
  std::size_t dropped_tail = 0;  // n_samples mod dp_replicas trailing indices
  /// One ordered list per rank; all ranks of an SP group hold equal lists.
  std::vector<std::vector<std::size_t>> per_rank;
};

/// Deals a (optionally seeded-shuffled) epoch of n_samples across the
/// topology's DP replicas: replica r takes shuffled positions r, r + dp,
/// r + 2 dp, ... and every rank of that replica receives the full list. The
/// trailing n_samples mod dp remainder is dropped so lists stay equal
/// length. Throws ValueError when n_samples < dp_replicas.
SampleIndexPlan sp_aware_indices(std::size_t n_samples, const ProcessTopology& topo,
                                 std::uint64_t seed, bool shuffle);

/// A collated batch, ready for sharding across one SP group.
struct PackedBatch {
  std::vector<std::vector<TokenId>> token_ids;         // batch x T
  std::vector<std::vector<std::uint8_t>> attention_mask;  // 1 = real token
  std::vector<std::vector<TokenId>> labels;            // ignore_index at mask 0
  std::vector<TokenTimeline> timelines;                // per sequence, length T
  std::size_t t = 0;            // padded length
  std::size_t truncations = 0;  // sequences cut from the right
};

/// Pads every sample to T = min(longest sample, max_ctx) rounded up to
/// pad_multiple, truncating longer samples from the right. A cut that would
/// split one clip's audio run moves back to the run's start; a sample whose
/// leading run alone exceeds the context is rejected (ValueError). max_ctx
/// must be a multiple of pad_multiple so the rounding never exceeds the cap.
PackedBatch collate(const std::vector<ExpandedSample>& samples, std::size_t max_ctx,
                    std::size_t pad_multiple, const PackingConfig& cfg);

/// Reads a JSONL manifest: one {"id", "text_tokens", "audio":
/// [{"duration_s"}], "labels"} object per line. "audio" defaults to none,
/// "labels" to a copy of "text_tokens", "id" to "sample-<line>". Throws
/// IoError when the file is unreadable and ValueError on malformed lines.
std::vector<RawSample> load_manifest(const std::string& path, const PackingConfig& cfg);

}  // namespace uspsim::pack
