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

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <doctest.h>

#include "uspsim/error.hpp"
#include "uspsim/fabric.hpp"
#include "uspsim/mel.hpp"
#include "uspsim/packing.hpp"
#include "uspsim/rng.hpp"

namespace {

using uspsim::audio_token_count;
using uspsim::build_topology;
using uspsim::IoError;
using uspsim::kAudioTokenStrideSeconds;
using uspsim::ProcessTopology;
using uspsim::Rng;
using uspsim::ValueError;
namespace pack = uspsim::pack;

const pack::PackingConfig kCfg;

/// A sample of n plain text tokens: ids 1..n, labels 1001..1000+n.
pack::RawSample raw_text(std::size_t n, const std::string& id = "t") {
  pack::RawSample s;
  s.id = id;
  for (std::size_t i = 1; i <= n; ++i) {
    s.text_tokens.push_back(static_cast<pack::TokenId>(i));
    s.labels.push_back(static_cast<pack::TokenId>(1000 + i));
  }
  return s;
}

/// text(n_before) + placeholder(duration) + text(n_after).
pack::RawSample raw_with_clip(std::size_t n_before, double duration, std::size_t n_after,
                              const std::string& id = "a") {
  pack::RawSample s = raw_text(n_before + n_after, id);
  s.text_tokens.insert(s.text_tokens.begin() + static_cast<std::ptrdiff_t>(n_before),
                       kCfg.placeholder_id);
  s.labels.insert(s.labels.begin() + static_cast<std::ptrdiff_t>(n_before), 0);
  s.audio_durations_s.push_back(duration);
  return s;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// ---------------------------------------------------------------------------
// SP-aware sampling
// ---------------------------------------------------------------------------

TEST_CASE("unshuffled indices deal round-robin across replicas") {
  const ProcessTopology topo = build_topology(4, 2, 1);  // P = 2, dp = 2
  const pack::SampleIndexPlan plan = pack::sp_aware_indices(8, topo, 0, false);
  CHECK(plan.dp_replicas == 2);
  CHECK(plan.dropped_tail == 0);
  const std::vector<std::size_t> even = {0, 2, 4, 6};
  const std::vector<std::size_t> odd = {1, 3, 5, 7};
  CHECK(plan.per_rank[0] == even);
  CHECK(plan.per_rank[1] == even);
  CHECK(plan.per_rank[2] == odd);
  CHECK(plan.per_rank[3] == odd);
}

TEST_CASE("plans are deterministic in the seed") {
  const ProcessTopology topo = build_topology(4, 2, 1);
  const pack::SampleIndexPlan a = pack::sp_aware_indices(100, topo, 7, true);
  const pack::SampleIndexPlan b = pack::sp_aware_indices(100, topo, 7, true);
  CHECK(a.per_rank == b.per_rank);

  const pack::SampleIndexPlan c = pack::sp_aware_indices(100, topo, 8, true);
  CHECK(a.per_rank != c.per_rank);
}

TEST_CASE("a single replica receives the whole shuffled epoch") {
  const ProcessTopology topo = build_topology(4, 2, 2);  // P = n_gpu, dp = 1
  const pack::SampleIndexPlan plan = pack::sp_aware_indices(8, topo, 3, true);
  CHECK(plan.dropped_tail == 0);
  std::vector<std::size_t> sorted = plan.per_rank[0];
  std::sort(sorted.begin(), sorted.end());
  const std::vector<std::size_t> everything = {0, 1, 2, 3, 4, 5, 6, 7};
  CHECK(sorted == everything);
  for (std::size_t r = 1; r < 4; ++r) CHECK(plan.per_rank[r] == plan.per_rank[0]);
}

TEST_CASE("plan invariants hold across seeds and topologies") {
  const std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> shapes = {
      {4, 2, 1}, {4, 1, 2}, {4, 1, 1}, {8, 2, 2}, {8, 4, 1}, {6, 1, 2}};
  const std::size_t n_samples = 17;
  for (const auto& [n_gpu, pu, pr] : shapes) {
    const ProcessTopology topo = build_topology(n_gpu, pu, pr);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const pack::SampleIndexPlan plan = pack::sp_aware_indices(n_samples, topo, seed, true);
      CHECK(plan.dropped_tail == n_samples % topo.dp_replicas);
      CHECK(plan.dropped_tail < topo.dp_replicas);

      // Every rank of an SP block holds the identical list.
      for (std::size_t rank = 0; rank < n_gpu; ++rank) {
        const std::size_t leader = topo.sp_block(rank) * topo.sp_degree();
        CHECK(plan.per_rank[rank] == plan.per_rank[leader]);
      }

      // Distinct replica lists are equal length, disjoint, and cover the
      // epoch minus the dropped tail.
      std::set<std::size_t> seen;
      std::size_t covered = 0;
      for (std::size_t d = 0; d < topo.dp_replicas; ++d) {
        const std::vector<std::size_t>& list = plan.per_rank[d * topo.sp_degree()];
        CHECK(list.size() == (n_samples - plan.dropped_tail) / topo.dp_replicas);
        covered += list.size();
        for (const std::size_t idx : list) {
          CHECK(idx < n_samples);
          CHECK(seen.insert(idx).second);  // no index lands on two replicas
        }
      }
      CHECK(covered == n_samples - plan.dropped_tail);
    }
  }
}

TEST_CASE("too few samples for the replica count is an error") {
  const ProcessTopology topo = build_topology(8, 2, 1);  // dp = 4
  CHECK_THROWS_AS(pack::sp_aware_indices(3, topo, 0, false), ValueError);
}

// ---------------------------------------------------------------------------
// Audio expansion
// ---------------------------------------------------------------------------

TEST_CASE("a one-second clip expands to twenty-five audio tokens") {
  const pack::RawSample s = raw_with_clip(3, 1.0, 2);
  const pack::ExpandedSample e = pack::expand_audio_tokens(s, kCfg);
  CHECK(e.size() == 3 + 25 + 2);
  REQUIRE(e.audio_runs.size() == 1);
  CHECK(e.audio_runs[0] == std::pair<std::size_t, std::size_t>{3, 28});
  for (std::size_t i = 3; i < 28; ++i) {
    CHECK(e.tokens[i] == kCfg.audio_token_id);
    CHECK(e.labels[i] == kCfg.ignore_index);
  }
  CHECK(e.tokens[0] == 1);
  CHECK(e.tokens[28] == 4);  // text resumes after the expansion
  CHECK(e.labels[28] == 1004);
}

TEST_CASE("expansion timestamps advance on one uniform grid") {
  // 2 text + 5 audio (0.2 s) + 1 text: text and audio strides coincide at
  // 40 ms, so the whole sequence sits on a uniform grid.
  const pack::RawSample s = raw_with_clip(2, 0.2, 1);
  const pack::ExpandedSample e = pack::expand_audio_tokens(s, kCfg);
  REQUIRE(e.size() == 8);
  CHECK(e.timeline.taus[0] == 0.0);
  for (std::size_t i = 1; i < 8; ++i) {
    CHECK(e.timeline.taus[i] - e.timeline.taus[i - 1] ==
          doctest::Approx(kAudioTokenStrideSeconds).epsilon(1e-12));
  }
}

TEST_CASE("no placeholders leaves the sequence unchanged") {
  const pack::RawSample s = raw_text(6);
  const pack::ExpandedSample e = pack::expand_audio_tokens(s, kCfg);
  CHECK(e.tokens == s.text_tokens);
  CHECK(e.labels == s.labels);
  CHECK(e.audio_runs.empty());
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(e.timeline.taus[i] == static_cast<double>(i) * kAudioTokenStrideSeconds);
  }
}

TEST_CASE("a thirty-minute clip becomes forty-five thousand tokens") {
  pack::RawSample s = raw_text(1, "long");
  s.text_tokens.push_back(kCfg.placeholder_id);
  s.labels.push_back(0);
  s.audio_durations_s.push_back(1800.0);
  const pack::ExpandedSample e = pack::expand_audio_tokens(s, kCfg);
  CHECK(e.size() == 1 + 45000);
}

TEST_CASE("expansion conserves token counts over random samples") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    pack::RawSample s;
    s.id = "rand";
    std::size_t n_text = 0;
    std::size_t expected_audio = 0;
    const std::size_t n_parts = 1 + rng.below(6);
    for (std::size_t part = 0; part < n_parts; ++part) {
      if (rng.below(2) == 0) {
        const std::size_t run = 1 + rng.below(5);
        for (std::size_t i = 0; i < run; ++i) {
          s.text_tokens.push_back(static_cast<pack::TokenId>(10 + i));
          s.labels.push_back(1);
        }
        n_text += run;
      } else {
        const double d = 0.05 + 0.1 * static_cast<double>(rng.below(40));
        s.text_tokens.push_back(kCfg.placeholder_id);
        s.labels.push_back(0);
        s.audio_durations_s.push_back(d);
        expected_audio += audio_token_count(d);
      }
    }
    if (s.text_tokens.empty()) {
      s.text_tokens.push_back(1);
      s.labels.push_back(1);
      n_text = 1;
    }
    const pack::ExpandedSample e = pack::expand_audio_tokens(s, kCfg);
    CHECK(e.size() == n_text + expected_audio);
    CHECK(e.labels.size() == e.size());
    CHECK(e.timeline.size() == e.size());
    CHECK_NOTHROW(e.timeline.validate());
  }
}

TEST_CASE("expansion validates its input") {
  SUBCASE("placeholder and duration counts must match") {
    pack::RawSample s = raw_text(3);
    s.audio_durations_s.push_back(1.0);  // duration without a placeholder
    CHECK_THROWS_AS(pack::expand_audio_tokens(s, kCfg), ValueError);
  }
  SUBCASE("durations must be positive") {
    pack::RawSample s = raw_with_clip(2, -1.0, 1);
    CHECK_THROWS_AS(pack::expand_audio_tokens(s, kCfg), ValueError);
  }
  SUBCASE("labels must align with the text") {
    pack::RawSample s = raw_text(3);
    s.labels.pop_back();
    CHECK_THROWS_AS(pack::expand_audio_tokens(s, kCfg), ValueError);
  }
  SUBCASE("empty samples are rejected") {
    CHECK_THROWS_AS(pack::expand_audio_tokens(pack::RawSample{}, kCfg), ValueError);
  }
  SUBCASE("raw text may not use the reserved audio token id") {
    pack::RawSample s = raw_text(2);
    s.text_tokens.push_back(kCfg.audio_token_id);
    s.labels.push_back(0);
    CHECK_THROWS_AS(pack::expand_audio_tokens(s, kCfg), ValueError);
  }
}

// ---------------------------------------------------------------------------
// Collation
// ---------------------------------------------------------------------------

std::vector<pack::ExpandedSample> expand_all(const std::vector<pack::RawSample>& raw) {
  std::vector<pack::ExpandedSample> out;
  for (const pack::RawSample& s : raw) out.push_back(pack::expand_audio_tokens(s, kCfg));
  return out;
}

TEST_CASE("padding reaches the longest sequence") {
  const auto batch = pack::collate(expand_all({raw_text(5), raw_text(3)}), 8, 1, kCfg);
  CHECK(batch.t == 5);
  CHECK(batch.truncations == 0);
  CHECK(batch.attention_mask[1] == std::vector<std::uint8_t>{1, 1, 1, 0, 0});
  CHECK(batch.token_ids[1][3] == kCfg.pad_id);
  CHECK(batch.labels[1][3] == kCfg.ignore_index);
  CHECK(batch.labels[1][4] == kCfg.ignore_index);
}

TEST_CASE("the context cap truncates from the right") {
  const auto batch = pack::collate(expand_all({raw_text(10), raw_text(3)}), 8, 1, kCfg);
  CHECK(batch.t == 8);
  CHECK(batch.truncations == 1);
  CHECK(batch.attention_mask[0] == std::vector<std::uint8_t>(8, 1));
  CHECK(batch.token_ids[0].back() == 8);  // ids 1..8 survive
}

TEST_CASE("the padded length rounds up to the pad multiple") {
  const auto batch = pack::collate(expand_all({raw_text(5), raw_text(3)}), 8, 4, kCfg);
  CHECK(batch.t == 8);
}

TEST_CASE("truncation backs up to the start of a straddled audio run") {
  // 4 text + 25 audio + 2 text = 31 tokens; a cut at 16 would split the
  // clip, so it lands at 4.
  const auto batch =
      pack::collate(expand_all({raw_with_clip(4, 1.0, 2), raw_text(3)}), 16, 1, kCfg);
  CHECK(batch.t == 16);
  CHECK(batch.truncations == 1);
  std::vector<std::uint8_t> want(16, 0);
  for (std::size_t i = 0; i < 4; ++i) want[i] = 1;
  CHECK(batch.attention_mask[0] == want);
  CHECK(batch.token_ids[0][4] == kCfg.pad_id);
  CHECK(batch.labels[0][4] == kCfg.ignore_index);
}

TEST_CASE("an expansion that cannot fit at all is rejected") {
  // 50 audio tokens lead the sequence; a 32-token context cannot keep any
  // prefix without splitting the clip.
  pack::RawSample s;
  s.id = "huge";
  s.text_tokens.push_back(kCfg.placeholder_id);
  s.labels.push_back(0);
  s.audio_durations_s.push_back(2.0);
  CHECK_THROWS_WITH_AS(pack::collate(expand_all({s}), 32, 1, kCfg),
                       "sample huge: leading audio run of 50 tokens exceeds the "
                       "32-token context",
                       ValueError);
}

TEST_CASE("mask/label duality and the length law hold on random batches") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<pack::RawSample> raw;
    const std::size_t n = 1 + rng.below(5);
    for (std::size_t i = 0; i < n; ++i) {
      if (rng.below(3) == 0) {
        raw.push_back(raw_with_clip(1 + rng.below(4), 0.1 + 0.04 * rng.below(10),
                                    rng.below(4), "r"));
      } else {
        raw.push_back(raw_text(1 + rng.below(30), "r"));
      }
    }
    const std::size_t pad_multiple = 1 + rng.below(4);
    const std::size_t max_ctx = pad_multiple * (2 + rng.below(8));
    const auto batch = pack::collate(expand_all(raw), max_ctx, pad_multiple, kCfg);

    CHECK(batch.t <= max_ctx);
    CHECK(batch.t % pad_multiple == 0);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(batch.token_ids[i].size() == batch.t);
      CHECK(batch.timelines[i].size() == batch.t);
      CHECK_NOTHROW(batch.timelines[i].validate());
      for (std::size_t j = 0; j < batch.t; ++j) {
        if (batch.attention_mask[i][j] == 0) {
          CHECK(batch.labels[i][j] == kCfg.ignore_index);
          CHECK(batch.token_ids[i][j] == kCfg.pad_id);
        }
      }
      // The mask is a 1-block followed by a 0-block (right padding only).
      for (std::size_t j = 1; j < batch.t; ++j) {
        CHECK(batch.attention_mask[i][j] <= batch.attention_mask[i][j - 1]);
      }
    }
  }
}

TEST_CASE("collate validates its arguments") {
  CHECK_THROWS_AS(pack::collate({}, 8, 1, kCfg), ValueError);
  const auto samples = expand_all({raw_text(3)});
  CHECK_THROWS_AS(pack::collate(samples, 0, 1, kCfg), ValueError);
  CHECK_THROWS_AS(pack::collate(samples, 8, 0, kCfg), ValueError);
  CHECK_THROWS_AS(pack::collate(samples, 10, 4, kCfg), ValueError);  // 10 % 4 != 0
}

// ---------------------------------------------------------------------------
// Manifest loading
// ---------------------------------------------------------------------------

TEST_CASE("manifests load with defaults applied") {
  const std::string path = temp_path("uspsim_manifest_ok.jsonl");
  {
    std::ofstream out(path);
    out << R"({"id":"a","text_tokens":[5,-1,6],"audio":[{"duration_s":0.5}],"labels":[5,0,6]})"
        << "\n";
    out << "\n";  // blank lines are skipped
    out << R"({"text_tokens":[7,8]})" << "\n";
  }
  const std::vector<pack::RawSample> samples = pack::load_manifest(path, kCfg);
  std::remove(path.c_str());

  REQUIRE(samples.size() == 2);
  CHECK(samples[0].id == "a");
  CHECK(samples[0].audio_durations_s == std::vector<double>{0.5});
  CHECK(samples[1].id == "sample-3");
  CHECK(samples[1].labels == samples[1].text_tokens);
  CHECK(samples[1].audio_durations_s.empty());
}

TEST_CASE("manifest errors carry the line number") {
  const std::string path = temp_path("uspsim_manifest_bad.jsonl");

  SUBCASE("missing file") {
    CHECK_THROWS_AS(pack::load_manifest(temp_path("uspsim_no_such.jsonl"), kCfg), IoError);
  }
  SUBCASE("malformed JSON") {
    std::ofstream(path) << "{not json\n";
    CHECK_THROWS_AS(pack::load_manifest(path, kCfg), ValueError);
  }
  SUBCASE("missing text tokens") {
    std::ofstream(path) << R"({"id":"x"})" << "\n";
    CHECK_THROWS_AS(pack::load_manifest(path, kCfg), ValueError);
  }
  SUBCASE("invalid sample content") {
    std::ofstream(path) << R"({"text_tokens":[-1],"audio":[{"duration_s":-2.0}]})" << "\n";
    CHECK_THROWS_AS(pack::load_manifest(path, kCfg), ValueError);
  }
  std::remove(path.c_str());
}

}  // namespace
