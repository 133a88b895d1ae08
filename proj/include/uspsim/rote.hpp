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

#include <cstddef>
#include <vector>

#include "uspsim/matrix.hpp"

namespace uspsim {

/// Audio tokens arrive at a fixed 40 ms stride (25 tokens per second).
inline constexpr double kAudioTokenStrideSeconds = 0.04;

/// Rotary time embedding parameters. Rotation angles are driven by each
/// token's absolute timestamp (seconds) instead of its index:
///   theta_{i,j} = -angle_scale * tau_i * omega_j,  omega_j = base^(-2j/head_dim)
struct RoteConfig {
  std::size_t head_dim = 0;       // must be even
  double base = 10000.0;          // must be > 1
  double angle_scale = 6.283185307179586476925286766559;  // 2*pi

  void validate() const;
};

/// Per-token absolute timestamps tau_i in seconds.
struct TokenTimeline {
  std::vector<double> taus;

  std::size_t size() const { return taus.size(); }
  void validate() const;  // non-negative, non-decreasing, finite

  TokenTimeline slice(std::size_t begin, std::size_t end) const;
  TokenTimeline shifted(double delta) const;
};

/// Inverse frequencies omega_j = base^(-2j/head_dim), j = 0..head_dim/2-1.
std::vector<double> inv_frequencies(const RoteConfig& cfg);

/// Rotates one row in place by the angles for timestamp tau. Accepts any
/// finite tau (negative values express relative rotations).
template <typename T>
void rotate_row(std::span<T> row, double tau, const RoteConfig& cfg,
                std::span<const double> omegas);

/// Applies the RoTE planar rotation to every row of x; row i uses
/// timeline.taus[i]. x.cols must equal cfg.head_dim.
template <typename T>
Mat<T> rotate(const Mat<T>& x, const TokenTimeline& timeline, const RoteConfig& cfg);

/// Single-row rotation against a raw timestamp (relative-rotation checks).
template <typename T>
std::vector<T> rotate_single(std::span<const T> row, double tau, const RoteConfig& cfg);

/// A stretch of tokens from one modality. Audio segments are described by
/// their clip duration; text segments by their token count.
struct TimelineSegment {
  enum class Kind { text, audio };
  Kind kind = Kind::text;
  std::size_t n_tokens = 0;   // text only
  double duration_s = 0.0;    // audio only

  static TimelineSegment text(std::size_t n_tokens);
  static TimelineSegment audio(double duration_s);
};

/// Builds the timeline for an interleaved audio/text sequence. Audio tokens
/// advance the clock by the 40 ms stride; text tokens advance it by
/// virtual_stride. Every token is stamped with the clock value at its start.
TokenTimeline build_timeline(const std::vector<TimelineSegment>& segments,
                             double virtual_stride = kAudioTokenStrideSeconds);

}  // namespace uspsim
