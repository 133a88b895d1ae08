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

#include "uspsim/rote.hpp"

#include <cmath>

#include <fmt/format.h>

#include "uspsim/error.hpp"
#include "uspsim/mel.hpp"

namespace uspsim {

void RoteConfig::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw ValueError(fmt::format("head_dim must be positive and even, got {}", head_dim));
  }
  if (!(base > 1.0)) {
    throw ValueError(fmt::format("base must be > 1, got {}", base));
  }
  if (!std::isfinite(angle_scale) || angle_scale == 0.0) {
    throw ValueError(fmt::format("angle_scale must be finite and non-zero, got {}", angle_scale));
  }
}

void TokenTimeline::validate() const {
  for (std::size_t i = 0; i < taus.size(); ++i) {
    if (!std::isfinite(taus[i]) || taus[i] < 0.0) {
      throw ValueError(fmt::format("timestamp {} is invalid: {}", i, taus[i]));
    }
    if (i > 0 && taus[i] < taus[i - 1]) {
      throw ValueError(fmt::format("timestamps must be non-decreasing, but tau[{}]={} < tau[{}]={}",
                                   i, taus[i], i - 1, taus[i - 1]));
    }
  }
}

TokenTimeline TokenTimeline::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > taus.size()) {
    throw ValueError(fmt::format("bad timeline slice [{}, {}) of {}", begin, end, taus.size()));
  }
  return TokenTimeline{std::vector<double>(taus.begin() + static_cast<std::ptrdiff_t>(begin),
                                           taus.begin() + static_cast<std::ptrdiff_t>(end))};
}

TokenTimeline TokenTimeline::shifted(double delta) const {
  TokenTimeline out = *this;
  for (double& t : out.taus) t += delta;
  return out;
}

std::vector<double> inv_frequencies(const RoteConfig& cfg) {
  cfg.validate();
  const std::size_t half = cfg.head_dim / 2;
  std::vector<double> omegas(half);
  for (std::size_t j = 0; j < half; ++j) {
    omegas[j] = std::pow(cfg.base, -2.0 * static_cast<double>(j) / static_cast<double>(cfg.head_dim));
  }
  return omegas;
}

template <typename T>
void rotate_row(std::span<T> row, double tau, const RoteConfig& cfg,
                std::span<const double> omegas) {
  if (row.size() != cfg.head_dim || omegas.size() != cfg.head_dim / 2) {
    throw ShapeError(fmt::format("rotate_row: row has {} values, omegas {}, head_dim {}",
                                 row.size(), omegas.size(), cfg.head_dim));
  }
  if (!std::isfinite(tau)) {
    throw ValueError(fmt::format("rotate_row: non-finite timestamp {}", tau));
  }
  for (std::size_t j = 0; j < omegas.size(); ++j) {
    const double theta = -cfg.angle_scale * tau * omegas[j];
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double x = static_cast<double>(row[2 * j]);
    const double y = static_cast<double>(row[2 * j + 1]);
    row[2 * j] = static_cast<T>(x * c - y * s);
    row[2 * j + 1] = static_cast<T>(x * s + y * c);
  }
}

template <typename T>
Mat<T> rotate(const Mat<T>& x, const TokenTimeline& timeline, const RoteConfig& cfg) {
  cfg.validate();
  timeline.validate();
  if (x.cols() != cfg.head_dim) {
    throw ShapeError(fmt::format("rotate: input has {} columns but head_dim is {}", x.cols(), cfg.head_dim));
  }
  if (x.rows() != timeline.size()) {
    throw ShapeError(fmt::format("rotate: {} rows but {} timestamps", x.rows(), timeline.size()));
  }
  const std::vector<double> omegas = inv_frequencies(cfg);
  Mat<T> out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    rotate_row<T>(out.row(i), timeline.taus[i], cfg, omegas);
  }
  return out;
}

template <typename T>
std::vector<T> rotate_single(std::span<const T> row, double tau, const RoteConfig& cfg) {
  cfg.validate();
  std::vector<T> out(row.begin(), row.end());
  const std::vector<double> omegas = inv_frequencies(cfg);
  rotate_row<T>(std::span<T>(out), tau, cfg, omegas);
  return out;
}

TimelineSegment TimelineSegment::text(std::size_t n_tokens) {
  TimelineSegment seg;
  seg.kind = Kind::text;
  seg.n_tokens = n_tokens;
  return seg;
}

TimelineSegment TimelineSegment::audio(double duration_s) {
  TimelineSegment seg;
  seg.kind = Kind::audio;
  seg.duration_s = duration_s;
  return seg;
}

TokenTimeline build_timeline(const std::vector<TimelineSegment>& segments, double virtual_stride) {
  if (segments.empty()) {
    throw ValueError("build_timeline: segment list is empty");
  }
  if (!(virtual_stride > 0.0) || !std::isfinite(virtual_stride)) {
    throw ValueError(fmt::format("virtual_stride must be positive and finite, got {}", virtual_stride));
  }
  TokenTimeline timeline;
  double clock = 0.0;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const TimelineSegment& seg = segments[s];
    if (seg.kind == TimelineSegment::Kind::audio) {
      if (!(seg.duration_s > 0.0) || !std::isfinite(seg.duration_s)) {
        throw ValueError(fmt::format("segment {}: audio duration must be positive, got {}", s, seg.duration_s));
      }
      const std::size_t n = audio_token_count(seg.duration_s);
      for (std::size_t k = 0; k < n; ++k) {
        timeline.taus.push_back(clock + static_cast<double>(k) * kAudioTokenStrideSeconds);
      }
      clock += static_cast<double>(n) * kAudioTokenStrideSeconds;
    } else {
      for (std::size_t k = 0; k < seg.n_tokens; ++k) {
        timeline.taus.push_back(clock + static_cast<double>(k) * virtual_stride);
      }
      clock += static_cast<double>(seg.n_tokens) * virtual_stride;
    }
  }
  return timeline;
}

template void rotate_row<float>(std::span<float>, double, const RoteConfig&, std::span<const double>);
template void rotate_row<double>(std::span<double>, double, const RoteConfig&, std::span<const double>);
template Mat<float> rotate<float>(const Mat<float>&, const TokenTimeline&, const RoteConfig&);
template Mat<double> rotate<double>(const Mat<double>&, const TokenTimeline&, const RoteConfig&);
template std::vector<float> rotate_single<float>(std::span<const float>, double, const RoteConfig&);
template std::vector<double> rotate_single<double>(std::span<const double>, double, const RoteConfig&);

}  // namespace uspsim
