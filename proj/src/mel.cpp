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

#include "uspsim/mel.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "uspsim/error.hpp"
#include "uspsim/rng.hpp"

namespace uspsim {

namespace {

constexpr std::size_t kNfft = 512;  // next power of two >= the 400-sample window

/// In-place iterative radix-2 FFT; n must be a power of two.
void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
  const std::size_t n = re.size();
  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const double wr = std::cos(ang);
    const double wi = std::sin(ang);
    for (std::size_t i = 0; i < n; i += len) {
      double cr = 1.0;
      double ci = 0.0;
      for (std::size_t k = 0; k < len / 2; ++k) {
        const double ur = re[i + k];
        const double ui = im[i + k];
        const double vr = re[i + k + len / 2] * cr - im[i + k + len / 2] * ci;
        const double vi = re[i + k + len / 2] * ci + im[i + k + len / 2] * cr;
        re[i + k] = ur + vr;
        im[i + k] = ui + vi;
        re[i + k + len / 2] = ur - vr;
        im[i + k + len / 2] = ui - vi;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

/// Reflection index (edge sample excluded): x[-1] -> x[1], x[n] -> x[n-2].
std::size_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  std::ptrdiff_t j = ((i % period) + period) % period;
  if (j >= n) j = period - j;
  return static_cast<std::size_t>(j);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// The 130 band edge frequencies (Hz): filter k spans edges [k, k+2] with its
/// peak at edge k+1, equally spaced on the HTK mel scale over 0-8000 Hz.
std::vector<double> mel_band_edges_hz() {
  const double mel_lo = hz_to_mel(kMelFmin);
  const double mel_hi = hz_to_mel(kMelFmax);
  std::vector<double> edges(kNumMels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(kNumMels + 1);
    edges[i] = mel_to_hz(mel_lo + frac * (mel_hi - mel_lo));
  }
  return edges;
}

}  // namespace

void AudioClip::validate() const {
  if (sample_rate != kSampleRate) {
    throw ValueError(fmt::format("unsupported sample rate {} Hz (only {} Hz accepted)",
                                 sample_rate, kSampleRate));
  }
  if (samples.empty()) {
    throw ValueError("audio clip is empty");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!std::isfinite(samples[i])) {
      throw ValueError(fmt::format("sample {} is non-finite", i));
    }
  }
}

void MelSpectrogram::validate() const {
  if (n_mels != kNumMels) {
    throw ValueError(fmt::format("expected {} mel channels, got {}", kNumMels, n_mels));
  }
  if (frame_rate != 100.0) {
    throw ValueError(fmt::format("expected 100 Hz frame rate, got {}", frame_rate));
  }
  if (values.rows() != n_mels || values.cols() != n_frames) {
    throw ShapeError(fmt::format("mel values are {}x{} but expected {}x{}", values.rows(),
                                 values.cols(), n_mels, n_frames));
  }
  if (!values.all_finite()) {
    throw ValueError("mel spectrogram contains non-finite values");
  }
}

void EncoderFeatures::validate() const {
  if (values.rows() != n_tokens || values.cols() != dim) {
    throw ShapeError(fmt::format("feature values are {}x{} but expected {}x{}", values.rows(),
                                 values.cols(), n_tokens, dim));
  }
  if (feature_rate != 50.0 && feature_rate != 25.0) {
    throw ValueError(fmt::format("feature rate must be 50 or 25 Hz, got {}", feature_rate));
  }
  if (timestamps.size() != n_tokens) {
    throw ShapeError(fmt::format("{} tokens but {} timestamps", n_tokens, timestamps.size()));
  }
  timestamps.validate();
  for (std::size_t i = 1; i < timestamps.size(); ++i) {
    if (!(timestamps.taus[i] > timestamps.taus[i - 1])) {
      throw ValueError(fmt::format("feature timestamps must be strictly increasing at {}", i));
    }
  }
}

std::size_t frame_count(std::size_t n_samples, std::size_t win, std::size_t hop) {
  if (n_samples == 0) {
    throw ValueError("frame_count: empty audio");
  }
  if (win == 0 || hop == 0) {
    throw ValueError(fmt::format("frame_count: win {} and hop {} must be positive", win, hop));
  }
  return (n_samples + hop - 1) / hop;
}

MatD mel_filterbank(std::size_t n_fft) {
  const std::size_t n_bins = n_fft / 2 + 1;
  const std::vector<double> edges = mel_band_edges_hz();
  MatD fb(kNumMels, n_bins);
  for (std::size_t m = 0; m < kNumMels; ++m) {
    const double left = edges[m];
    const double center = edges[m + 1];
    const double right = edges[m + 2];
    for (std::size_t b = 0; b < n_bins; ++b) {
      const double hz =
          static_cast<double>(b) * static_cast<double>(kSampleRate) / static_cast<double>(n_fft);
      double w = 0.0;
      if (hz > left && hz < right) {
        w = hz <= center ? (hz - left) / (center - left) : (right - hz) / (right - center);
      }
      fb.at(m, b) = w;
    }
  }
  return fb;
}

std::vector<double> mel_filter_centers_hz() {
  const std::vector<double> edges = mel_band_edges_hz();
  return std::vector<double>(edges.begin() + 1, edges.end() - 1);
}

MelSpectrogram log_mel(const AudioClip& clip) {
  clip.validate();
  const std::size_t max_samples = static_cast<std::size_t>(kChunkSeconds) * kSampleRate;
  if (clip.samples.size() > max_samples) {
    throw ValueError(fmt::format("clip is {:.3f} s; chunk audio longer than {} s first",
                                 clip.duration_s(), kChunkSeconds));
  }
  const std::size_t n = clip.samples.size();
  const std::size_t n_frames = frame_count(n);
  const std::size_t pad = kWinSamples / 2;

  // Center padding by reflection.
  std::vector<double> padded(n + 2 * pad);
  for (std::size_t i = 0; i < padded.size(); ++i) {
    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(pad);
    padded[i] = clip.samples[reflect_index(src, static_cast<std::ptrdiff_t>(n))];
  }

  // Periodic Hann window.
  std::vector<double> window(kWinSamples);
  for (std::size_t i = 0; i < kWinSamples; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                     static_cast<double>(kWinSamples));
  }

  const MatD fb = mel_filterbank(kNfft);
  const std::size_t n_bins = kNfft / 2 + 1;

  MelSpectrogram out;
  out.n_frames = n_frames;
  out.values = MatD(kNumMels, n_frames);

  std::vector<double> re(kNfft), im(kNfft), power(n_bins);
  for (std::size_t t = 0; t < n_frames; ++t) {
    const std::size_t start = t * kHopSamples;
    for (std::size_t i = 0; i < kNfft; ++i) {
      re[i] = i < kWinSamples ? padded[start + i] * window[i] : 0.0;
      im[i] = 0.0;
    }
    fft_radix2(re, im);
    for (std::size_t b = 0; b < n_bins; ++b) {
      power[b] = re[b] * re[b] + im[b] * im[b];
    }
    for (std::size_t m = 0; m < kNumMels; ++m) {
      double acc = 0.0;
      const std::span<const double> weights = fb.row(m);
      for (std::size_t b = 0; b < n_bins; ++b) acc += weights[b] * power[b];
      out.values.at(m, t) = std::log(std::max(acc, kMelFloor));
    }
  }
  return out;
}

std::vector<double> chunk_audio(double duration_s) {
  if (!(duration_s > 0.0) || !std::isfinite(duration_s)) {
    throw ValueError(fmt::format("duration must be positive and finite, got {}", duration_s));
  }
  if (duration_s > 1e9) {
    throw ValueError(fmt::format("duration {} s is implausibly large", duration_s));
  }
  std::vector<double> chunks;
  auto full = static_cast<std::size_t>(duration_s / kChunkSeconds);
  // Exact multiples produce no trailing remainder chunk.
  double remainder = duration_s - kChunkSeconds * static_cast<double>(full);
  if (remainder == 0.0 && full > 0) {
    remainder = kChunkSeconds;
    --full;
  }
  chunks.assign(full, kChunkSeconds);
  chunks.push_back(remainder);
  return chunks;
}

EncoderFeatures encode_stub(const MelSpectrogram& mel, std::size_t dim, std::uint64_t seed) {
  mel.validate();
  if (dim == 0) {
    throw ValueError("encoder dim must be positive");
  }
  const std::size_t n_frames = mel.n_frames;
  const std::size_t n_tokens = (n_frames + 1) / 2;

  // Average frame pairs: 100 Hz -> 50 Hz, odd trailing frame passes through.
  MatD pooled(n_tokens, kNumMels);
  for (std::size_t t = 0; t < n_tokens; ++t) {
    const bool has_pair = 2 * t + 1 < n_frames;
    for (std::size_t m = 0; m < kNumMels; ++m) {
      const double a = mel.values.at(m, 2 * t);
      pooled.at(t, m) = has_pair ? 0.5 * (a + mel.values.at(m, 2 * t + 1)) : a;
    }
  }

  // Fixed seeded zero-bias projection 128 -> dim.
  Rng rng(seed);
  MatD proj = MatD::random_normal(kNumMels, dim, rng);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kNumMels));
  for (double& v : proj.data()) v *= scale;

  EncoderFeatures out;
  out.n_tokens = n_tokens;
  out.dim = dim;
  out.values = matmul(pooled, proj);
  out.feature_rate = 50.0;
  out.timestamps.taus.resize(n_tokens);
  for (std::size_t t = 0; t < n_tokens; ++t) {
    out.timestamps.taus[t] = static_cast<double>(t) * 0.02;
  }
  out.validate();
  return out;
}

EncoderFeatures pool_stride2(const EncoderFeatures& f) {
  f.validate();
  if (f.feature_rate != 50.0) {
    throw ValueError(fmt::format("pool_stride2 expects 50 Hz features, got {} Hz", f.feature_rate));
  }
  const std::size_t n_out = (f.n_tokens + 1) / 2;
  EncoderFeatures out;
  out.n_tokens = n_out;
  out.dim = f.dim;
  out.values = MatD(n_out, f.dim);
  out.feature_rate = 25.0;
  out.timestamps.taus.resize(n_out);
  for (std::size_t t = 0; t < n_out; ++t) {
    const bool has_pair = 2 * t + 1 < f.n_tokens;
    for (std::size_t c = 0; c < f.dim; ++c) {
      const double a = f.values.at(2 * t, c);
      out.values.at(t, c) = has_pair ? 0.5 * (a + f.values.at(2 * t + 1, c)) : a;
    }
    out.timestamps.taus[t] = f.timestamps.taus[2 * t];
  }
  out.validate();
  return out;
}

std::size_t audio_token_count(double duration_s) {
  if (!(duration_s > 0.0) || !std::isfinite(duration_s)) {
    throw ValueError(fmt::format("duration must be positive and finite, got {}", duration_s));
  }
  // ceil(25*d); the epsilon absorbs representation noise when 25*d should be
  // an exact integer (e.g. d = 0.04 stored as 0.04000000000000000083).
  const double scaled = duration_s * kAudioTokensPerSecond;
  const double count = std::ceil(scaled - 1e-9);
  return count < 1.0 ? 1 : static_cast<std::size_t>(count);
}

AdaptorWeights make_adaptor_weights(std::size_t in_dim, std::size_t hidden_dim,
                                    std::size_t out_dim, std::uint64_t seed) {
  if (in_dim == 0 || hidden_dim == 0 || out_dim == 0) {
    throw ValueError(fmt::format("adaptor dims must be positive, got {}x{}x{}", in_dim,
                                 hidden_dim, out_dim));
  }
  Rng rng(seed);
  AdaptorWeights w;
  w.w1 = MatD::random_normal(in_dim, hidden_dim, rng);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(in_dim));
  for (double& v : w.w1.data()) v *= s1;
  w.b1.assign(hidden_dim, 0.0);
  w.w2 = MatD::random_normal(hidden_dim, out_dim, rng);
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  for (double& v : w.w2.data()) v *= s2;
  w.b2.assign(out_dim, 0.0);
  return w;
}

AdaptedTokens project_to_llm(const EncoderFeatures& f, const AdaptorWeights& w) {
  f.validate();
  if (w.w1.rows() != f.dim) {
    throw ShapeError(fmt::format("adaptor expects {} input features, got {}", w.w1.rows(), f.dim));
  }
  AdaptedTokens out;
  out.values = mlp2(f.values, w.w1, w.b1, w.w2, w.b2);
  out.n_tokens = f.n_tokens;
  out.dim = out.values.cols();
  out.timestamps = f.timestamps;
  return out;
}

}  // namespace uspsim
