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
#include <cstdint>
#include <vector>

#include "uspsim/matrix.hpp"
#include "uspsim/rote.hpp"

namespace uspsim {

// Frontend constants. 16 kHz input, 25 ms / 10 ms Hann STFT, 128 HTK mel
// filters over 0-8000 Hz, natural-log compression with a 1e-10 power floor,
// 30-second chunking, and the 100 Hz -> 50 Hz -> 25 Hz token pipeline.
inline constexpr std::size_t kSampleRate = 16000;
inline constexpr std::size_t kWinSamples = 400;   // 25 ms
inline constexpr std::size_t kHopSamples = 160;   // 10 ms
inline constexpr std::size_t kNumMels = 128;
inline constexpr double kMelFmin = 0.0;
inline constexpr double kMelFmax = 8000.0;
inline constexpr double kMelFloor = 1e-10;
inline constexpr double kChunkSeconds = 30.0;
inline constexpr std::size_t kEncoderDim = 1280;
inline constexpr double kAudioTokensPerSecond = 25.0;

struct AudioClip {
  std::vector<double> samples;
  std::size_t sample_rate = kSampleRate;

  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
  void validate() const;  // 16 kHz only, non-empty, finite
};

struct MelSpectrogram {
  std::size_t n_mels = kNumMels;
  std::size_t n_frames = 0;
  MatD values;               // n_mels x n_frames, log power
  double frame_rate = 100.0;

  void validate() const;
};

struct EncoderFeatures {
  std::size_t n_tokens = 0;
  std::size_t dim = 0;
  MatD values;               // n_tokens x dim
  double feature_rate = 0.0;  // 50 Hz from the encoder, 25 Hz after pooling
  TokenTimeline timestamps;

  void validate() const;
};

struct AdaptedTokens {
  std::size_t n_tokens = 0;
  std::size_t dim = 0;        // LLM embedding width
  MatD values;
  TokenTimeline timestamps;
};

/// 2-layer MLP adaptor weights (in -> hidden -> out with GELU between).
struct AdaptorWeights {
  MatD w1;                    // in x hidden
  std::vector<double> b1;     // hidden
  MatD w2;                    // hidden x out
  std::vector<double> b2;     // out
};

/// Number of STFT frames under center-padded framing: ceil(n_samples / hop).
/// Exactly 100 frames per second of 16 kHz audio for integral-second inputs.
std::size_t frame_count(std::size_t n_samples, std::size_t win = kWinSamples,
                        std::size_t hop = kHopSamples);

/// 128-channel log mel-spectrogram: Hann-window STFT (400-point window, 160
/// hop, center reflect padding), power spectrum, triangular HTK-scale mel
/// filters over 0-8000 Hz, natural log floored at max(p, 1e-10).
/// Clips longer than 30 s must be chunked first.
MelSpectrogram log_mel(const AudioClip& clip);

/// Splits a duration into greedy non-overlapping 30 s chunks; the final chunk
/// is the (unpadded) remainder. The chunk durations sum to duration_s exactly.
std::vector<double> chunk_audio(double duration_s);

/// Deterministic, seedable stand-in for the trained audio encoder: averages
/// frame pairs (100 Hz -> 50 Hz; odd trailing frame passes through) and
/// projects 128 -> dim with a fixed seeded zero-bias linear map. Output
/// timestamps sit at a 20 ms stride starting at 0.
EncoderFeatures encode_stub(const MelSpectrogram& mel, std::size_t dim = kEncoderDim,
                            std::uint64_t seed = 0);

/// Non-overlapping average pooling of consecutive token pairs (50 Hz -> 25 Hz,
/// the 40 ms stride); an odd trailing token is kept as its own output.
/// Timestamps are the pooled pairs' start times.
EncoderFeatures pool_stride2(const EncoderFeatures& f);

/// Post-pooling token count for a clip: ceil(duration_s * 25), the number of
/// positions kept by the duration-based embedding mask.
std::size_t audio_token_count(double duration_s);

/// Seeded random 2-layer adaptor weights (zero biases).
AdaptorWeights make_adaptor_weights(std::size_t in_dim, std::size_t hidden_dim,
                                    std::size_t out_dim, std::uint64_t seed = 0);

/// Applies the 2-layer MLP adaptor row-wise; token count and timestamps are
/// carried through unchanged.
AdaptedTokens project_to_llm(const EncoderFeatures& f, const AdaptorWeights& w);

/// Mel filterbank used by log_mel, exposed so tests can locate filter centers:
/// kNumMels x (n_fft/2 + 1) triangle weights over FFT bin frequencies.
MatD mel_filterbank(std::size_t n_fft);

/// Center frequencies (Hz) of the 128 triangular filters.
std::vector<double> mel_filter_centers_hz();

}  // namespace uspsim
