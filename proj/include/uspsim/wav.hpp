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

#include <string>
#include <vector>

namespace uspsim::wav {

enum class SampleFormat { pcm16, float32 };

struct WavData {
  std::vector<double> samples;  // mono, amplitude in [-1, 1] for pcm16
  int sample_rate = 0;
};

/// Reads a mono RIFF/WAVE file. Supported encodings: PCM16 and IEEE float32.
WavData read(const std::string& path);

void write(const std::string& path, const std::vector<double>& samples, int sample_rate,
           SampleFormat format = SampleFormat::pcm16);

}  // namespace uspsim::wav
