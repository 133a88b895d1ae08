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

#include "uspsim/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "uspsim/error.hpp"

namespace uspsim::wav {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatIeeeFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

template <typename T>
T take(std::ifstream& in, const std::string& path) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("WAV: truncated file " + path);
  return value;
}

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

}  // namespace

WavData read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("WAV: cannot open: " + path);

  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0) throw IoError("WAV: not a RIFF file: " + path);
  take<std::uint32_t>(in, path);  // riff size
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0) throw IoError("WAV: not a WAVE file: " + path);

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  WavData out;

  while (in.read(tag, 4)) {
    const auto chunk_size = take<std::uint32_t>(in, path);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = take<std::uint16_t>(in, path);
      channels = take<std::uint16_t>(in, path);
      rate = take<std::uint32_t>(in, path);
      take<std::uint32_t>(in, path);  // byte rate
      take<std::uint16_t>(in, path);  // block align
      bits = take<std::uint16_t>(in, path);
      if (chunk_size > 16) in.seekg(chunk_size - 16, std::ios::cur);
      if (format == kFormatExtensible)
        throw IoError("WAV: WAVE_FORMAT_EXTENSIBLE not supported: " + path);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw IoError("WAV: data chunk before fmt chunk: " + path);
      if (channels != 1) throw IoError("WAV: only mono input supported: " + path);
      if (format == kFormatPcm && bits == 16) {
        const std::size_t n = chunk_size / 2;
        out.samples.resize(n);
        for (std::size_t i = 0; i < n; ++i)
          out.samples[i] = static_cast<double>(take<std::int16_t>(in, path)) / 32768.0;
      } else if (format == kFormatIeeeFloat && bits == 32) {
        const std::size_t n = chunk_size / 4;
        out.samples.resize(n);
        for (std::size_t i = 0; i < n; ++i)
          out.samples[i] = static_cast<double>(take<float>(in, path));
      } else {
        throw IoError("WAV: unsupported encoding (need PCM16 or float32): " + path);
      }
      out.sample_rate = static_cast<int>(rate);
      return out;
    } else {
      // skip unknown chunk (word aligned)
      in.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
    }
  }
  throw IoError("WAV: no data chunk found: " + path);
}

void write(const std::string& path, const std::vector<double>& samples, int sample_rate,
           SampleFormat fmt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("WAV: cannot open for write: " + path);

  const std::uint16_t bits = fmt == SampleFormat::pcm16 ? 16 : 32;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * bits / 8);
  const std::uint32_t byte_rate = static_cast<std::uint32_t>(sample_rate) * bits / 8;

  out.write("RIFF", 4);
  put<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put<std::uint32_t>(out, 16);
  put<std::uint16_t>(out, fmt == SampleFormat::pcm16 ? kFormatPcm : kFormatIeeeFloat);
  put<std::uint16_t>(out, 1);  // mono
  put<std::uint32_t>(out, static_cast<std::uint32_t>(sample_rate));
  put<std::uint32_t>(out, byte_rate);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(bits / 8));
  put<std::uint16_t>(out, bits);
  out.write("data", 4);
  put<std::uint32_t>(out, data_bytes);

  if (fmt == SampleFormat::pcm16) {
    // Symmetric with the reader's /32768 so a round trip only quantizes.
    for (double s : samples) {
      const long q = std::lrint(std::clamp(s, -1.0, 1.0) * 32768.0);
      put<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L)));
    }
  } else {
    for (double s : samples) put<float>(out, static_cast<float>(s));
  }
  if (!out) throw IoError("WAV: write failed: " + path);
}

}  // namespace uspsim::wav
