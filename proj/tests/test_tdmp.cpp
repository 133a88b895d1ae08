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

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <doctest.h>

#include "uspsim/matrix.hpp"
#include "uspsim/tdmp.hpp"
#include "uspsim/wav.hpp"

namespace {

using uspsim::IoError;
using uspsim::MatD;
using uspsim::Rng;

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST_CASE("tdmp: tensor round trip preserves dims and values") {
  const std::string path = temp_path("uspsim_tdmp_rt.tdmp");
  uspsim::tdmp::Tensor t;
  t.dims = {2, 3, 4};
  t.values.resize(24);
  for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = 0.5 * static_cast<double>(i);

  uspsim::tdmp::write(path, t);
  const uspsim::tdmp::Tensor back = uspsim::tdmp::read(path);
  CHECK(back.dims == t.dims);
  CHECK(back.values == t.values);
  std::remove(path.c_str());
}

TEST_CASE("tdmp: exact byte layout of a tiny dump") {
  const std::string path = temp_path("uspsim_tdmp_layout.tdmp");
  uspsim::tdmp::Tensor t;
  t.dims = {1, 2};
  t.values = {1.0, -2.0};
  uspsim::tdmp::write(path, t);

  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  // magic + u32 rank + 2 x u64 dims + 2 x f64 payload
  REQUIRE(bytes.size() == 4 + 4 + 16 + 16);
  CHECK(bytes.substr(0, 4) == "TDMP");
  CHECK(static_cast<unsigned char>(bytes[4]) == 2);  // rank, little-endian u32
  CHECK(bytes[5] == 0);
  CHECK(static_cast<unsigned char>(bytes[8]) == 1);   // dims[0] = 1
  CHECK(static_cast<unsigned char>(bytes[16]) == 2);  // dims[1] = 2
  // 1.0 in IEEE 754 LE is 00 00 00 00 00 00 F0 3F.
  CHECK(static_cast<unsigned char>(bytes[30]) == 0xF0);
  CHECK(static_cast<unsigned char>(bytes[31]) == 0x3F);
  std::remove(path.c_str());
}

TEST_CASE("tdmp: matrix round trip") {
  const std::string path = temp_path("uspsim_tdmp_mat.tdmp");
  Rng rng(3);
  const MatD m = MatD::random_normal(5, 7, rng);
  uspsim::tdmp::write_matrix(path, m);
  const MatD back = uspsim::tdmp::read_matrix(path);
  CHECK(back == m);
  std::remove(path.c_str());
}

TEST_CASE("tdmp: corrupted magic rejected") {
  const std::string path = temp_path("uspsim_tdmp_bad.tdmp");
  std::ofstream(path, std::ios::binary) << "XDMPgarbage";
  CHECK_THROWS_AS(uspsim::tdmp::read(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("tdmp: truncated payload rejected") {
  const std::string path = temp_path("uspsim_tdmp_trunc.tdmp");
  uspsim::tdmp::Tensor t;
  t.dims = {4};
  t.values = {1.0, 2.0, 3.0, 4.0};
  uspsim::tdmp::write(path, t);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  CHECK_THROWS_AS(uspsim::tdmp::read(path), IoError);
  std::remove(path.c_str());
}

TEST_CASE("wav: pcm16 round trip within quantization error") {
  const std::string path = temp_path("uspsim_wav_pcm16.wav");
  std::vector<double> samples(320);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i] = 0.75 * std::sin(0.02 * static_cast<double>(i));
  }
  uspsim::wav::write(path, samples, 16000, uspsim::wav::SampleFormat::pcm16);
  const uspsim::wav::WavData back = uspsim::wav::read(path);
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(std::abs(back.samples[i] - samples[i]) < 1.0 / 32768.0);
  }
  std::remove(path.c_str());
}

TEST_CASE("wav: float32 round trip is bit-faithful at float precision") {
  const std::string path = temp_path("uspsim_wav_f32.wav");
  std::vector<double> samples{0.0, 0.25, -0.5, 1.0, -1.0};
  uspsim::wav::write(path, samples, 16000, uspsim::wav::SampleFormat::float32);
  const uspsim::wav::WavData back = uspsim::wav::read(path);
  REQUIRE(back.samples.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back.samples[i] == doctest::Approx(samples[i]).epsilon(1e-7));
  }
  std::remove(path.c_str());
}

TEST_CASE("wav: garbage file rejected") {
  const std::string path = temp_path("uspsim_wav_bad.wav");
  std::ofstream(path, std::ios::binary) << "not a wav file at all";
  CHECK_THROWS_AS(uspsim::wav::read(path), IoError);
  std::remove(path.c_str());
}

}  // namespace
