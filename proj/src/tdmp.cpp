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

#include "uspsim/tdmp.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "uspsim/error.hpp"

namespace uspsim::tdmp {

static_assert(std::endian::native == std::endian::little,
              "TDMP I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw IoError("TDMP: truncated file " + path);
  return value;
}

}  // namespace

std::uint64_t Tensor::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void write(const std::string& path, const Tensor& t) {
  if (t.dims.empty()) throw ValueError("TDMP: rank must be >= 1");
  if (t.element_count() != t.values.size())
    throw ShapeError("TDMP: dims do not match payload size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("TDMP: cannot open for write: " + path);
  out.write("TDMP", 4);
  put(out, static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) put(out, d);
  out.write(reinterpret_cast<const char*>(t.values.data()),
            static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  if (!out) throw IoError("TDMP: write failed: " + path);
}

Tensor read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("TDMP: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "TDMP", 4) != 0) throw IoError("TDMP: bad magic in " + path);
  const auto rank = take<std::uint32_t>(in, path);
  if (rank == 0 || rank > 8) throw IoError("TDMP: unreasonable rank in " + path);
  Tensor t;
  t.dims.reserve(rank);
  for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(take<std::uint64_t>(in, path));
  const std::uint64_t n = t.element_count();
  t.values.resize(n);
  in.read(reinterpret_cast<char*>(t.values.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("TDMP: truncated payload in " + path);
  return t;
}

void write_matrix(const std::string& path, const MatD& m) {
  Tensor t;
  t.dims = {m.rows(), m.cols()};
  t.values = m.data();
  write(path, t);
}

MatD read_matrix(const std::string& path) {
  Tensor t = read(path);
  if (t.dims.size() != 2) throw IoError("TDMP: expected rank-2 tensor in " + path);
  return MatD(t.dims[0], t.dims[1], std::move(t.values));
}

}  // namespace uspsim::tdmp
