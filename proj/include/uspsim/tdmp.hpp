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

#include <cstdint>
#include <string>
#include <vector>

#include "uspsim/matrix.hpp"

namespace uspsim::tdmp {

/// One tensor in the TDMP dump format:
///   magic "TDMP" | u32 LE rank | rank x u64 LE dims | f64 LE payload, row-major
struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;

  std::uint64_t element_count() const;
};

void write(const std::string& path, const Tensor& t);
Tensor read(const std::string& path);

/// Convenience wrappers for 2-D dumps.
void write_matrix(const std::string& path, const MatD& m);
MatD read_matrix(const std::string& path);

}  // namespace uspsim::tdmp
