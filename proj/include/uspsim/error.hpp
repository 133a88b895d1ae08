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

#include <stdexcept>
#include <string>

namespace uspsim {

/// Base class for every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible matrix/vector dimensions.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid argument values or configuration (rates, durations, ids, ...).
struct ValueError : Error {
  using Error::Error;
};

/// A softmax/attention row with no visible entries.
struct DegenerateRowError : Error {
  using Error::Error;
};

/// Invalid rank/degree layout (e.g. p_u * p_r does not divide n_gpu).
struct TopologyError : Error {
  using Error::Error;
};

/// A fabric program where blocked ranks can never make progress.
struct DeadlockError : Error {
  using Error::Error;
};

/// File parsing or serialization failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace uspsim
