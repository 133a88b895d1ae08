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

// The verification surface: eight self-contained check suites that exercise
// every library module end to end. The CLI `verify` subcommand and the
// acceptance runner both execute exactly these checks, so "the artifact
// verifies" means one thing.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace uspsim::verify {

/// Knobs for the check suites. The defaults are the contract; a config file
/// can tighten or loosen them for experiments.
struct VerifyConfig {
  std::uint64_t seed = 2026;

  double tol_f64 = 1e-10;   // parallel-vs-serial, 64-bit payloads
  double tol_f32 = 1e-3;    // parallel-vs-serial, 32-bit payloads
  double tol_merge = 1e-12;  // online-softmax merge vs direct softmax
  double tol_rote_shift = 1e-6;     // logit drift under global time shifts
  double tol_rote_relative = 1e-9;  // relative-rotation identity

  std::size_t n_softmax_problems = 200;
  std::size_t n_rote_pairs = 1000;
  std::size_t n_packing_seeds = 100;
};

/// Reads a config as JSON; every key is optional and missing keys keep their
/// defaults. Throws IoError when unreadable, ValueError on malformed JSON.
VerifyConfig load_verify_config(const std::string& path);

/// One suite's outcome. `metric` is the worst value observed and `tolerance`
/// the bound it was held against (counting checks use a violation count
/// against zero).
struct CheckResult {
  std::string name;
  bool passed = false;
  double metric = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool all_passed() const;
};

/// Parallel attention equals the serial reference on every (p_u, p_r)
/// factorization up to 8 ranks, both precisions, causal and bidirectional,
/// with and without padding.
CheckResult check_usp_equivalence(const VerifyConfig& cfg);

/// Every run's communication ledger matches the closed forms byte for byte,
/// and the non-attention phases of a transformer block move nothing.
CheckResult check_ledger_closed_forms(const VerifyConfig& cfg);

/// Rotation identities: no-op at time zero, attention logits invariant under
/// global time shifts, and the relative-rotation property.
CheckResult check_rote_properties(const VerifyConfig& cfg);

/// Online-softmax statistics merged over random contiguous partitions and
/// merge orders reproduce the direct softmax.
CheckResult check_online_softmax(const VerifyConfig& cfg);

/// The audio front-end arithmetic: 30 s -> 3000 mel frames -> 1500 encoder
/// features -> 750 tokens, 30 min -> 45000 tokens, and the stage caps those
/// counts must clear.
CheckResult check_token_arithmetic(const VerifyConfig& cfg);

/// Sampling, expansion and collation invariants across seeds and topologies.
CheckResult check_packing_invariants(const VerifyConfig& cfg);

/// Blend-count arithmetic, the stage-2 reweighting rule, and the stage caps.
CheckResult check_curriculum(const VerifyConfig& cfg);

/// The stepped and concurrent fabric schedulers produce bitwise-identical
/// attention outputs and ledgers.
CheckResult check_fabric_determinism(const VerifyConfig& cfg);

/// All eight checks, in the order above.
VerifyReport run_all_checks(const VerifyConfig& cfg);

}  // namespace uspsim::verify
