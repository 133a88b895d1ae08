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

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "uspsim/error.hpp"

namespace uspsim {

/// Rank layout for hybrid sequence parallelism. Within each SP block of
/// P = p_u * p_r consecutive ranks, the Ulysses coordinate varies fastest
/// (u = local mod p_u, r = local div p_u), keeping Ulysses peers adjacent.
/// Data-parallel groups collect equal (u, r) coordinates across SP blocks.
struct ProcessTopology {
  std::size_t n_gpu = 0;
  std::size_t p_u = 0;
  std::size_t p_r = 0;
  std::size_t dp_replicas = 0;
  std::vector<std::vector<std::size_t>> ulysses_groups;
  std::vector<std::vector<std::size_t>> ring_groups;
  std::vector<std::vector<std::size_t>> dp_groups;

  std::size_t sp_degree() const { return p_u * p_r; }
  std::size_t sp_block(std::size_t rank) const { return rank / sp_degree(); }
  std::size_t ulysses_index(std::size_t rank) const { return rank % sp_degree() % p_u; }
  std::size_t ring_index(std::size_t rank) const { return rank % sp_degree() / p_u; }

  const std::vector<std::size_t>& ulysses_group_of(std::size_t rank) const;
  const std::vector<std::size_t>& ring_group_of(std::size_t rank) const;
  const std::vector<std::size_t>& dp_group_of(std::size_t rank) const;

  /// Checks that each group family partitions the rank set.
  void validate() const;
};

/// Builds the topology. p_u * p_r must divide n_gpu; dp_replicas is the
/// quotient n_gpu / (p_u * p_r).
ProcessTopology build_topology(std::size_t n_gpu, std::size_t p_u, std::size_t p_r);

enum class GroupKind { ulysses, ring, dp };
std::string_view group_kind_name(GroupKind kind);

/// One logged transfer, recorded on the sender at send time. peer_or_group
/// holds the receiving rank; self-copies are never logged.
struct LedgerEntry {
  std::size_t rank = 0;          // sender
  std::string peer_or_group;     // receiving rank (decimal string)
  std::string primitive;         // "all_to_all" | "p2p"
  std::string phase;
  std::uint64_t bytes = 0;

  friend bool operator==(const LedgerEntry&, const LedgerEntry&) = default;
};

struct CommLedger {
  std::vector<LedgerEntry> entries;

  std::uint64_t total_bytes() const;
  /// Sum over entries matching the given filters; empty string = any.
  std::uint64_t total(std::string_view primitive = {}, std::string_view phase = {}) const;
  std::uint64_t total_for_rank(std::size_t rank, std::string_view primitive = {},
                               std::string_view phase = {}) const;

  /// CSV with header rank,peer_or_group,primitive,phase,bytes.
  void write_csv(const std::string& path) const;
  std::string to_csv() const;

  friend bool operator==(const CommLedger&, const CommLedger&) = default;
};

using Payload = std::vector<std::byte>;

template <typename T>
Payload make_payload(std::span<const T> xs) {
  static_assert(std::is_trivially_copyable_v<T>);
  Payload p(xs.size() * sizeof(T));
  if (!xs.empty()) std::memcpy(p.data(), xs.data(), p.size());
  return p;
}

template <typename T>
Payload make_payload(const std::vector<T>& xs) {
  return make_payload(std::span<const T>(xs));
}

template <typename T>
std::vector<T> payload_as(const Payload& p) {
  static_assert(std::is_trivially_copyable_v<T>);
  if (p.size() % sizeof(T) != 0) {
    throw ValueError("payload size " + std::to_string(p.size()) + " is not a multiple of " +
                     std::to_string(sizeof(T)));
  }
  std::vector<T> xs(p.size() / sizeof(T));
  if (!xs.empty()) std::memcpy(xs.data(), p.data(), p.size());
  return xs;
}

enum class RunMode { stepped, concurrent };

struct RunOptions {
  RunMode mode = RunMode::stepped;
  /// Concurrent mode declares deadlock after this long with no fabric
  /// activity; the stepped scheduler detects deadlock exactly.
  std::chrono::milliseconds deadlock_timeout{10000};
};

namespace detail {
class Fabric;
}

/// Per-rank handle to the fabric. All primitives are blocking rendezvous
/// points: a send completes only once the matching receive has taken the
/// payload, and an all_to_all completes only once every group member arrived.
class RankContext {
 public:
  std::size_t rank() const { return rank_; }
  const ProcessTopology& topology() const;

  /// Synchronous send; phase labels must match on both sides.
  void p2p_send(std::size_t peer, Payload payload, const std::string& phase);
  Payload p2p_recv(std::size_t peer, const std::string& phase);

  /// Combined send-to-dst + receive-from-src that posts the outgoing payload
  /// before blocking, so rings of ranks can shift data without deadlock.
  Payload send_recv(std::size_t dst, std::size_t src, Payload payload, const std::string& phase);

  /// Exchanges shards within this rank's group of the given kind: member g
  /// receives shard g from every member, ordered by sender group index. The
  /// self-shard is copied locally and costs 0 ledger bytes.
  std::vector<Payload> all_to_all(GroupKind kind, std::vector<Payload> shards,
                                  const std::string& phase);

 private:
  friend class detail::Fabric;
  RankContext(detail::Fabric& fabric, std::size_t rank) : fabric_(&fabric), rank_(rank) {}

  detail::Fabric* fabric_;
  std::size_t rank_;
  // Per-(group kind, phase) call counter so repeated collectives with the
  // same phase label match by round.
  std::vector<std::pair<std::pair<int, std::string>, std::uint64_t>> a2a_rounds_;
};

using RankProgram = std::function<void(RankContext&)>;

/// Runs one instance of the program per rank under the chosen scheduler and
/// returns the merged ledger (per-rank entries in program order, ranks
/// concatenated in rank order — deterministic for a fixed program in both
/// modes). Program exceptions abort the run and are rethrown for the lowest
/// failing rank; an unmatched transfer raises DeadlockError naming the
/// blocked ranks and their pending operations.
CommLedger run(const ProcessTopology& topology, const RankProgram& program,
               const RunOptions& options = {});

/// run() variant that collects one result per rank.
template <typename R>
std::pair<std::vector<R>, CommLedger> run_collect(const ProcessTopology& topology,
                                                  const std::function<R(RankContext&)>& program,
                                                  const RunOptions& options = {}) {
  std::vector<R> results(topology.n_gpu);
  CommLedger ledger = run(
      topology, [&](RankContext& ctx) { results[ctx.rank()] = program(ctx); }, options);
  return {std::move(results), std::move(ledger)};
}

}  // namespace uspsim
