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

#include "uspsim/fabric.hpp"

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <fmt/format.h>

namespace uspsim {

// ---- topology ---------------------------------------------------------------

const std::vector<std::size_t>& ProcessTopology::ulysses_group_of(std::size_t rank) const {
  return ulysses_groups[sp_block(rank) * p_r + ring_index(rank)];
}

const std::vector<std::size_t>& ProcessTopology::ring_group_of(std::size_t rank) const {
  return ring_groups[sp_block(rank) * p_u + ulysses_index(rank)];
}

const std::vector<std::size_t>& ProcessTopology::dp_group_of(std::size_t rank) const {
  return dp_groups[ring_index(rank) * p_u + ulysses_index(rank)];
}

void ProcessTopology::validate() const {
  const auto check_partition = [this](const std::vector<std::vector<std::size_t>>& groups,
                                      std::size_t expected_size, std::string_view what) {
    std::vector<std::uint8_t> seen(n_gpu, 0);
    for (const auto& g : groups) {
      if (g.size() != expected_size) {
        throw TopologyError(fmt::format("{} group has {} ranks, expected {}", what, g.size(),
                                        expected_size));
      }
      for (std::size_t r : g) {
        if (r >= n_gpu || seen[r]) {
          throw TopologyError(fmt::format("{} groups do not partition the ranks (rank {})",
                                          what, r));
        }
        seen[r] = 1;
      }
    }
    for (std::size_t r = 0; r < n_gpu; ++r) {
      if (!seen[r]) {
        throw TopologyError(fmt::format("rank {} missing from {} groups", r, what));
      }
    }
  };
  check_partition(ulysses_groups, p_u, "ulysses");
  check_partition(ring_groups, p_r, "ring");
  check_partition(dp_groups, dp_replicas, "dp");
}

ProcessTopology build_topology(std::size_t n_gpu, std::size_t p_u, std::size_t p_r) {
  if (n_gpu == 0 || p_u == 0 || p_r == 0) {
    throw TopologyError(fmt::format("n_gpu={}, p_u={}, p_r={} must all be >= 1", n_gpu, p_u,
                                    p_r));
  }
  const std::size_t sp = p_u * p_r;
  if (n_gpu % sp != 0) {
    throw TopologyError(fmt::format("p_u*p_r = {} does not divide n_gpu = {}", sp, n_gpu));
  }
  ProcessTopology t;
  t.n_gpu = n_gpu;
  t.p_u = p_u;
  t.p_r = p_r;
  t.dp_replicas = n_gpu / sp;

  for (std::size_t b = 0; b < t.dp_replicas; ++b) {
    for (std::size_t r = 0; r < p_r; ++r) {
      std::vector<std::size_t> g(p_u);
      for (std::size_t u = 0; u < p_u; ++u) g[u] = b * sp + r * p_u + u;
      t.ulysses_groups.push_back(std::move(g));
    }
  }
  for (std::size_t b = 0; b < t.dp_replicas; ++b) {
    for (std::size_t u = 0; u < p_u; ++u) {
      std::vector<std::size_t> g(p_r);
      for (std::size_t r = 0; r < p_r; ++r) g[r] = b * sp + r * p_u + u;
      t.ring_groups.push_back(std::move(g));
    }
  }
  for (std::size_t r = 0; r < p_r; ++r) {
    for (std::size_t u = 0; u < p_u; ++u) {
      std::vector<std::size_t> g(t.dp_replicas);
      for (std::size_t b = 0; b < t.dp_replicas; ++b) g[b] = b * sp + r * p_u + u;
      t.dp_groups.push_back(std::move(g));
    }
  }
  t.validate();
  return t;
}

std::string_view group_kind_name(GroupKind kind) {
  switch (kind) {
    case GroupKind::ulysses: return "ulysses";
    case GroupKind::ring: return "ring";
    case GroupKind::dp: return "dp";
  }
  return "?";
}

// ---- ledger -----------------------------------------------------------------

std::uint64_t CommLedger::total_bytes() const {
  std::uint64_t sum = 0;
  for (const auto& e : entries) sum += e.bytes;
  return sum;
}

std::uint64_t CommLedger::total(std::string_view primitive, std::string_view phase) const {
  std::uint64_t sum = 0;
  for (const auto& e : entries) {
    if (!primitive.empty() && e.primitive != primitive) continue;
    if (!phase.empty() && e.phase != phase) continue;
    sum += e.bytes;
  }
  return sum;
}

std::uint64_t CommLedger::total_for_rank(std::size_t rank, std::string_view primitive,
                                         std::string_view phase) const {
  std::uint64_t sum = 0;
  for (const auto& e : entries) {
    if (e.rank != rank) continue;
    if (!primitive.empty() && e.primitive != primitive) continue;
    if (!phase.empty() && e.phase != phase) continue;
    sum += e.bytes;
  }
  return sum;
}

std::string CommLedger::to_csv() const {
  std::ostringstream out;
  out << "rank,peer_or_group,primitive,phase,bytes\n";
  for (const auto& e : entries) {
    out << e.rank << ',' << e.peer_or_group << ',' << e.primitive << ',' << e.phase << ','
        << e.bytes << '\n';
  }
  return out.str();
}

void CommLedger::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError(fmt::format("cannot open {} for writing", path));
  }
  out << to_csv();
  if (!out) {
    throw IoError(fmt::format("failed writing {}", path));
  }
}

// ---- fabric -----------------------------------------------------------------

namespace detail {

namespace {

/// Thrown inside a worker when another rank already aborted the run; never
/// escapes run().
struct AbortedError : Error {
  AbortedError() : Error("run aborted") {}
};

struct PendingSend {
  Payload payload;
  bool taken = false;
};

struct A2aCell {
  std::vector<std::optional<std::vector<Payload>>> deposits;
  std::size_t arrived = 0;
  std::size_t picked = 0;
};

}  // namespace

class Fabric {
 public:
  Fabric(const ProcessTopology& topology, const RunOptions& options)
      : topology_(topology), options_(options), states_(topology.n_gpu),
        rank_entries_(topology.n_gpu), root_errors_(topology.n_gpu) {}

  const ProcessTopology& topology() const { return topology_; }

  CommLedger execute(const RankProgram& program) {
    std::vector<std::thread> workers;
    workers.reserve(topology_.n_gpu);
    for (std::size_t r = 0; r < topology_.n_gpu; ++r) {
      workers.emplace_back([this, &program, r] { worker(program, r); });
    }
    for (auto& w : workers) w.join();

    if (deadlock_) {
      throw DeadlockError(abort_reason_);
    }
    for (std::size_t r = 0; r < topology_.n_gpu; ++r) {
      if (root_errors_[r]) std::rethrow_exception(root_errors_[r]);
    }
    CommLedger ledger;
    for (auto& entries : rank_entries_) {
      ledger.entries.insert(ledger.entries.end(), entries.begin(), entries.end());
    }
    return ledger;
  }

  void p2p_send(std::size_t rank, std::size_t peer, Payload payload, const std::string& phase) {
    check_peer(rank, peer);
    check_phase(phase);
    std::unique_lock lk(mu_);
    log_locked(rank, peer, "p2p", phase, payload.size());
    auto slot = std::make_shared<PendingSend>(PendingSend{std::move(payload), false});
    mailboxes_[MailboxKey{rank, peer, phase}].push_back(slot);
    state_changed_locked();
    await(lk, rank, [&] { return slot->taken; },
          [&] { return fmt::format("p2p_send(peer={}, phase=\"{}\")", peer, phase); });
  }

  Payload p2p_recv(std::size_t rank, std::size_t peer, const std::string& phase) {
    check_peer(rank, peer);
    check_phase(phase);
    std::unique_lock lk(mu_);
    const MailboxKey key{peer, rank, phase};
    await(lk, rank, [&] {
            auto it = mailboxes_.find(key);
            return it != mailboxes_.end() && !it->second.empty();
          },
          [&] { return fmt::format("p2p_recv(peer={}, phase=\"{}\")", peer, phase); });
    auto& queue = mailboxes_[key];
    auto slot = queue.front();
    queue.pop_front();
    if (queue.empty()) mailboxes_.erase(key);
    slot->taken = true;
    state_changed_locked();
    return std::move(slot->payload);
  }

  Payload send_recv(std::size_t rank, std::size_t dst, std::size_t src, Payload payload,
                    const std::string& phase) {
    check_peer(rank, dst);
    check_peer(rank, src);
    check_phase(phase);
    std::unique_lock lk(mu_);
    log_locked(rank, dst, "p2p", phase, payload.size());
    auto slot = std::make_shared<PendingSend>(PendingSend{std::move(payload), false});
    mailboxes_[MailboxKey{rank, dst, phase}].push_back(slot);
    state_changed_locked();

    const MailboxKey in_key{src, rank, phase};
    await(lk, rank, [&] {
            auto it = mailboxes_.find(in_key);
            return it != mailboxes_.end() && !it->second.empty();
          },
          [&] {
            return fmt::format("send_recv(dst={}, src={}, phase=\"{}\") waiting to receive", dst,
                               src, phase);
          });
    auto& queue = mailboxes_[in_key];
    auto in_slot = queue.front();
    queue.pop_front();
    if (queue.empty()) mailboxes_.erase(in_key);
    in_slot->taken = true;
    state_changed_locked();

    await(lk, rank, [&] { return slot->taken; },
          [&] {
            return fmt::format("send_recv(dst={}, src={}, phase=\"{}\") waiting for delivery",
                               dst, src, phase);
          });
    return std::move(in_slot->payload);
  }

  std::vector<Payload> all_to_all(std::size_t rank, GroupKind kind,
                                  const std::vector<std::size_t>& group, std::uint64_t round,
                                  std::vector<Payload> shards, const std::string& phase) {
    check_phase(phase);
    if (shards.size() != group.size()) {
      throw ValueError(fmt::format("all_to_all: {} shards for a group of {}", shards.size(),
                                   group.size()));
    }
    const std::size_t g =
        static_cast<std::size_t>(std::find(group.begin(), group.end(), rank) - group.begin());

    std::unique_lock lk(mu_);
    for (std::size_t j = 0; j < group.size(); ++j) {
      if (j == g) continue;  // self-shard: local copy, not a transfer
      log_locked(rank, group[j], "all_to_all", phase, shards[j].size());
    }
    const A2aKey key{static_cast<int>(kind), group[0], phase, round};
    A2aCell& cell = a2a_cells_[key];
    if (cell.deposits.empty()) cell.deposits.resize(group.size());
    cell.deposits[g] = std::move(shards);
    cell.arrived += 1;
    state_changed_locked();

    await(lk, rank, [&] {
            auto it = a2a_cells_.find(key);
            return it != a2a_cells_.end() && it->second.arrived == group.size();
          },
          [&] {
            return fmt::format("all_to_all(group={}[{}], phase=\"{}\", round={})",
                               group_kind_name(kind), group[0], phase, round);
          });

    A2aCell& done = a2a_cells_[key];
    std::vector<Payload> out(group.size());
    for (std::size_t j = 0; j < group.size(); ++j) {
      out[j] = (*done.deposits[j])[g];
    }
    done.picked += 1;
    if (done.picked == group.size()) a2a_cells_.erase(key);
    state_changed_locked();
    return out;
  }

 private:
  struct MailboxKey {
    std::size_t src;
    std::size_t dst;
    std::string phase;
    auto operator<=>(const MailboxKey&) const = default;
  };

  struct A2aKey {
    int kind;
    std::size_t group_lead;
    std::string phase;
    std::uint64_t round;
    auto operator<=>(const A2aKey&) const = default;
  };

  struct RankState {
    bool finished = false;
    bool blocked = false;
    bool dirty = false;  // fabric changed since this rank blocked
    std::string blocked_op;
    std::condition_variable cv;
  };

  void worker(const RankProgram& program, std::size_t rank) {
    RankContext ctx(*this, rank);
    try {
      if (options_.mode == RunMode::stepped) {
        std::unique_lock lk(mu_);
        states_[rank].cv.wait(lk, [&] { return token_ == rank || abort_; });
        if (abort_) throw AbortedError();
      }
      program(ctx);
      std::unique_lock lk(mu_);
      states_[rank].finished = true;
      if (options_.mode == RunMode::stepped && !abort_) schedule_next_locked();
    } catch (const AbortedError&) {
      std::unique_lock lk(mu_);
      states_[rank].finished = true;
    } catch (...) {
      std::unique_lock lk(mu_);
      root_errors_[rank] = std::current_exception();
      states_[rank].finished = true;
      start_abort_locked();
    }
  }

  /// Blocks rank until pred() holds. Must be entered with mu_ held; pred and
  /// describe are evaluated under mu_.
  template <typename Pred, typename Describe>
  void await(std::unique_lock<std::mutex>& lk, std::size_t rank, Pred pred, Describe describe) {
    if (options_.mode == RunMode::stepped) {
      while (!pred()) {
        if (abort_) throw AbortedError();
        states_[rank].blocked = true;
        states_[rank].dirty = false;
        states_[rank].blocked_op = describe();
        schedule_next_locked();
        states_[rank].cv.wait(lk, [&] { return token_ == rank || abort_; });
        if (abort_) throw AbortedError();
        states_[rank].blocked = false;
      }
      return;
    }
    // Concurrent mode: global cv, notified on every fabric state change. The
    // deadline restarts on any activity, so a deadlock is declared only after
    // deadlock_timeout with the fabric fully idle.
    states_[rank].blocked = true;
    states_[rank].blocked_op = describe();
    while (!pred()) {
      if (abort_) {
        states_[rank].blocked = false;
        throw AbortedError();
      }
      if (cv_.wait_for(lk, options_.deadlock_timeout) == std::cv_status::timeout && !pred() &&
          !abort_) {
        declare_deadlock_locked();
        throw AbortedError();
      }
    }
    states_[rank].blocked = false;
  }

  /// Stepped scheduler: hand the token to the lowest-id rank that can run. A
  /// blocked rank is eligible only if the fabric changed since it blocked; if
  /// nobody is eligible and someone is still blocked, that is a deadlock.
  void schedule_next_locked() {
    for (std::size_t r = 0; r < states_.size(); ++r) {
      RankState& s = states_[r];
      if (s.finished) continue;
      if (s.blocked && !s.dirty) continue;
      token_ = r;
      s.cv.notify_all();
      return;
    }
    bool any_blocked = false;
    for (const RankState& s : states_) any_blocked |= !s.finished;
    if (any_blocked) declare_deadlock_locked();
  }

  void declare_deadlock_locked() {
    if (abort_) return;
    std::string msg = "deadlock detected:";
    for (std::size_t r = 0; r < states_.size(); ++r) {
      if (!states_[r].finished && states_[r].blocked) {
        msg += fmt::format(" rank {} blocked on {};", r, states_[r].blocked_op);
      }
    }
    deadlock_ = true;
    abort_reason_ = msg;
    start_abort_locked();
  }

  void start_abort_locked() {
    abort_ = true;
    for (auto& s : states_) s.cv.notify_all();
    cv_.notify_all();
  }

  void state_changed_locked() {
    if (options_.mode == RunMode::stepped) {
      for (auto& s : states_) {
        if (s.blocked) s.dirty = true;
      }
    } else {
      cv_.notify_all();
    }
  }

  void log_locked(std::size_t rank, std::size_t peer, const char* primitive,
                  const std::string& phase, std::size_t bytes) {
    rank_entries_[rank].push_back(LedgerEntry{rank, std::to_string(peer), primitive, phase,
                                              static_cast<std::uint64_t>(bytes)});
  }

  void check_peer(std::size_t rank, std::size_t peer) const {
    if (peer >= topology_.n_gpu) {
      throw ValueError(fmt::format("peer {} out of range for {} ranks", peer, topology_.n_gpu));
    }
    if (peer == rank) {
      throw ValueError(fmt::format("rank {} cannot send to itself", rank));
    }
  }

  static void check_phase(const std::string& phase) {
    if (phase.empty() || phase.find_first_of(",\"\n") != std::string::npos) {
      throw ValueError(fmt::format("invalid phase label \"{}\"", phase));
    }
  }

  const ProcessTopology& topology_;
  RunOptions options_;

  std::mutex mu_;
  std::condition_variable cv_;  // concurrent mode
  std::size_t token_ = 0;       // stepped mode: rank allowed to run
  std::vector<RankState> states_;
  bool abort_ = false;
  bool deadlock_ = false;
  std::string abort_reason_;

  std::map<MailboxKey, std::deque<std::shared_ptr<PendingSend>>> mailboxes_;
  std::map<A2aKey, A2aCell> a2a_cells_;

  std::vector<std::vector<LedgerEntry>> rank_entries_;
  std::vector<std::exception_ptr> root_errors_;
};

}  // namespace detail

// ---- RankContext ------------------------------------------------------------

const ProcessTopology& RankContext::topology() const { return fabric_->topology(); }

void RankContext::p2p_send(std::size_t peer, Payload payload, const std::string& phase) {
  fabric_->p2p_send(rank_, peer, std::move(payload), phase);
}

Payload RankContext::p2p_recv(std::size_t peer, const std::string& phase) {
  return fabric_->p2p_recv(rank_, peer, phase);
}

Payload RankContext::send_recv(std::size_t dst, std::size_t src, Payload payload,
                               const std::string& phase) {
  return fabric_->send_recv(rank_, dst, src, std::move(payload), phase);
}

std::vector<Payload> RankContext::all_to_all(GroupKind kind, std::vector<Payload> shards,
                                             const std::string& phase) {
  const ProcessTopology& topo = fabric_->topology();
  const std::vector<std::size_t>* group = nullptr;
  switch (kind) {
    case GroupKind::ulysses: group = &topo.ulysses_group_of(rank_); break;
    case GroupKind::ring: group = &topo.ring_group_of(rank_); break;
    case GroupKind::dp: group = &topo.dp_group_of(rank_); break;
  }
  const std::pair<int, std::string> round_key{static_cast<int>(kind), phase};
  std::uint64_t round = 0;
  bool found = false;
  for (auto& [key, count] : a2a_rounds_) {
    if (key == round_key) {
      round = count++;
      found = true;
      break;
    }
  }
  if (!found) {
    a2a_rounds_.emplace_back(round_key, 1);
  }
  return fabric_->all_to_all(rank_, kind, *group, round, std::move(shards), phase);
}

CommLedger run(const ProcessTopology& topology, const RankProgram& program,
               const RunOptions& options) {
  topology.validate();
  if (!program) {
    throw ValueError("run: empty program");
  }
  detail::Fabric fabric(topology, options);
  return fabric.execute(program);
}

}  // namespace uspsim
