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

// End-to-end checks of the uspsim executable: exit codes, report files and
// dump artifacts. The binary path arrives through a compile definition.

#include <sys/wait.h>

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "uspsim/mel.hpp"
#include "uspsim/tdmp.hpp"
#include "uspsim/wav.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path work_dir() {
  const fs::path dir = fs::temp_directory_path() / "uspsim_cli_tests";
  fs::create_directories(dir);
  return dir;
}

/// Runs the CLI with `args`, captures stdout/stderr, returns the exit code.
int run_cli(const std::string& args, std::string* out = nullptr) {
  const fs::path out_path = work_dir() / "stdout.txt";
  const std::string cmd = std::string(USPSIM_CLI_PATH) + " " + args + " > " +
                          out_path.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  if (out != nullptr) {
    std::ifstream in(out_path);
    std::ostringstream buf;
    buf << in.rdbuf();
    *out = buf.str();
  }
  REQUIRE(WIFEXITED(status));
  return WEXITSTATUS(status);
}

std::size_t count_lines(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

TEST_CASE("verify passes on the default config") {
  const fs::path report = work_dir() / "verify_report.json";
  std::string out;
  const int rc = run_cli("verify --out " + report.string(), &out);
  CHECK(rc == 0);
  CHECK(out.find("OK: 8/8 checks passed") != std::string::npos);
  CHECK(out.find("[FAIL]") == std::string::npos);

  std::ifstream in(report);
  REQUIRE(in.good());
  json doc;
  in >> doc;
  CHECK(doc["overall"] == true);
  CHECK(doc["checks"].size() == 8);
  for (const auto& check : doc["checks"]) CHECK(check["status"] == "pass");
}

TEST_CASE("verify fails with an impossible tolerance") {
  const fs::path cfg = work_dir() / "zero_tol.json";
  std::ofstream(cfg) << R"({"tol_f64": 0.0, "tol_f32": 0.0})";
  std::string out;
  const int rc = run_cli("verify --config " + cfg.string(), &out);
  CHECK(rc == 1);
  CHECK(out.find("[FAIL] usp_equivalence") != std::string::npos);
}

TEST_CASE("verify config errors are usage errors") {
  CHECK(run_cli("verify --config /nonexistent/uspsim.json") == 2);
  const fs::path cfg = work_dir() / "broken.json";
  std::ofstream(cfg) << "{broken";
  CHECK(run_cli("verify --config " + cfg.string()) == 2);
}

TEST_CASE("simulate reports the closed forms and passes") {
  const fs::path report = work_dir() / "sim.json";
  const fs::path csv = work_dir() / "sim_ledger.csv";
  const int rc = run_cli(
      "simulate --n-gpu 4 --pu 2 --pr 2 --seq 32 --heads 8 --dh 4 --causal --out " +
      report.string() + " --ledger-csv " + csv.string());
  CHECK(rc == 0);

  std::ifstream in(report);
  json doc;
  in >> doc;
  CHECK(doc["pass"] == true);
  CHECK(doc["max_abs_err"].get<double>() < 1e-10);
  CHECK(doc["ledger"]["matches_closed_form"] == true);
  // 8 rows x 4 local heads x d_h 4 doubles across each group.
  CHECK(doc["ledger"]["per_rank_qkv_a2a_bytes"] == 3072);
  CHECK(doc["ledger"]["per_rank_out_a2a_bytes"] == 1024);
  CHECK(doc["ledger"]["per_rank_ring_bytes"] == 4096);
  CHECK(doc["ledger"]["total_bytes"] == 4 * (3072 + 1024 + 4096));

  std::ifstream csv_in(csv);
  std::string header;
  std::getline(csv_in, header);
  CHECK(header == "rank,peer_or_group,primitive,phase,bytes");
  CHECK(count_lines(csv) > 1);
}

TEST_CASE("simulate exit codes") {
  CHECK(run_cli("simulate --pu 3 --n-gpu 4") == 2);   // 3 does not divide 4
  CHECK(run_cli("simulate --seq 30 --pu 2 --pr 2") == 2);  // 30 not divisible by 4
  std::string out;
  CHECK(run_cli("simulate --pu 1 --pr 1 --seq 8 --heads 2 --dh 4", &out) == 0);
  json doc = json::parse(out);
  CHECK(doc["ledger"]["total_bytes"] == 0);  // a single rank never communicates
}

TEST_CASE("pack produces SP-group-identical, replica-distinct dumps") {
  const fs::path manifest = work_dir() / "manifest.jsonl";
  {
    std::ofstream out(manifest);
    out << R"({"id":"s0","text_tokens":[11,12,13]})" << "\n";
    out << R"({"id":"s1","text_tokens":[21,-1,22],"audio":[{"duration_s":0.6}],"labels":[21,0,22]})"
        << "\n";
    for (int i = 2; i < 8; ++i) {
      out << R"({"id":"s)" << i << R"(","text_tokens":[)" << 10 * i << "," << 10 * i + 1
          << "]}" << "\n";
    }
  }
  const fs::path dir = work_dir() / "packout";
  fs::remove_all(dir);
  const int rc = run_cli("pack --manifest " + manifest.string() +
                         " --n-gpu 4 --pu 2 --pr 1 --max-ctx 64 --seed 3 --out-dir " +
                         dir.string());
  CHECK(rc == 0);

  const auto file_bytes = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
  };
  // Ranks 0 and 1 share an SP group; ranks 2 and 3 are the other replica.
  CHECK(file_bytes(dir / "rank0_tokens.tdmp") == file_bytes(dir / "rank1_tokens.tdmp"));
  CHECK(file_bytes(dir / "rank2_tokens.tdmp") == file_bytes(dir / "rank3_tokens.tdmp"));
  CHECK(file_bytes(dir / "rank0_tokens.tdmp") != file_bytes(dir / "rank2_tokens.tdmp"));

  const uspsim::MatD tokens = uspsim::tdmp::read_matrix((dir / "rank0_tokens.tdmp").string());
  const uspsim::MatD mask = uspsim::tdmp::read_matrix((dir / "rank0_mask.tdmp").string());
  const uspsim::MatD labels = uspsim::tdmp::read_matrix((dir / "rank0_labels.tdmp").string());
  CHECK(tokens.rows() == 4);  // 8 samples over 2 replicas
  CHECK(tokens.cols() % 2 == 0);  // padded to the SP degree
  CHECK(tokens.cols() <= 64);
  for (std::size_t i = 0; i < mask.rows(); ++i) {
    for (std::size_t j = 0; j < mask.cols(); ++j) {
      const bool padded = mask.at(i, j) == 0.0;
      CHECK((mask.at(i, j) == 0.0 || mask.at(i, j) == 1.0));
      if (padded) {
        CHECK(tokens.at(i, j) == 0.0);     // pad id
        CHECK(labels.at(i, j) == -100.0);  // ignore index
      }
    }
  }

  std::ifstream summary(dir / "summary.json");
  REQUIRE(summary.good());
  json doc;
  summary >> doc;
  CHECK(doc["n_samples"] == 8);
  CHECK(doc["dp_replicas"] == 2);

  SUBCASE("missing manifest is a usage error") {
    CHECK(run_cli("pack --manifest /nonexistent/m.jsonl") == 2);
  }
}

TEST_CASE("blend reproduces the headline dataset count") {
  const fs::path spec = work_dir() / "blends.json";
  std::ofstream(spec) << R"([{"name":"think","size":43000,"beta":2.0,"long_audio":false}])";
  const fs::path schedule = work_dir() / "schedule.jsonl";
  std::string out;
  const int rc = run_cli("blend --spec " + spec.string() + " --stage pre1 --seed 1 --out " +
                             schedule.string(),
                         &out);
  CHECK(rc == 0);
  CHECK(count_lines(schedule) == 86000);
  const json doc = json::parse(out);
  CHECK(doc["per_dataset"]["think"] == 86000);
  CHECK(doc["max_ctx"] == 8192);

  SUBCASE("mid stages reweight before scheduling") {
    std::string mid_out;
    CHECK(run_cli("blend --spec " + spec.string() + " --stage mid2 --seed 1 --out " +
                      schedule.string(),
                  &mid_out) == 0);
    const json mid = json::parse(mid_out);
    CHECK(mid["per_dataset"]["think"] == 43000);  // beta halved to 1.0
    CHECK(mid["max_ctx"] == 131072);
  }
  SUBCASE("unknown stages and missing specs are usage errors") {
    CHECK(run_cli("blend --spec " + spec.string() + " --stage post1") == 2);
    CHECK(run_cli("blend --spec /nonexistent/blends.json") == 2);
  }
}

TEST_CASE("mel dumps a 1 s silence clip as floored log power") {
  const fs::path wav = work_dir() / "silence.wav";
  uspsim::wav::write(wav.string(), std::vector<double>(uspsim::kSampleRate, 0.0),
                     static_cast<int>(uspsim::kSampleRate));
  const fs::path dir = work_dir() / "melout";
  fs::remove_all(dir);
  std::string out;
  const int rc =
      run_cli("mel --wav " + wav.string() + " --dim 64 --out-dir " + dir.string(), &out);
  CHECK(rc == 0);

  const uspsim::MatD mel = uspsim::tdmp::read_matrix((dir / "mel.tdmp").string());
  CHECK(mel.rows() == 128);
  CHECK(mel.cols() == 100);
  const double floor_log = std::log(1e-10);
  for (std::size_t i = 0; i < mel.rows(); ++i) {
    for (std::size_t j = 0; j < mel.cols(); ++j) CHECK(mel.at(i, j) == floor_log);
  }

  const uspsim::MatD features = uspsim::tdmp::read_matrix((dir / "features.tdmp").string());
  CHECK(features.rows() == 25);  // 100 frames -> 50 -> 25 tokens
  CHECK(features.cols() == 64);

  const uspsim::tdmp::Tensor taus = uspsim::tdmp::read((dir / "taus.tdmp").string());
  REQUIRE(taus.dims == std::vector<std::uint64_t>{25});
  for (std::size_t t = 0; t < 25; ++t) {
    CHECK(taus.values[t] == static_cast<double>(t) * 0.04);
  }

  SUBCASE("a missing input file is a usage error") {
    CHECK(run_cli("mel --wav /nonexistent/audio.wav") == 2);
  }
}

TEST_CASE("help and usage errors") {
  std::string out;
  CHECK(run_cli("--help", &out) == 0);
  CHECK(out.find("verify") != std::string::npos);
  CHECK(out.find("simulate") != std::string::npos);
  CHECK(run_cli("") == 2);           // a subcommand is required
  CHECK(run_cli("frobnicate") == 2);  // unknown subcommand
}

}  // namespace
