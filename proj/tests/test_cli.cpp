#include <gtest/gtest.h>

#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "support.hpp"

namespace ca = circuit_align;
namespace ts = testing_support;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(CIRCUIT_ALIGN_CLI) + " " + args + " > " + (log.string() + ".out") + " 2> " +
                          (log.string() + ".err");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Data rows of a CSV artifact, skipping the provenance comment and header.
std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::vector<std::vector<std::string>> rows;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

nlohmann::json without_timestamps(nlohmann::json j) {
  j.erase("timestamp");
  j.erase("wall_clock_s");
  return j;
}

}  // namespace

TEST(Cli, AlignScoreIsRecomputableAndDeterministic) {
  const auto dir = ts::scratch_dir("cli_align");
  const std::string common = "align --model toy:teacher --model2 toy:student_high --task numeral_seq --n 16 --seed 3 "
                             "--strategy greedy --normalization max --out-dir ";
  ASSERT_EQ(run(common + (dir / "a").string(), dir / "a_log"), 0) << slurp(dir / "a_log.err");
  ASSERT_EQ(run(common + (dir / "b").string(), dir / "b_log"), 0) << slurp(dir / "b_log.err");

  const auto report = nlohmann::json::parse(slurp(dir / "a" / "alignment.json"));
  const auto rows = csv_rows(dir / "a" / "pairs.csv");
  ASSERT_EQ(rows.size(), report["n_matched"].get<std::size_t>());
  double sum = 0.0;
  for (const auto& r : rows) {
    ASSERT_EQ(r.size(), 7u);
    const double s = std::stod(r[2]), ti = std::stod(r[3]), si = std::stod(r[4]), w = std::stod(r[5]);
    sum += w * s * (1.0 - std::abs(ti - si));
    EXPECT_NEAR(std::stod(r[6]), w * s * (1.0 - std::abs(ti - si)), 1e-15);
  }
  EXPECT_NEAR(sum / static_cast<double>(rows.size()), report["A"].get<double>(), 1e-12);

  for (const char* name : {"pairs.csv", "similarity.csv", "influence.csv"}) {
    EXPECT_EQ(slurp(dir / "a" / name), slurp(dir / "b" / name)) << name;
  }
  EXPECT_EQ(without_timestamps(report), without_timestamps(nlohmann::json::parse(slurp(dir / "b" / "alignment.json"))));
  const auto ma = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
  const auto mb = nlohmann::json::parse(slurp(dir / "b" / "manifest.json"));
  EXPECT_EQ(ma["manifest_digest"], mb["manifest_digest"]);
  EXPECT_EQ(without_timestamps(ma), without_timestamps(mb));
}

TEST(Cli, SweepRowsAreNonIncreasing) {
  const auto dir = ts::scratch_dir("cli_sweep");
  ASSERT_EQ(run("sweep --model toy:teacher --n 16 --thresholds 0.1,0.2,0.3 --out-dir " + dir.string(), dir / "log"), 0)
      << slurp(dir / "log.err");
  const auto rows = csv_rows(dir / "sweep.csv");
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LE(std::stoi(rows[i][1]), std::stoi(rows[i - 1][1]));
  EXPECT_EQ(slurp(dir / "sweep.csv").rfind("# manifest=", 0), 0u);
}

TEST(Cli, DiscoverWritesCircuit) {
  const auto dir = ts::scratch_dir("cli_discover");
  ASSERT_EQ(run("discover --model toy:teacher --n 24 --threshold 0.2 --out-dir " + dir.string(), dir / "log"), 0)
      << slurp(dir / "log.err");
  const auto circuit = nlohmann::json::parse(slurp(dir / "circuit.json"));
  EXPECT_EQ(circuit["nodes"], (nlohmann::json{"L0.H0", "L1.H0", "L1.MLP"}));
  EXPECT_TRUE(fs::exists(dir / "circuit.dot"));
  EXPECT_TRUE(fs::exists(dir / "edge_scores.csv"));
}

TEST(Cli, ErrorsAreJsonOnStderr) {
  const auto dir = ts::scratch_dir("cli_error");
  const int code = run("baseline --model toy:no_such_model --out-dir " + dir.string(), dir / "log");
  EXPECT_NE(code, 0);
  const auto err = nlohmann::json::parse(slurp(dir / "log.err"));
  EXPECT_TRUE(err.contains("error"));
  EXPECT_TRUE(err.contains("message"));

  const int bad_threshold = run("discover --model toy:teacher --n 8 --threshold 1.5 --out-dir " + dir.string(), dir / "log2");
  EXPECT_NE(bad_threshold, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "log2.err"))["error"], "invalid_argument");
}

TEST(Cli, ToyExportRoundTripsThroughVerify) {
  const auto dir = ts::scratch_dir("cli_export");
  std::ofstream(dir / "prompts.txt") << " 1 2 3 4\n one two three\n";
  ASSERT_EQ(run("toy-export --name student_mid --out " + (dir / "toys").string() + " --reference-prompts " +
                    (dir / "prompts.txt").string(),
                dir / "log"),
            0)
      << slurp(dir / "log.err");
  const auto model_dir = dir / "toys" / "student_mid";
  for (const char* f : {"config.json", "model.safetensors", "vocab.json", "merges.txt", "checksums.json",
                        "reference_logits.json"}) {
    EXPECT_TRUE(fs::exists(model_dir / f)) << f;
  }
  EXPECT_EQ(run("verify-reference --model " + model_dir.string(), dir / "v"), 0) << slurp(dir / "v.err");
  const auto loaded = ca::load_model_dir(model_dir);
  EXPECT_EQ(ca::weights_content_digest(loaded.config, loaded.weights),
            ca::build_planted(ca::student_mid_spec()).weights_digest);
}

TEST(Cli, GenDataWritesJsonl) {
  const auto dir = ts::scratch_dir("cli_gen");
  ASSERT_EQ(run("gen-data --model toy:teacher --task ioi --n 5 --seed 2 --out " + (dir / "ioi.jsonl").string(), dir / "log"), 0)
      << slurp(dir / "log.err");
  const auto ds = ca::load_external_jsonl(dir / "ioi.jsonl", ca::toy_tokenizer());
  EXPECT_EQ(ds.size(), 5u);
}
