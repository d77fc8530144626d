#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "dflow/config.hpp"
#include "dflow/harness.hpp"

namespace dflow {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int line_count(const fs::path& p) {
  std::ifstream is(p);
  int n = 0;
  for (std::string line; std::getline(is, line);) n += !line.empty();
  return n;
}

// Runs the CLI; returns its exit status.
int run_cli(const std::string& args) {
  const std::string cmd = std::string(DFLOW_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("dflow_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
    fs::create_directories(root_);
    json cfg = {{"seed", 3},
                {"model", {{"hidden", 16}}},
                {"embed", {{"steps", 200}, {"eval_triplets", 200}}},
                {"flow", {{"steps", 20}, {"batch", 8}}},
                {"grpo", {{"steps", 2}, {"batch", 2}, {"warmup", 1}}},
                {"sampler", {{"steps_list", {1, 2}}}},
                {"data", {{"train", 12}, {"val", 3}, {"test", 5}}}};
    std::ofstream(root_ / "run.json") << cfg.dump(2);
  }
  void TearDown() override { fs::remove_all(root_); }

  std::string base(const std::string& out) const {
    return "--config " + (root_ / "run.json").string() + " --out " + (root_ / out).string();
  }

  fs::path root_;
};

TEST(Config, DefaultsRoundTripThroughJson) {
  const RunConfig c;
  const auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(config_from_json(json{{"sede", 1}}), ValidationError);
  try {
    config_from_json(json{{"flow", {{"lr", 1e-3}, {"lrr", 1}}}});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("flow.lrr"), std::string::npos) << e.what();
  }
  EXPECT_THROW(config_from_json(json{{"flow", {{"lr", "fast"}}}}), ValidationError);
}

TEST(Config, RangeChecks) {
  EXPECT_THROW(config_from_json(json{{"grpo", {{"group_size", 1}}}}).validate(), ValidationError);
  EXPECT_THROW(config_from_json(json{{"sampler", {{"steps_list", {0, 2}}}}}).validate(), ValidationError);
  EXPECT_THROW(config_from_json(json{{"sampler", {{"clock", "sundial"}}}}), ValidationError);
}

TEST(Config, HashIgnoresOutputDirectoryOnly) {
  RunConfig a;
  RunConfig b;
  b.out = "elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 8;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, PresetSelectsAblation) {
  const auto c = config_from_json(json{{"grpo", {{"preset", "g2"}}}});
  EXPECT_EQ(c.grpo.group_size, 2);
}

TEST_F(CliTest, GenDataCountsDeterminismAndDisjointIds) {
  ASSERT_EQ(run_cli("gen-data " + base("a")), 0);
  ASSERT_EQ(run_cli("gen-data " + base("b")), 0);
  const int expected[3] = {12, 3, 5};
  std::set<long long> ids;
  int total = 0;
  for (int i = 0; i < 3; ++i) {
    const std::string name = harness::kSplits[static_cast<std::size_t>(i)];
    const auto a = root_ / "a" / "data" / (name + ".jsonl");
    EXPECT_EQ(line_count(a), expected[i]);
    EXPECT_EQ(slurp(a), slurp(root_ / "b" / "data" / (name + ".jsonl")));
    for (const auto& s : sim::read_scenes_jsonl(a.string())) ids.insert(s.id), ++total;
  }
  EXPECT_EQ(static_cast<int>(ids.size()), total);
  const auto manifest = json::parse(slurp(root_ / "a" / "data" / "manifest.json"));
  EXPECT_EQ(manifest["counts"]["train"], 12);
  EXPECT_TRUE(manifest.contains("config_hash"));
}

TEST_F(CliTest, StageOrderErrors) {
  EXPECT_EQ(run_cli("train grpo " + base("x")), 1);
  EXPECT_EQ(run_cli("train flow " + base("x")), 1);
  EXPECT_EQ(run_cli("eval " + base("x")), 1);
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("train sideways " + base("x")), 1);
  EXPECT_EQ(run_cli("eval --steps 1,x " + base("x")), 1);
  std::ofstream(root_ / "bad.json") << R"({"flow": {"lrr": 1}})";
  EXPECT_EQ(run_cli("gen-data --config " + (root_ / "bad.json").string()), 1);
  std::ofstream(root_ / "broken.json") << "{";
  EXPECT_EQ(run_cli("gen-data --config " + (root_ / "broken.json").string()), 1);
}

TEST_F(CliTest, FullPipelineIsDeterministic) {
  for (const char* out : {"r1", "r2"}) {
    ASSERT_EQ(run_cli("gen-data " + base(out)), 0);
    ASSERT_EQ(run_cli("train embed " + base(out)), 0);
    ASSERT_EQ(run_cli("train flow " + base(out)), 0);
    ASSERT_EQ(run_cli("train grpo " + base(out)), 0);
    ASSERT_EQ(run_cli("eval " + base(out)), 0);
    ASSERT_EQ(run_cli("sample " + base(out)), 0);
    ASSERT_EQ(run_cli("report " + base(out)), 0);
  }
  EXPECT_EQ(slurp(root_ / "r1" / "embed" / "embeddings.emb").substr(0, 8), "WAMFEMB1");
  EXPECT_EQ(slurp(root_ / "r1" / "flow" / "policy.net").substr(0, 8), "WAMFNET1");
  for (const char* rel : {"embed/embeddings.emb", "embed/trace.csv", "flow/policy.net", "flow/trace.csv",
                          "grpo/policy.net", "grpo/trace.csv", "sample/samples.jsonl", "eval/scenes.jsonl",
                          "eval/scores.csv"}) {
    EXPECT_EQ(slurp(root_ / "r1" / rel), slurp(root_ / "r2" / rel)) << rel;
  }

  // Two aggregate rows whose reward is the mean of the per-scene records.
  std::ifstream metrics(root_ / "r1" / "eval" / "metrics.csv");
  std::string line;
  std::getline(metrics, line);
  EXPECT_EQ(line.rfind("# config_hash=", 0), 0u);
  std::getline(metrics, line);
  EXPECT_EQ(line, "n_steps,mean_reward,mean_pdms,mean_l2,wall_time");
  std::map<int, double> mean_reward;
  while (std::getline(metrics, line)) {
    std::stringstream ss(line);
    std::string n, r;
    std::getline(ss, n, ',');
    std::getline(ss, r, ',');
    mean_reward[std::stoi(n)] = std::stod(r);
  }
  ASSERT_EQ(mean_reward.size(), 2u);
  std::map<int, std::pair<double, int>> sums;
  std::ifstream records(root_ / "r1" / "eval" / "scenes.jsonl");
  while (std::getline(records, line)) {
    const auto j = json::parse(line);
    auto& s = sums[j["n_steps"].get<int>()];
    s.first += j["reward"].get<double>();
    s.second += 1;
  }
  for (const auto& [n, s] : sums) {
    EXPECT_EQ(s.second, 5);
    EXPECT_NEAR(mean_reward[n], s.first / s.second, 1e-12);
  }

  const auto sample_line = slurp(root_ / "r1" / "sample" / "samples.jsonl");
  const auto first = json::parse(sample_line.substr(0, sample_line.find('\n')));
  for (const char* key : {"scene_id", "n_steps", "tokens", "waypoints", "seed", "config_hash"}) EXPECT_TRUE(first.contains(key)) << key;
}

TEST_F(CliTest, EvalReportsSceneSchemaErrorsWithLineNumbers) {
  ASSERT_EQ(run_cli("gen-data " + base("s")), 0);
  ASSERT_EQ(run_cli("train embed " + base("s")), 0);
  ASSERT_EQ(run_cli("train flow " + base("s")), 0);
  const auto bad = root_ / "bad.jsonl";
  {
    std::ofstream os(bad);
    os << slurp(root_ / "s" / "data" / "test.jsonl").substr(0, slurp(root_ / "s" / "data" / "test.jsonl").find('\n') + 1);
    os << "{\"id\": 1}\n";
  }
  const std::string cmd = std::string(DFLOW_CLI) + " eval " + base("s") + " --scenes " + bad.string() + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  ASSERT_NE(pipe, nullptr);
  std::string output;
  char buf[256];
  while (fgets(buf, sizeof buf, pipe) != nullptr) output += buf;
  const int status = pclose(pipe);
  EXPECT_EQ(WEXITSTATUS(status), 1);
  EXPECT_NE(output.find("bad.jsonl:2"), std::string::npos) << output;
}

TEST_F(CliTest, OracleReward) { EXPECT_EQ(run_cli("oracle reward " + base("o")), 0); }

}  // namespace
}  // namespace dflow
