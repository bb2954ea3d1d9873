#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "test_util.hpp"

#ifndef STEERKIT_CLI
#error "STEERKIT_CLI must name the steerkit binary"
#endif

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int status = -1;
  std::string output;  // stdout and stderr
};

CmdResult run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + STEERKIT_CLI + " " + args + " 2>&1";
  CmdResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  for (std::size_t n; (n = fread(buf, 1, sizeof buf, pipe)) > 0;) r.output.append(buf, n);
  const int st = pclose(pipe);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

int count(const std::string& s, const std::string& needle) {
  int n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

const std::string kModel = " --n-layers 8 --d-model 16 --n-heads 2 --d-ff 24 --max-seq-len 256";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    corpus_ = dir_.path() / "logs.jsonl";
    std::ofstream out(corpus_);
    for (const char* user : {"ann", "bob"}) {
      for (int i = 0; i < 5; ++i) {
        nlohmann::json j = {{"user_id", user},
                            {"ts", 100 + i},
                            {"query", std::string("tips on topic ") + std::to_string(i)},
                            {"answer", std::string(user) + " says " + std::to_string(i)}};
        out << j.dump() << "\n";
      }
    }
  }
  std::string p(const std::string& name) const { return (dir_.path() / name).string(); }

  testutil::TempDir dir_;
  fs::path corpus_;
};

}  // namespace

TEST_F(Cli, PrepareWritesOneDictPerUserDeterministically) {
  const CmdResult r = run("prepare --corpus " + corpus_.string() + " --dicts " + p("d1") + " --negatives 2" + kModel);
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("ann\t8 entries"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("bob\t8 entries"), std::string::npos);
  ASSERT_TRUE(fs::exists(p("d1/ann.fnts")));
  ASSERT_TRUE(fs::exists(p("d1/bob.fnts")));
  ASSERT_EQ(run("prepare --corpus " + corpus_.string() + " --dicts " + p("d2") + " --negatives 2" + kModel).status, 0);
  EXPECT_EQ(slurp(p("d1/ann.fnts")), slurp(p("d2/ann.fnts")));
  EXPECT_EQ(slurp(p("d1/bob.fnts")), slurp(p("d2/bob.fnts")));
  const auto manifest = nlohmann::json::parse(slurp(p("d1/prepare.manifest.json")));
  EXPECT_EQ(manifest["command"], "prepare");
  EXPECT_EQ(manifest["parameters"]["seed"], 0);
}

TEST_F(Cli, MissingCorpusFailsWithPath) {
  const CmdResult r = run("prepare --corpus " + p("nope.jsonl") + " --dicts " + p("d") + kModel);
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("nope.jsonl"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("error:"), std::string::npos);
}

TEST_F(Cli, SteerAuditAndZeroGamma) {
  ASSERT_EQ(run("prepare --corpus " + corpus_.string() + " --dicts " + p("d") + kModel).status, 0);
  const std::string base = "steer --dicts " + p("d") + " --user ann --query 'tips on topic 2' --max-new 12" + kModel;
  const CmdResult plain = run(base + " --no-steering");
  const CmdResult zero = run(base + " --gamma 0");
  ASSERT_EQ(plain.status, 0) << plain.output;
  ASSERT_EQ(zero.status, 0) << zero.output;
  EXPECT_EQ(plain.output, zero.output);
  const CmdResult audit = run(base + " --audit --topk 3 --agg mean");
  ASSERT_EQ(audit.status, 0) << audit.output;
  EXPECT_EQ(count(audit.output, "weight="), 3);
  EXPECT_NE(audit.output.find("audit layer=4 aggregation=mean"), std::string::npos) << audit.output;
  EXPECT_EQ(count(audit.output, "weight=0.333333"), 3);
  EXPECT_TRUE(fs::exists(p("d/steer.manifest.json")));
}

TEST_F(Cli, UnknownUserNeedsColdStartFlag) {
  ASSERT_EQ(run("prepare --corpus " + corpus_.string() + " --dicts " + p("d") + kModel).status, 0);
  const std::string base = "steer --dicts " + p("d") + " --user zed --query hi --max-new 4" + kModel;
  const CmdResult strict = run(base);
  EXPECT_NE(strict.status, 0);
  EXPECT_NE(strict.output.find("zed"), std::string::npos);
  const CmdResult cold = run(base + " --allow-cold-start");
  EXPECT_EQ(cold.status, 0) << cold.output;
  EXPECT_NE(cold.output.find("cold start"), std::string::npos);
}

TEST_F(Cli, TuneReportsFullGrid) {
  const CmdResult r = run("tune --corpus " + corpus_.string() + " --report " + p("tune.jsonl") + " --negatives 1 --max-new 4" +
                    kModel);
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(r.output.rfind("layer ", 0), 0u) << r.output;
  const std::string report = slurp(p("tune.jsonl"));
  EXPECT_EQ(count(report, "\n"), 48);
  std::istringstream lines(report);
  std::string first;
  std::getline(lines, first);
  const auto j = nlohmann::json::parse(first);
  EXPECT_EQ(j["layer"], 3);
  EXPECT_DOUBLE_EQ(j["gamma"].get<double>(), 0.05);
  for (const char* key : {"rouge1", "rougeL", "mean_logprob", "qualified"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_TRUE(fs::exists(p("tune.jsonl.manifest.json")));
}

TEST_F(Cli, EvalIsReproducible) {
  const std::string args = " --methods zeroshot,icl:1,steer --fractions 0.5,1 --no-tune --max-new 6 --latency 3" + kModel;
  const CmdResult a = run("eval --corpus " + corpus_.string() + " --report " + p("a.jsonl") + args);
  ASSERT_EQ(a.status, 0) << a.output;
  const CmdResult b = run("eval --corpus " + corpus_.string() + " --report " + p("b.jsonl") + args);
  ASSERT_EQ(b.status, 0) << b.output;
  const std::string report = slurp(p("a.jsonl"));
  EXPECT_EQ(report, slurp(p("b.jsonl")));
  EXPECT_EQ(count(report, "\"method\":\"zeroshot\""), 2);
  EXPECT_EQ(count(report, "\"method\":\"icl:1\""), 2);
  EXPECT_EQ(count(report, "\"method\":\"steer:attn+mlp:attentive\""), 2);
  const auto latency = nlohmann::json::parse(slurp(p("a.jsonl.latency.json")));
  EXPECT_EQ(latency["n_queries"], 3);
  EXPECT_TRUE(fs::exists(p("a.jsonl.manifest.json")));
  EXPECT_NE(a.output.find("R1@0.50"), std::string::npos);
}

TEST_F(Cli, EvalOnSyntheticCorpus) {
  const CmdResult r = run("eval --synth --users 2 --records 10 --model marker --methods zeroshot,steer --fractions 1"
                    " --no-tune --max-new 4 --report " + p("s.jsonl"));
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_NE(slurp(p("s.jsonl")).find("\"cohort\":\"subpop\""), std::string::npos);
}

TEST_F(Cli, SeedFromEnvironmentAndConfig) {
  const std::string prep = "prepare --corpus " + corpus_.string() + kModel + " --dicts ";
  ASSERT_EQ(run(prep + p("e"), "FINTS_SEED=41").status, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(p("e/prepare.manifest.json")))["parameters"]["seed"], 41);
  // The flag wins over the environment.
  ASSERT_EQ(run(prep + p("f") + " --seed 5", "FINTS_SEED=41").status, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(p("f/prepare.manifest.json")))["parameters"]["seed"], 5);
  EXPECT_NE(slurp(p("e/ann.fnts")), slurp(p("f/ann.fnts")));
  // A config file sets options; the environment does not override it.
  std::ofstream(p("run.toml")) << "seed = 9\n";
  ASSERT_EQ(run("--config " + p("run.toml") + " " + prep + p("g"), "FINTS_SEED=41").status, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(p("g/prepare.manifest.json")))["parameters"]["seed"], 9);
  const CmdResult bad = run(prep + p("h"), "FINTS_SEED=abc");
  EXPECT_NE(bad.status, 0);
  EXPECT_NE(bad.output.find("FINTS_SEED"), std::string::npos);
}

TEST_F(Cli, RejectsBadOptions) {
  EXPECT_NE(run("steer --dicts x --user u --query q --agg max").status, 0);
  EXPECT_NE(run("eval --report " + p("r.jsonl") + kModel).status, 0);
  EXPECT_NE(run("").status, 0);
  EXPECT_EQ(run("--help").status, 0);
}
