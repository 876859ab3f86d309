#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>

#include "sessionrank/manifest.hpp"
#include "support/test_util.hpp"

using namespace sessionrank;
using namespace sessionrank::testing;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run cli(const std::string& args, const TempDir& scratch) {
  const auto log = scratch / "cli.log";
  std::string cmd = std::string(SESSIONRANK_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.output = read_text(log);
  return r;
}

}  // namespace

TEST(Cli, UnknownSubcommandIsUsageError) {
  TempDir dir("cli-usage");
  auto r = cli("frobnicate", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("simgen"), std::string::npos);
  EXPECT_EQ(cli("", dir).code, 2);
  EXPECT_EQ(cli("train --data " + dir.path().string() + " --out m.bin --variant gru", dir).code, 2);
}

TEST(Cli, RuntimeErrorsExitOne) {
  TempDir dir("cli-runtime");
  auto r = cli("loadtest --port 1 --duration 1", dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("TargetUnreachable"), std::string::npos);
  write_text(dir / "bad.json", R"({"n_memberz": 3})");
  r = cli("simgen --config " + (dir / "bad.json").string() + " --out " + (dir / "x").string(), dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("n_memberz"), std::string::npos);
}

TEST(Cli, SimgenIsReproducible) {
  TempDir dir("cli-simgen");
  const std::string flags = " --members 30 --titles 200 --seed 5";
  ASSERT_EQ(cli("simgen --out " + (dir / "a").string() + flags, dir).code, 0);
  ASSERT_EQ(cli("simgen --out " + (dir / "b").string() + flags, dir).code, 0);
  for (const char* f : {"catalog.jsonl", "events.jsonl", "members.jsonl"})
    EXPECT_EQ(read_text(dir / "a" / f), read_text(dir / "b" / f)) << f;
  auto manifest = read_json_file(dir / "a" / "sim-manifest.json");
  EXPECT_EQ(manifest.at("command"), "simgen");
  EXPECT_EQ(manifest.at("seed"), 5);
  EXPECT_EQ(manifest.at("config").at("n_members"), 30);
}

TEST(Cli, TrainEvalPipeline) {
  TempDir dir("cli-pipeline");
  const auto data = (dir / "data").string();
  ASSERT_EQ(cli("simgen --out " + data + " --members 60 --titles 200 --seed 3", dir).code, 0);
  const auto model = (dir / "model.bin").string();
  const auto base = (dir / "base.bin").string();
  auto r = cli("train --quiet --epochs 1 --data " + data + " --out " + model, dir);
  ASSERT_EQ(r.code, 0) << r.output;
  ASSERT_EQ(cli("train --quiet --epochs 1 --mode baseline --data " + data + " --out " + base, dir).code, 0);
  auto metrics = read_json_file(dir / "metrics.json");
  EXPECT_EQ(metrics.at("loss_trace").size(), 1u);
  EXPECT_TRUE(std::filesystem::exists(model + ".manifest.json"));

  const auto report = (dir / "report.json").string();
  r = cli("eval --resamples 50 --data " + data + " --model " + model + " --baseline " + base + " --out " + report, dir);
  ASSERT_EQ(r.code, 0) << r.output;
  auto j = read_json_file(report);
  EXPECT_TRUE(j.at("model").at("overall").contains("mrr"));
  EXPECT_TRUE(j.contains("baseline"));
  EXPECT_FALSE(j.at("lift").empty());
  auto manifest = read_json_file(report + ".manifest.json");
  EXPECT_EQ(manifest.at("command"), "eval");
  EXPECT_FALSE(manifest.at("build_id").get<std::string>().empty());
}
