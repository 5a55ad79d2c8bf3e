#include <gtest/gtest.h>

#include <sstream>

#include "adt/commands.hpp"

namespace adt {
namespace {

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("adt_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Commands, EndToEndOnTheStitchFixture) {
  const auto root = temp_dir("e2e");
  std::ostringstream log;
  cmd::gen_data("stitch", "scripted", 3, 0, root / "data", log);
  ASSERT_TRUE(fs::exists(root / "data" / "dataset.jsonl"));
  ASSERT_TRUE(fs::exists(root / "data" / "manifest.json"));

  cmd::fit_critic(root / "data", "exact-dp", KeyValueConfig{}, root / "dp", log);
  EXPECT_TRUE(fs::exists(root / "dp" / "values.txt"));

  cmd::fit_critic(root / "data", "iql", KeyValueConfig{}, root / "iql", log);
  EXPECT_TRUE(fs::exists(root / "iql" / "critic.bin"));

  KeyValueConfig c;
  c.set("train.steps", "20");
  cmd::train("vadt", root / "data", root / "iql", c, 0, root / "vadt", log);
  EXPECT_TRUE(fs::exists(root / "vadt" / "policy.bin"));

  const auto r = cmd::eval(root / "vadt", std::nullopt, 3, 0, std::nullopt, false, root / "report", log);
  EXPECT_EQ(r.episodes.size(), 3u);
  for (const char* f : {"episodes.csv", "prompts.csv", "summary.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(root / "report" / f)) << f;

  cmd::train("dt", root / "data", std::nullopt, c, 0, root / "dt", log);
  EXPECT_THROW(cmd::eval(root / "dt", std::nullopt, 3, 0, std::nullopt, false, root / "dt_report", log), cmd::UsageError);
  EXPECT_NO_THROW(cmd::eval(root / "dt", std::nullopt, 3, 0, 10.0, false, root / "dt_report", log));
  fs::remove_all(root);
}

TEST(Commands, InputErrors) {
  const auto root = temp_dir("errors");
  std::ostringstream log;
  EXPECT_THROW(cmd::fit_critic(root / "missing", "iql", KeyValueConfig{}, root / "out", log), cmd::UsageError);
  EXPECT_THROW(cmd::gen_data("no-such-env", "scripted", 1, 0, root / "d", log), std::exception);
  EXPECT_THROW(cmd::gen_data("stitch", "telepathic", 1, 0, root / "d", log), std::exception);

  cmd::gen_data("stitch", "scripted", 3, 0, root / "data", log);
  KeyValueConfig unknown;
  unknown.set("critic.tua", "0.9");
  EXPECT_THROW(cmd::fit_critic(root / "data", "iql", unknown, root / "iql", log), ConfigError);
  EXPECT_THROW(cmd::fit_critic(root / "data", "sarsa", KeyValueConfig{}, root / "x", log), std::exception);
  EXPECT_THROW(cmd::train("vadt", root / "data", std::nullopt, KeyValueConfig{}, 0, root / "b", log), cmd::UsageError);
  EXPECT_THROW(cmd::train("vadt", root / "data", root / "nowhere", KeyValueConfig{}, 0, root / "b", log), cmd::UsageError);
  EXPECT_THROW(cmd::eval(root / "nowhere", std::nullopt, 1, 0, std::nullopt, false, root / "r", log), cmd::UsageError);
  EXPECT_THROW(cmd::ablate(root / "no_suite.txt", std::nullopt, root / "a", log), cmd::UsageError);
  fs::remove_all(root);
}

TEST(Commands, GenDataIsDeterministic) {
  const auto root = temp_dir("det");
  std::ostringstream log;
  cmd::gen_data("open5", "uniform", 5, 9, root / "a", log);
  cmd::gen_data("open5", "uniform", 5, 9, root / "b", log);
  EXPECT_EQ(read_text(root / "a" / "dataset.jsonl"), read_text(root / "b" / "dataset.jsonl"));
  cmd::gen_data("open5", "uniform", 5, 10, root / "c", log);
  EXPECT_NE(read_text(root / "a" / "dataset.jsonl"), read_text(root / "c" / "dataset.jsonl"));
  fs::remove_all(root);
}

}  // namespace
}  // namespace adt
