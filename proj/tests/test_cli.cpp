#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

fs::path scratch() {
  static const fs::path root = [] {
    auto p = fs::temp_directory_path() / ("scin_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Result run(const std::string& args) {
  const auto log = scratch() / "last.log";
  const std::string cmd = std::string("\"") + SCIN_LAB_EXE + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

std::vector<std::string> verdicts(const std::string& summary) {
  std::vector<std::string> v;
  std::istringstream in(summary);
  for (std::string line; std::getline(in, line);) {
    for (const char* w : {"PASS", "FAIL", "SKIP"})
      if (line.find(std::string(": ") + w) != std::string::npos) v.push_back(line.substr(0, line.find(':')) + w);
  }
  return v;
}

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) { EXPECT_EQ(run("").code, 2); }

TEST(Cli, GenDataIsByteIdenticalAndSized) {
  const auto d1 = scratch() / "gen1", d2 = scratch() / "gen2";
  const std::string common = " --profile smoke --cohorts a,b,c --samples 60 --out ";
  auto r1 = run("gen-data" + common + "\"" + d1.string() + "\"");
  ASSERT_EQ(r1.code, 0) << r1.out;
  auto r2 = run("gen-data" + common + "\"" + d2.string() + "\"");
  ASSERT_EQ(r2.code, 0) << r2.out;
  const auto m1 = slurp(d1 / "manifest.json");
  EXPECT_EQ(m1, slurp(d2 / "manifest.json"));
  const auto m = json::parse(m1);
  EXPECT_EQ(m["samples"].size(), 180u);
  EXPECT_EQ(m["cohorts"].size(), 3u);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(d1 / "samples")) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(d2 / "samples" / e.path().filename()));
  }
  EXPECT_EQ(files, 180u);
}

TEST(Cli, MalformedConfigNamesFieldAndExitsTwo) {
  const auto cfg = scratch() / "bad.json";
  std::ofstream(cfg) << R"({"model": {"depth": "three"}})";
  auto r = run("gen-data --config \"" + cfg.string() + "\" --out \"" + (scratch() / "never").string() + "\"");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("model.depth"), std::string::npos) << r.out;
  std::ofstream(cfg) << R"({"data": {"cohorts": {"a": {"radius": 2}}}})";
  r = run("gen-data --config \"" + cfg.string() + "\" --out \"" + (scratch() / "never").string() + "\"");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("data.cohorts.a.radius"), std::string::npos) << r.out;
  EXPECT_FALSE(fs::exists(scratch() / "never"));
}

TEST(Cli, GradcheckRefusesFloat) {
  auto r = run("gradcheck --precision float");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("double"), std::string::npos) << r.out;
}

TEST(Cli, TrainThenEvalSelectsThresholdOnValidation) {
  const auto data = scratch() / "te-data";
  ASSERT_EQ(run("gen-data --profile smoke --cohorts a --out \"" + data.string() + "\"").code, 0);
  const auto tdir = scratch() / "te-train";
  auto r = run("train --profile smoke --data \"" + data.string() + "\" --mode single:trial-A --epochs 1 --run-dir \"" +
               tdir.string() + "\"");
  ASSERT_EQ(r.code, 0) << r.out;
  ASSERT_TRUE(fs::exists(tdir / "model.ckpt"));
  const auto rec = json::parse(slurp(tdir / "run.json"));
  EXPECT_EQ(rec["command"], "train");
  EXPECT_TRUE(rec.contains("config_hash"));

  const auto edir = scratch() / "te-eval";
  r = run("eval --data \"" + data.string() + "\" --checkpoint \"" + (tdir / "model.ckpt").string() +
          "\" --cohort trial-A --run-dir \"" + edir.string() + "\"");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rep = json::parse(slurp(edir / "report.json"));
  const auto manifest = json::parse(slurp(data / "manifest.json"));
  EXPECT_EQ(rep["threshold_selected_on"], manifest["cohorts"][0]["split"]["val"]);
  EXPECT_EQ(rep["conditioned_on"], "shared");

  // an existing run directory is never overwritten
  r = run("eval --data \"" + data.string() + "\" --checkpoint \"" + (tdir / "model.ckpt").string() +
          "\" --cohort trial-A --run-dir \"" + edir.string() + "\"");
  EXPECT_EQ(r.code, 2) << r.out;
  r = run("eval --data \"" + data.string() + "\" --checkpoint \"" + (tdir / "model.ckpt").string() +
          "\" --cohort trial-Z --run-dir \"" + (scratch() / "te-eval2").string() + "\"");
  EXPECT_EQ(r.code, 2) << r.out;
}

TEST(Cli, SmokeExperimentWritesArtifactsAndReproduces) {
  const auto first = scratch() / "exp1", second = scratch() / "exp2";
  auto r1 = run("experiment --profile smoke --auto-generate --run-dir \"" + first.string() + "\"");
  ASSERT_TRUE(r1.code == 0 || r1.code == 1) << r1.out;
  for (const char* f : {"tables.json", "table1.txt", "table2.txt", "table3.txt", "summary.txt", "run.json",
                        "data/manifest.json"})
    EXPECT_TRUE(fs::exists(first / f)) << f;
  EXPECT_FALSE(fs::is_empty(first / "checkpoints"));
  EXPECT_FALSE(fs::exists(fs::path(first.string() + ".partial")));

  auto r2 = run("experiment --profile smoke --data \"" + (first / "data").string() + "\" --compare \"" +
                first.string() + "\" --run-dir \"" + second.string() + "\"");
  ASSERT_TRUE(r2.code == 0 || r2.code == 1) << r2.out;
  auto v1 = verdicts(slurp(first / "summary.txt")), v2 = verdicts(slurp(second / "summary.txt"));
  ASSERT_EQ(v1.size(), 7u);
  ASSERT_EQ(v2.size(), 7u);
  EXPECT_EQ(std::vector<std::string>(v1.begin(), v1.end() - 1), std::vector<std::string>(v2.begin(), v2.end() - 1));
  EXPECT_NE(v2.back().find("PASS"), std::string::npos) << slurp(second / "summary.txt");
  for (const char* f : {"tables.json", "table1.txt", "table2.txt", "table3.txt"})
    EXPECT_EQ(slurp(first / f), slurp(second / f)) << f;
}

TEST(Cli, FinetuneHonoursCohortAndKeepsBackbone) {
  const auto data = scratch() / "ft-data";
  ASSERT_EQ(run("gen-data --profile smoke --cohorts a,c --out \"" + data.string() + "\"").code, 0);
  const auto tdir = scratch() / "ft-train";
  ASSERT_EQ(run("train --profile smoke --data \"" + data.string() + "\" --mode single:trial-A --epochs 1 --run-dir \"" +
                tdir.string() + "\"")
                .code,
            0);
  const auto fdir = scratch() / "ft-run";
  auto r = run("finetune --profile smoke --data \"" + data.string() + "\" --checkpoint \"" +
               (tdir / "model.ckpt").string() +
               "\" --cohort trial-C --source site-C --samples 2 --epochs 1 --run-dir \"" + fdir.string() + "\"");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto rec = json::parse(slurp(fdir / "run.json"));
  EXPECT_TRUE(rec["backbone_bit_identical"].get<bool>());
  ASSERT_EQ(rec["samples"].size(), 2u);
  for (const auto& id : rec["samples"]) EXPECT_EQ(id.get<std::string>().rfind("trial-C-", 0), 0u) << id;
  EXPECT_EQ(rec["meta"]["cohort_to_source"]["trial-C"], "site-C");
}
