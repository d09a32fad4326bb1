#include <gtest/gtest.h>
#include <sys/wait.h>

#include <fstream>

#include "amc/pipeline.hpp"

using namespace amc;
namespace fs = std::filesystem;

namespace {

const fs::path kTiny = fs::path(AMC_SOURCE_DIR) / "configs" / "tiny.json";

struct Run {
  int code;
  std::string err;
};

Run cli(const std::string& args, const fs::path& work) {
  fs::create_directories(work);
  const auto err = work / "stderr.txt";
  const std::string cmd = std::string("'") + AMC_CLI + "' " + args + " >/dev/null 2>'" + err.string() + "'";
  const int rc = std::system(cmd.c_str());
  std::ifstream in(err);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return {WIFEXITED(rc) ? WEXITSTATUS(rc) : -1, text};
}

fs::path fresh(const std::string& name) {
  auto p = fs::temp_directory_path() / ("amc_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string on(const fs::path& work, const fs::path& cfg = kTiny) {
  return "--config '" + cfg.string() + "' --workdir '" + work.string() + "'";
}

fs::path write_config(const fs::path& dir, const pipeline::Json& j) {
  fs::create_directories(dir);
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

}  // namespace

TEST(Cli, GenDataTwiceGivesIdenticalHashes) {
  const auto a = fresh("gen_a"), b = fresh("gen_b");
  ASSERT_EQ(cli("gen-data --seed 7 " + on(a), a).code, 0);
  ASSERT_EQ(cli("gen-data --seed 7 " + on(b), b).code, 0);
  EXPECT_EQ(io::file_sha256(a / "data/pool.amcd"), io::file_sha256(b / "data/pool.amcd"));
  EXPECT_EQ(io::file_sha256(a / "data/manifest.json"), io::file_sha256(b / "data/manifest.json"));
  ASSERT_EQ(cli("gen-data --seed 8 " + on(b), b).code, 0);
  EXPECT_NE(io::file_sha256(a / "data/pool.amcd"), io::file_sha256(b / "data/pool.amcd"));
}

TEST(Cli, UnknownFlagExitsTwo) {
  const auto w = fresh("flag");
  const auto r = cli("gen-data --bogus 1 " + on(w), w);
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error: usage: ", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  EXPECT_EQ(cli("frobnicate " + on(w), w).code, 2);
}

TEST(Cli, InvalidConfigExitsThree) {
  const auto w = fresh("badcfg");
  auto j = pipeline::read_json(kTiny);
  j["data"]["colour"] = "blue";
  auto r = cli("gen-data " + on(w, write_config(w, j)), w);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("data.colour"), std::string::npos) << r.err;
  j = pipeline::read_json(kTiny);
  j["meta"]["alpha"] = -1.0;
  EXPECT_EQ(cli("gen-data " + on(w, write_config(w, j)), w).code, 3);
  std::ofstream(w / "broken.json") << "{ not json";
  EXPECT_EQ(cli("gen-data " + on(w, w / "broken.json"), w).code, 3);
}

TEST(Cli, MissingArtifactIsARuntimeFailure) {
  const auto w = fresh("missing");
  const auto r = cli("train-substitutes " + on(w), w);
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error: runtime: ", 0), 0u) << r.err;
}

TEST(Cli, FullPipelineProducesRequestedShotColumns) {
  const auto w = fresh("full");
  for (const char* s : {"gen-data", "train-substitutes", "gen-tasks", "meta-train"}) {
    ASSERT_EQ(cli(std::string(s) + " " + on(w), w).code, 0) << s;
  }
  ASSERT_EQ(cli("adapt --baseline maml --shots 2 " + on(w), w).code, 0);
  const auto out = w / "out" / "report.json";
  ASSERT_EQ(cli("evaluate --shots 0,2,10 --out '" + out.string() + "' " + on(w), w).code, 0);
  const auto r = harness::report_from_json(pipeline::read_artifact_json(out));
  std::set<std::size_t> shots;
  for (const auto& c : r.cells) shots.insert(c.shots);
  EXPECT_EQ(shots, (std::set<std::size_t>{0, 2, 10}));
  EXPECT_TRUE(fs::exists(w / "out" / "report.csv"));
  EXPECT_TRUE(fs::exists(w / "out" / "manifest.json"));
  EXPECT_EQ(cli("report --in '" + out.string() + "' " + on(w), w).code, 0);
  EXPECT_TRUE(fs::exists(w / "report" / "summary.txt"));
  // Unknown baseline for adapt.
  EXPECT_EQ(cli("adapt --baseline nobody " + on(w), w).code, 1);
}

TEST(Config, HashFollowsContent) {
  const auto j = pipeline::read_json(kTiny);
  const auto a = pipeline::parse_config(j);
  EXPECT_EQ(a.hash(), pipeline::parse_config(j).hash());
  auto k = j;
  k["data"]["seed"] = 99;
  EXPECT_NE(pipeline::parse_config(k).hash(), a.hash());
}

TEST(Config, PerAlgorithmOverrides) {
  auto j = pipeline::read_json(kTiny);
  j["meta"]["outer_iters"] = {{"maml", 7}, {"reptile", 9}};
  j["meta"]["beta"] = {{"reptile", 0.5}};
  const auto c = pipeline::parse_config(j);
  EXPECT_EQ(c.meta.config_for(meta::Algorithm::MAML).outer_iters, 7u);
  EXPECT_EQ(c.meta.config_for(meta::Algorithm::Reptile).outer_iters, 9u);
  EXPECT_EQ(c.meta.config_for(meta::Algorithm::FOMAML).outer_iters, c.meta.base.outer_iters);
  EXPECT_DOUBLE_EQ(c.meta.config_for(meta::Algorithm::Reptile).beta, 0.5);
  j["meta"]["outer_iters"] = {{"sgd", 7}};
  EXPECT_THROW(pipeline::parse_config(j), ConfigError);
}

TEST(Config, RejectsBadTypesAndValues) {
  const auto base = pipeline::read_json(kTiny);
  auto bad = [&](auto mutate) {
    auto j = base;
    mutate(j);
    EXPECT_THROW(pipeline::parse_config(j), ConfigError) << j.dump();
  };
  bad([](auto& j) { j["data"]["seed"] = "seven"; });
  bad([](auto& j) { j["zoo"]["members"] = pipeline::Json::array(); });
  bad([](auto& j) { j["zoo"]["members"][0]["arch"] = "transformer"; });
  bad([](auto& j) { j["attacks"]["entries"][0]["method"] = "DEEPFOOL"; });
  bad([](auto& j) { j["attacks"]["entries"][0]["norm"] = 1; });
  bad([](auto& j) { j["meta"]["algorithms"] = {"sgd"}; });
  bad([](auto& j) { j["meta"]["init"] = "pretrained"; });
  bad([](auto& j) { j["eval"]["shots"] = pipeline::Json::array(); });
  bad([](auto& j) { j["eval"]["scratch"]["epochs"] = 0; });
  bad([](auto& j) { j["extra"] = 1; });
}
