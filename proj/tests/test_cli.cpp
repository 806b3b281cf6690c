#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "geomatch/geomatch.hpp"

using namespace geomatch;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json without_wall_clock(const fs::path& p) {
  json j = json::parse(slurp(p));
  j.erase("wall_clock");
  return j;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("geomatch_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  [[nodiscard]] std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, HelpListsEveryFlagWithDefault) {
  const auto r = run({"train", "--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* flag : {"--data", "--out", "--transform", "--loss", "--corr", "--sigma", "--gamma", "--epochs",
                           "--lr", "--batch", "--seed"}) {
    EXPECT_NE(r.out.find(flag), std::string::npos) << flag;
  }
  EXPECT_NE(r.out.find("[pearson]"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("[0.5]"), std::string::npos) << r.out;
  for (const char* sub : {"gen-corpus", "gen-data", "eval", "warp", "match", "ablate", "gradcheck"}) {
    const auto h = run({sub, "--help"});
    EXPECT_EQ(h.code, 0) << sub;
    EXPECT_NE(h.out.find("--"), std::string::npos) << sub;
  }
  EXPECT_NE(run({"gen-data", "--help"}).out.find("[0.25]"), std::string::npos);
}

TEST_F(CliTest, UsageErrorsExitOne) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"gen-corpus", "--out", path("c"), "--bogus-flag", "3"}).code, 1);
  EXPECT_EQ(run({"gen-corpus"}).code, 1);
  EXPECT_EQ(run({"gradcheck", "--module", "nothing"}).code, 1);
  EXPECT_EQ(run({"warp", "--image", path("x.png"), "--params", "1,2,3", "--out", path("y.png")}).code, 1);
}

TEST_F(CliTest, DataErrorsExitTwo) {
  EXPECT_EQ(run({"gen-data", "--corpus", path("missing"), "--out", path("d")}).code, 2);
  fs::create_directories(path("empty"));
  EXPECT_EQ(run({"eval", "--data", path("empty"), "--ckpt", path("none.ckpt")}).code, 2);
}

TEST_F(CliTest, GenerationIsReproducible) {
  ASSERT_EQ(run({"gen-corpus", "--out", path("corpus"), "--count", "3", "--size", "24", "--seed", "5"}).code, 0);
  EXPECT_TRUE(fs::exists(path("corpus/img_000002.png")));
  for (const char* d : {"a", "b"}) {
    const auto r = run({"gen-data", "--corpus", path("corpus"), "--out", path(d), "--count", "6", "--seed", "9"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(json::parse(r.out).at("samples"), 6);
  }
  EXPECT_EQ(slurp(path("a/manifest.jsonl")), slurp(path("b/manifest.jsonl")));
  EXPECT_EQ(slurp(path("a/images/warp_000005.png")), slurp(path("b/images/warp_000005.png")));
  auto ma = without_wall_clock(path("a/run_manifest.json"));
  auto mb = without_wall_clock(path("b/run_manifest.json"));
  EXPECT_EQ(ma.at("config").at("max_perturb"), 0.25);
  EXPECT_EQ(ma.at("seed"), 9);
  EXPECT_EQ(ma.at("command"), "gen-data");
  ma["config"].erase("out");
  mb["config"].erase("out");
  ma.erase("artifacts");
  mb.erase("artifacts");
  EXPECT_EQ(ma, mb);
}

TEST_F(CliTest, WarpIdentityReproducesImageWithin8Bit) {
  write_png(path("in.png"), gen_toy_image(3, 32));
  const auto r = run({"warp", "--image", path("in.png"), "--params", "1,0,0,0,1,0,0,0,1", "--out", path("out.png")});
  ASSERT_EQ(r.code, 0) << r.err;
  const Image a = read_png(path("in.png")), b = read_png(path("out.png"));
  ASSERT_TRUE(a.same_shape(b));
  for (std::size_t i = 0; i < a.data.size(); ++i) ASSERT_NEAR(a.data[i], b.data[i], 0.5 / 255.0 + 1e-9);
  EXPECT_TRUE(fs::exists(path("out.png.manifest.json")));
}

TEST_F(CliTest, EvalIdentityCheckpointOnIdentityData) {
  ASSERT_EQ(run({"gen-corpus", "--out", path("corpus"), "--count", "2", "--size", "16"}).code, 0);
  ASSERT_EQ(run({"gen-data", "--corpus", path("corpus"), "--out", path("data"), "--count", "4", "--max-perturb",
                 "0"}).code,
            0);
  auto ckpt = constant_model({{4, 8}, false, 16}, RegressorSpec{TransformKind::Homography, false, 4, {}});
  ckpt.network.init_random(1);
  for (auto& t : ckpt.network.tensors()) {
    if (t.name.rfind("regressor.", 0) == 0) std::fill(t.data.begin(), t.data.end(), 0.0);
  }
  save_checkpoint(path("id.ckpt"), ckpt);
  const auto r = run({"eval", "--data", path("data"), "--ckpt", path("id.ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(r.out);
  EXPECT_EQ(j.at("pck"), 1.0);
  EXPECT_EQ(j.at("n_keypoints"), 4 * 400);
  EXPECT_TRUE(fs::exists(path("id.ckpt.eval.manifest.json")));
}

TEST_F(CliTest, TrainMatchAndTwoStagePipeline) {
  ASSERT_EQ(run({"gen-corpus", "--out", path("corpus"), "--count", "4", "--size", "16"}).code, 0);
  ASSERT_EQ(run({"gen-data", "--corpus", path("corpus"), "--out", path("data"), "--count", "6"}).code, 0);
  const std::vector<std::string> small{"--epochs", "2", "--batch", "3", "--channels", "4,8", "--reg-channels", "4"};
  auto train_args = [&](std::vector<std::string> a) {
    a.insert(a.end(), small.begin(), small.end());
    return a;
  };
  auto r = run(train_args({"train", "--data", path("data"), "--out", path("h.ckpt")}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out).at("loss_trace").size(), 2u);
  const auto first = slurp(path("h.ckpt"));
  ASSERT_EQ(run(train_args({"train", "--data", path("data"), "--out", path("h2.ckpt")})).code, 0);
  EXPECT_EQ(first, slurp(path("h2.ckpt")));

  EXPECT_EQ(run(train_args({"train", "--data", path("data"), "--out", path("t.ckpt"), "--transform", "tps",
                            "--loss", "mse"}))
                .code,
            1);
  r = run(train_args({"train", "--data", path("data"), "--out", path("t.ckpt"), "--transform", "tps",
                      "--stage1", path("h.ckpt")}));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto manifest = without_wall_clock(path("t.ckpt.manifest.json"));
  EXPECT_EQ(manifest.at("config").at("train").at("loss"), "weighted");

  r = run({"eval", "--data", path("data"), "--ckpt", path("h.ckpt"), "--ckpt2", path("t.ckpt")});
  ASSERT_EQ(r.code, 0) << r.err;
  const double pck = json::parse(r.out).at("pck");
  EXPECT_GE(pck, 0.0);
  EXPECT_LE(pck, 1.0);

  r = run({"match", "--source", path("data/images/src_000000.png"), "--target", path("data/images/warp_000000.png"),
           "--ckpt", path("h.ckpt"), "--ckpt2", path("t.ckpt"), "--out", path("m.png"), "--dump-transform",
           path("m.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto dumped = json::parse(slurp(path("m.json")));
  EXPECT_EQ(dumped.at("first").at("kind"), "homography");
  EXPECT_EQ(dumped.at("second").at("params").size(), 18u);
  EXPECT_EQ(read_png(path("m.png")).height, 16);
}

TEST_F(CliTest, AblateWritesReport) {
  ASSERT_EQ(run({"gen-corpus", "--out", path("corpus"), "--count", "4", "--size", "16"}).code, 0);
  ASSERT_EQ(run({"gen-data", "--corpus", path("corpus"), "--out", path("data"), "--count", "8"}).code, 0);
  const auto r = run({"ablate", "--data", path("data"), "--seeds", "0,1,2", "--out", path("abl"), "--epochs", "1",
                      "--channels", "4,8", "--reg-channels", "4", "--test-fraction", "0.25"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out).at("median_pck").size(), 5u);
  EXPECT_EQ(slurp(path("abl/ablation.csv")).substr(0, 26), "config,seed,pck,runtime_s\n");
  EXPECT_EQ(run({"ablate", "--data", path("data"), "--seeds", "0,1", "--out", path("abl")}).code, 1);
}

TEST_F(CliTest, GradcheckBinaryExitsZero) {
  const std::string cmd = std::string(GEOMATCH_CLI_PATH) + " gradcheck --module all --manifest " +
                          path("gc.json") + " > " + path("gc.out") + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  const auto report = json::parse(slurp(path("gc.out")));
  EXPECT_TRUE(report.at("passed").get<bool>());
  for (const auto& row : report.at("checks")) EXPECT_LT(row.at("max_rel_error").get<double>(), 1e-4) << row;

  const std::string bad = std::string(GEOMATCH_CLI_PATH) + " eval --nope 2>/dev/null >/dev/null";
  const int bad_status = std::system(bad.c_str());
  ASSERT_TRUE(WIFEXITED(bad_status));
  EXPECT_EQ(WEXITSTATUS(bad_status), 1);
}
