#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "ssmtl/score.hpp"
#include "ssmtl/videoio.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ssmtl;

namespace {

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(SSMTL_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// One small generated dataset shared by the whole suite.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testutil::TempDir();
    std::ofstream(root() / "scene.json") << json{{"train_videos", 1}, {"test_videos", 2}, {"frames", 60},
                                                 {"anomaly_length", 20}, {"pseudo_images", 8}}
                                                .dump();
    ASSERT_EQ(run("synth-generate --config " + (root() / "scene.json").string() + " --seed 4 --out " + data().string(),
                  root() / "gen.log"),
              0)
        << slurp(root() / "gen.log");
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path root() { return dir_->path(); }
  static fs::path data() { return dir_->path() / "data"; }

  static testutil::TempDir* dir_;
};

testutil::TempDir* Cli::dir_ = nullptr;

}  // namespace

TEST_F(Cli, GenerateWritesDatasetAndManifest) {
  EXPECT_TRUE(fs::exists(data() / "synth_config.json"));
  const auto m = read_json(data() / "manifest.json");
  EXPECT_EQ(m.at("command"), "synth-generate");
  EXPECT_EQ(m.at("seed"), 4);
  EXPECT_EQ(m.at("anomalies").size(), 2u);
}

TEST_F(Cli, DetectModesWriteOneFilePerVideo) {
  for (const std::string mode : {"provider", "flow", "flow+background"}) {
    const auto out = root() / ("det_" + mode);
    ASSERT_EQ(run("detect --data " + data().string() + " --mode " + mode + " --out " + out.string(), root() / "d.log"), 0)
        << slurp(root() / "d.log");
    const auto ds = videoio::load_dataset(data(), "test");
    for (const auto& v : ds.videos) EXPECT_TRUE(fs::exists(out / (v.id + ".jsonl"))) << v.id;
    EXPECT_EQ(read_json(out / "manifest.json").at("config").at("mode"), mode);
  }
}

TEST_F(Cli, TrainScoreEvalPipeline) {
  std::ofstream(root() / "train.json")
      << json{{"epochs", 1}, {"adversarial_start_epoch", 0}, {"frame_stride", 6}, {"batch_size", 8}}.dump();
  const auto model = root() / "model";
  ASSERT_EQ(run("train --data " + data().string() + " --preset ssmtl++v1 --config " + (root() / "train.json").string() +
                    " --seed 1 --out " + model.string(),
                root() / "train.log"),
            0)
      << slurp(root() / "train.log");
  const auto m = read_json(model / "manifest.json");
  EXPECT_EQ(m.at("tasks"), (json{"T1", "T2", "T3", "T5"}));
  EXPECT_EQ(m.at("preset"), "ssmtl++v1");
  EXPECT_TRUE(fs::exists(model / "train_log.csv"));

  const auto scores = root() / "scores";
  ASSERT_EQ(run("score --data " + data().string() + " --checkpoint " + (model / "model.ckpt").string() + " --out " +
                    scores.string(),
                root() / "score.log"),
            0)
      << slurp(root() / "score.log");
  ASSERT_EQ(run("eval --data " + data().string() + " --scores " + scores.string() + " --out " + (root() / "eval").string(),
                root() / "eval.log"),
            0)
      << slurp(root() / "eval.log");
  const auto report = read_json(root() / "eval" / "eval.json");
  for (const char* key : {"micro_auc", "macro_auc", "rbdc", "tbdc"}) {
    ASSERT_TRUE(report.at(key).is_number()) << key;
    EXPECT_GE(report.at(key).get<double>(), 0.0);
    EXPECT_LE(report.at(key).get<double>(), 1.0);
  }

  ASSERT_EQ(run("plot --data " + data().string() + " --scores " + scores.string() + " --out " + (root() / "plot").string(),
                root() / "plot.log"),
            0)
      << slurp(root() / "plot.log");
  const auto ds = videoio::load_dataset(data(), "test");
  for (const auto& v : ds.videos) {
    EXPECT_TRUE(fs::exists(root() / "plot" / (v.id + ".png")));
    EXPECT_TRUE(fs::exists(root() / "plot" / (v.id + ".csv")));
  }
}

TEST_F(Cli, EvalOfPerfectScoresIsOne) {
  const auto ds = videoio::load_dataset(data(), "test");
  const auto scores = root() / "perfect";
  fs::create_directories(scores);
  for (const auto& v : ds.videos) {
    const auto gt = videoio::load_ground_truth(ds, v.id);
    score::ScoreSeries s;
    for (auto l : gt.labels) {
      s.raw.push_back(l);
      s.smoothed.push_back(l);
      s.n_objects.push_back(l);
      s.heads.emplace_back();
    }
    std::vector<score::ScoredObject> objects;
    for (const auto& t : videoio::read_tracks(ds.layout().tracks_file(v.id)))
      for (const auto& r : t.regions) objects.push_back({r.frame, r.box, 1.0, {}});
    score::write_series_csv(scores / (v.id + ".csv"), s, {});
    score::write_objects_jsonl(scores / (v.id + ".objects.jsonl"), objects);
  }
  ASSERT_EQ(run("eval --data " + data().string() + " --scores " + scores.string() + " --out " +
                    (root() / "perfect_eval").string(),
                root() / "pe.log"),
            0)
      << slurp(root() / "pe.log");
  const auto report = read_json(root() / "perfect_eval" / "eval.json");
  EXPECT_EQ(report.at("micro_auc").get<double>(), 1.0);
  EXPECT_EQ(report.at("macro_auc").get<double>(), 1.0);
  EXPECT_EQ(report.at("rbdc").get<double>(), 1.0);
  EXPECT_EQ(report.at("tbdc").get<double>(), 1.0);
}

TEST_F(Cli, UsageErrorsExitWithTwo) {
  const auto log = root() / "usage.log";
  EXPECT_EQ(run("train --data " + data().string() + " --preset bogus --out " + (root() / "x").string(), log), 2);
  EXPECT_EQ(run("detect --data " + data().string() + " --frobnicate --out " + (root() / "x").string(), log), 2);
  EXPECT_EQ(run("detect --data " + data().string(), log), 2);
  EXPECT_EQ(run("", log), 2);
  EXPECT_FALSE(fs::exists(root() / "x"));
  EXPECT_EQ(run("--version", log), 0);
}

TEST_F(Cli, BadConfigExitsNonZero) {
  std::ofstream(root() / "bad.json") << "{ not json";
  EXPECT_EQ(run("detect --data " + data().string() + " --config " + (root() / "bad.json").string() + " --out " +
                    (root() / "y").string(),
                root() / "bad.log"),
            1);
  std::ofstream(root() / "neg.json") << json{{"epochs", -3}}.dump();
  EXPECT_EQ(run("train --data " + data().string() + " --config " + (root() / "neg.json").string() + " --out " +
                    (root() / "y").string(),
                root() / "bad.log"),
            1);
  EXPECT_FALSE(fs::exists(root() / "y"));
}

TEST_F(Cli, FailedCommandRemovesPartialOutputs) {
  const auto ds = videoio::load_dataset(data(), "test");
  const auto scores = root() / "short";
  fs::create_directories(scores);
  score::ScoreSeries s;
  s.raw = s.smoothed = {0.0, 1.0};
  s.n_objects = {0, 0};
  s.heads.resize(2);
  for (const auto& v : ds.videos) score::write_series_csv(scores / (v.id + ".csv"), s, {});
  const auto out = root() / "partial";
  EXPECT_EQ(run("eval --data " + data().string() + " --scores " + scores.string() + " --out " + out.string(),
                root() / "partial.log"),
            1);
  EXPECT_FALSE(fs::exists(out));
  // Pre-existing output directories survive a failure.
  fs::create_directories(out);
  std::ofstream(out / "keep.txt") << "x";
  EXPECT_EQ(run("eval --data " + data().string() + " --scores " + scores.string() + " --out " + out.string(),
                root() / "partial.log"),
            1);
  EXPECT_TRUE(fs::exists(out / "keep.txt"));
  EXPECT_FALSE(fs::exists(out / "eval.json"));
}
