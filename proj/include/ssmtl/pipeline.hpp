#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssmtl/detect.hpp"
#include "ssmtl/evalmetrics.hpp"
#include "ssmtl/geometry.hpp"
#include "ssmtl/model.hpp"
#include "ssmtl/score.hpp"
#include "ssmtl/videoio.hpp"

// Dataset-level glue shared by the command-line tool and the end-to-end tests.
namespace ssmtl::pipeline {

using PerFrame = std::vector<std::vector<Detection>>;  // [frame] -> detections
using DatasetDetections = std::map<std::string, PerFrame>;

// Runs the fused detector over every video. Videos are independent; `workers` > 1
// processes them concurrently with results identical to the sequential order.
DatasetDetections detect_dataset(const videoio::VideoDataset& dataset, detect::Mode mode,
                                 const detect::DetectorConfig& cfg, int workers = 1);

void write_dataset_detections(const std::filesystem::path& dir, const DatasetDetections& dets);
// Per-video <dir>/<id>.jsonl for every video of the dataset.
DatasetDetections read_dataset_detections(const std::filesystem::path& dir, const videoio::VideoDataset& dataset);
// Same, ordered like dataset.videos.
std::vector<PerFrame> ordered(const DatasetDetections& dets, const videoio::VideoDataset& dataset);

struct DatasetScores {
  std::map<std::string, score::VideoScores> videos;
};

DatasetScores score_dataset(model::MultiTaskNet& net, const videoio::VideoDataset& dataset,
                            const DatasetDetections& dets, const score::NormalizationStats& norm,
                            const sequence::PermutationSet* perms, const score::ScoreConfig& cfg);

void write_dataset_scores(const std::filesystem::path& dir, const DatasetScores& scores, const model::TaskSet& tasks);
DatasetScores read_dataset_scores(const std::filesystem::path& dir, const videoio::VideoDataset& dataset);

struct EvalReport {
  double micro_auc = 0.0;
  double macro_auc = 0.0;
  double rbdc = 0.0;
  double tbdc = 0.0;
  std::vector<std::string> skipped_videos;
  eval::CriterionParams params;
  bool has_regions = false;  // rbdc/tbdc computed (pixel masks present)

  nlohmann::json to_json() const;
};

// Frame metrics use the smoothed series; region metrics use the scored object boxes against
// tracks built from the pixel masks. Frames are concatenated in dataset order.
EvalReport evaluate(const videoio::VideoDataset& dataset, const DatasetScores& scores,
                    const eval::CriterionParams& params = {});

// Fraction of planted anomaly regions (from the per-video track files) covered by a detection
// with IoU >= iou_threshold, restricted to tracks of the given kind ("" for all).
double anomaly_recall(const videoio::VideoDataset& dataset, const DatasetDetections& dets, const std::string& kind,
                      double iou_threshold = 0.5);

}  // namespace ssmtl::pipeline
