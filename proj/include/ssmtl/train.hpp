#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "ssmtl/detect.hpp"
#include "ssmtl/geometry.hpp"
#include "ssmtl/image.hpp"
#include "ssmtl/model.hpp"
#include "ssmtl/score.hpp"
#include "ssmtl/sequence.hpp"
#include "ssmtl/videoio.hpp"

namespace ssmtl::train {

using model::Task;

struct TrainConfig {
  std::string preset = "custom";
  model::BackboneConfig backbone;
  int epochs = 20;
  double learning_rate = 1e-3;
  int batch_size = 64;  // objects per step; every configured task sees each of them
  double val_fraction = 0.15;
  int adversarial_start_epoch = 5;
  double adversarial_scale = 0.2;
  double pseudo_ratio = 0.25;  // pseudo-anomaly images per T5 batch, relative to batch_size
  std::map<Task, double> task_weights;  // absent tasks weigh 1
  std::uint64_t seed = 0;
  int frame_stride = 1;  // keep objects on every k-th frame
  int max_objects = 0;   // 0 keeps all
  int min_box_side = 8;
  std::vector<int> skips{2, 3, 4, 5};
  int half_length = sequence::kDefaultHalfLength;
  std::uint64_t permutation_seed = 0;
  std::string detection_mode = "flow";  // detector set the preset was designed for
  score::ScoreConfig score;              // settings used for normalization statistics

  void validate() const;
  double weight(Task t) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Keys absent from `j` keep the values of the preset named by j["preset"] (custom: defaults).
void from_json(const nlohmann::json& j, TrainConfig& c);

// ssmtl: T1-T4, provider detections, no transformer. ssmtl++v1: T1+T2+T3+T5, ssmtl++v2:
// T1+T2+T3+T6, both with detector+flow and a 3-block, 12-head 3D CvT.
TrainConfig preset(const std::string& name);
std::vector<std::string> preset_names();

// --- data -------------------------------------------------------------------------------

struct CorpusObject {
  int video = 0;
  int frame = 0;
  Box box;
  std::vector<double> class_probs;
  std::vector<float> teacher_features;      // T4
  std::vector<float> teacher_segmentation;  // T7, [seg, 16, 16]
  std::vector<float> teacher_pose;          // T9, [joints, 2] normalized box coordinates
};

struct TrainData {
  std::vector<std::string> video_ids;
  std::vector<std::shared_ptr<const FrameSource>> frames;
  std::vector<CorpusObject> objects;
  std::vector<torch::Tensor> pseudo;  // [64, 64, 3] in [0, 1]
};

// Objects from per-frame detections (already fused/thresholded), subsampled per config.
TrainData build_corpus(const videoio::VideoDataset& dataset, const std::vector<std::vector<std::vector<Detection>>>& detections,
                       const TrainConfig& cfg);
// Reads <dir>/<video>.jsonl when given, else thresholded provider rows from aux/detections.
std::vector<std::vector<std::vector<Detection>>> load_training_detections(
    const videoio::VideoDataset& dataset, const std::optional<std::filesystem::path>& dir,
    const detect::DetectorConfig& det_cfg);
std::vector<torch::Tensor> load_pseudo_images(const std::filesystem::path& dir);

struct Split {
  std::vector<int> train;
  std::vector<int> val;
};

// Seeded permutation; the first round(fraction * n) indices (at least one) form validation.
Split split_train_val(int n, double fraction, std::uint64_t seed);

struct TaskBatchItem {
  Task task = Task::T1;
  torch::Tensor input;  // [T, 64, 64, 3]
  int label = -1;       // T1, T2, T8
  torch::Tensor target;  // image / map targets, T4 teacher features
  torch::Tensor class_probs;  // T4
  bool pseudo_anomaly = false;
};

std::optional<TaskBatchItem> make_item(Task task, const TrainData& data, const CorpusObject& object,
                                       sequence::Rng& rng, const TrainConfig& cfg,
                                       const sequence::PermutationSet& perms);
TaskBatchItem pseudo_item(const torch::Tensor& image, int length);

// Gaussian keypoint heatmaps [size, size, joints] from normalized (x, y) coordinates.
torch::Tensor pose_heatmaps(const std::vector<float>& keypoints, int size = sequence::kCropSize, double sigma = 2.0);

struct TaskTargets {
  torch::Tensor labels;       // int64 [n]
  torch::Tensor images;       // [n, 64, 64, C]
  torch::Tensor features;     // [n, teacher_dim]
  torch::Tensor class_probs;  // [n, num_classes]
};

TaskTargets stack_targets(Task task, const std::vector<TaskBatchItem>& items);

// Cross-entropy for T1/T2/T8, L1 for T3, MSE for T5/T6/T7/T9, MSE on features plus
// soft-label cross-entropy on class probabilities for T4.
torch::Tensor task_loss(Task task, const model::HeadOutput& out, const TaskTargets& targets);

struct LossBreakdown {
  torch::Tensor total;
  std::map<Task, double> per_task;
};

LossBreakdown multi_task_loss(const std::map<Task, model::HeadOutput>& outputs,
                              const std::map<Task, TaskTargets>& targets, const TrainConfig& cfg);

// --- optimization -----------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  std::map<Task, double> train_loss;
  std::map<Task, double> val_loss;
  double val_total = 0.0;
  int batches = 0;
  int pseudo_items = 0;
};

// One pass over `train` (seeded shuffle derived from cfg.seed and epoch).
EpochStats train_epoch(model::MultiTaskNet& net, torch::optim::Optimizer& opt, const TrainData& data,
                       const std::vector<int>& train, const TrainConfig& cfg, int epoch,
                       const sequence::PermutationSet& perms);

// Mean per-task validation loss, T5 excluded; items rebuilt from a fixed seed.
std::map<Task, double> validation_loss(model::MultiTaskNet& net, const TrainData& data, const std::vector<int>& val,
                                       const TrainConfig& cfg, const sequence::PermutationSet& perms);

int select_best_epoch(const std::vector<double>& val_totals);

struct FitResult {
  model::MultiTaskNet net{nullptr};
  int best_epoch = 0;
  std::vector<EpochStats> history;
  score::NormalizationStats norm;
  sequence::PermutationSet perms;
};

using EpochCallback = std::function<void(const EpochStats&, model::MultiTaskNet&)>;

FitResult fit(const TrainConfig& cfg, const TrainData& data, const EpochCallback& on_epoch = {});

// Raw head scores of the validation objects (for normalization statistics).
std::vector<score::HeadScoreVector> validation_scores(model::MultiTaskNet& net, const TrainData& data,
                                                      const std::vector<int>& val, const TrainConfig& cfg,
                                                      const sequence::PermutationSet& perms);

void save_result(const std::filesystem::path& file, const FitResult& result, const TrainConfig& cfg);
void write_log_csv(const std::filesystem::path& file, const std::vector<EpochStats>& history,
                   const model::TaskSet& tasks);

}  // namespace ssmtl::train
