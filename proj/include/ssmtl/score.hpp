#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "ssmtl/geometry.hpp"
#include "ssmtl/image.hpp"
#include "ssmtl/model.hpp"
#include "ssmtl/sequence.hpp"

namespace ssmtl::score {

using model::Task;
using HeadScoreVector = std::map<Task, double>;

// Heads whose raw score is a distance (unbounded) rather than a probability.
bool is_distance_head(Task task);  // T3, T4, T6
// Heads that contribute an inference score (T5, T7, T9 do not).
bool has_score_rule(Task task);

struct ScoreConfig {
  int inpaint_passes = 3;
  double smoothing_sigma = 5.0;  // frames
  double smoothing_truncate = 4.0;
  std::string frame_reduce = "max";  // max | mean
  int batch_size = 64;
  int half_length = sequence::kDefaultHalfLength;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ScoreConfig& c);
void from_json(const nlohmann::json& j, ScoreConfig& c);

// Per distance head, the 99.9th percentile of validation scores.
struct NormalizationStats {
  std::map<Task, double> scale;

  bool operator==(const NormalizationStats&) const = default;
};

void to_json(nlohmann::json& j, const NormalizationStats& s);
void from_json(const nlohmann::json& j, NormalizationStats& s);

// Linear-interpolation percentile (q in [0, 100]) of a nonempty sample.
double percentile(std::vector<double> values, double q);

NormalizationStats compute_normalization(const std::vector<HeadScoreVector>& validation_scores,
                                         double q = 99.9);

// One object to score: its forward consecutive sequence plus the detector's class
// probabilities (empty when the source has none).
struct ObjectInput {
  torch::Tensor crops;  // [T, 64, 64, 3]
  std::vector<double> class_probs;
};

// Mask-reconstruct rounds with fresh masks; returns per-image mean squared distance
// between the original and the last reconstruction. images: [N, 64, 64, 3].
using ImageModel = std::function<torch::Tensor(const torch::Tensor&)>;
std::vector<double> iterative_inpaint_scores(const ImageModel& model, const torch::Tensor& images, int passes,
                                             sequence::Rng& rng);
double iterative_inpaint_score(const ImageModel& model, const torch::Tensor& image, int passes,
                               sequence::Rng& rng);

// Raw per-head scores for every object (tasks with a score rule only). Random draws (T6
// masks, T8 permutations) come from `rng` in object order.
std::vector<HeadScoreVector> head_scores(model::MultiTaskNet& net, const std::vector<ObjectInput>& objects,
                                         const sequence::PermutationSet* perms, const ScoreConfig& cfg,
                                         sequence::Rng& rng);

// Scoring rules on head outputs, exposed for direct checks.
double arrow_score(const torch::Tensor& probs);         // P(backward)
double irregularity_score(const torch::Tensor& probs);  // P(intermittent)
double reconstruction_mae(const torch::Tensor& prediction, const torch::Tensor& target);
double class_prob_delta(const torch::Tensor& predicted, const std::vector<double>& detector);
double jigsaw_score(const torch::Tensor& probs, int correct);  // 1 - p_correct

// Mean over heads; distance heads divided by their scale then clipped to [0, 1].
double object_score(const HeadScoreVector& v, const NormalizationStats& norm);
HeadScoreVector normalized(const HeadScoreVector& v, const NormalizationStats& norm);

// scipy.ndimage.gaussian_filter1d semantics: radius int(truncate*sigma+0.5), "reflect" boundary.
std::vector<double> gaussian_smooth(const std::vector<double>& x, double sigma, double truncate = 4.0);

struct ScoredObject {
  int frame = 0;
  Box box;
  double score = 0.0;
  HeadScoreVector heads;  // normalized
};

struct ScoreSeries {
  std::vector<double> raw;
  std::vector<double> smoothed;
  std::vector<int> n_objects;
  std::vector<HeadScoreVector> heads;  // heads of the frame's top object; empty when none
};

ScoreSeries frame_series(const std::vector<ScoredObject>& objects, int frame_count, const ScoreConfig& cfg);

// Scores every detection of one video.
struct VideoScores {
  std::vector<ScoredObject> objects;
  ScoreSeries series;
};

VideoScores score_video(model::MultiTaskNet& net, const FrameSource& frames,
                        const std::vector<std::vector<Detection>>& detections, const NormalizationStats& norm,
                        const sequence::PermutationSet* perms, const ScoreConfig& cfg, std::uint64_t video_seed);

void write_series_csv(const std::filesystem::path& file, const ScoreSeries& series, const model::TaskSet& tasks);
ScoreSeries read_series_csv(const std::filesystem::path& file);
void write_objects_jsonl(const std::filesystem::path& file, const std::vector<ScoredObject>& objects);
std::vector<ScoredObject> read_objects_jsonl(const std::filesystem::path& file);

}  // namespace ssmtl::score
