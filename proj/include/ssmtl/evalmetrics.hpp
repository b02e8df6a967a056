#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssmtl/geometry.hpp"
#include "ssmtl/image.hpp"

namespace ssmtl::eval {

// ROC AUC via a threshold sweep over distinct scores with trapezoidal integration; equal to
// the Mann-Whitney statistic P(s+ > s-) + P(s+ = s-)/2. Throws UndefinedAucError when only
// one class is present.
double micro_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct VideoScoresLabels {
  std::string video;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
};

struct MacroAuc {
  double value = 0.0;
  int used_videos = 0;
  std::vector<std::string> skipped_videos;  // single-class videos, AUC undefined
};

MacroAuc macro_auc(const std::vector<VideoScoresLabels>& videos);

struct RegionPrediction {
  int frame = 0;
  Box box;
  double score = 0.0;
};

using GroundTruthTrack = Track;

// Per-frame connected components linked frame-to-frame by maximal box IoU > link_iou.
std::vector<GroundTruthTrack> build_tracks(const std::vector<BinaryMask>& masks, double link_iou = 0.2,
                                           int frame_offset = 0);

struct CriterionParams {
  double iou_threshold = 0.1;
  double track_fraction = 0.1;
  double fpr_min = 0.0;
  double fpr_max = 1.0;
};

void to_json(nlohmann::json& j, const CriterionParams& p);

struct CurvePoint {
  double fpr = 0.0;   // false-positive regions per frame
  double rate = 0.0;  // region or track detection rate
};

// Curve points from threshold +inf down to the lowest prediction score.
std::vector<CurvePoint> rbdc_curve(const std::vector<RegionPrediction>& preds, const std::vector<TrackRegion>& gt,
                                   int num_frames, const CriterionParams& params = {});
std::vector<CurvePoint> tbdc_curve(const std::vector<RegionPrediction>& preds,
                                   const std::vector<GroundTruthTrack>& tracks, int num_frames,
                                   const CriterionParams& params = {});

// Trapezoidal area over [lo, hi] normalized by hi - lo; the curve is extended flat past its
// last point and linearly interpolated at the range ends.
double normalized_area(const std::vector<CurvePoint>& curve, double lo, double hi);

double rbdc(const std::vector<RegionPrediction>& preds, const std::vector<TrackRegion>& gt, int num_frames,
            const CriterionParams& params = {});
double tbdc(const std::vector<RegionPrediction>& preds, const std::vector<GroundTruthTrack>& tracks,
            int num_frames, const CriterionParams& params = {});

}  // namespace ssmtl::eval
