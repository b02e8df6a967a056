#pragma once

#include <optional>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"
#include "ssmtl/geometry.hpp"
#include "ssmtl/image.hpp"

namespace ssmtl::detect {

struct DetectorConfig {
  double confidence_threshold = 0.8;   // inclusive
  double flow_magnitude_threshold = 1.0;
  long min_region_area = 1500;         // component pixel count
  int min_region_side = 8;
  int bg_init_frames = 50;
  double bg_update_rate = 0.05;
  double bg_diff_threshold = 30.0;     // grayscale units out of 255
  int closing_kernel = 5;

  void validate() const;
};

void to_json(nlohmann::json& j, const DetectorConfig& c);
void from_json(const nlohmann::json& j, DetectorConfig& c);

// One connected component of a binary mask.
struct Component {
  Box box;            // tight bounding box, half-open
  long area = 0;      // pixel count
  long first_pixel = 0;  // raster index of its top-left-most pixel
};

// 8-connected components, ordered by raster position of their first pixel.
std::vector<Component> connected_components(const BinaryMask& mask);

// Zero every pixel covered by one of the boxes.
void blackout(BinaryMask& mask, const std::vector<Detection>& boxes);

BinaryMask motion_mask(const FlowField& flow, double magnitude_threshold);

// Square-kernel morphological closing (dilate then erode).
BinaryMask close(const BinaryMask& mask, int kernel);

std::vector<Detection> provider_detections(const std::vector<Detection>& raw, const DetectorConfig& cfg);

std::vector<Detection> flow_regions(const FlowField& flow, const std::vector<Detection>& existing,
                                    const DetectorConfig& cfg, int frame_index = 0);

// Running grayscale background (CV_32F, values in [0, 255]).
struct BackgroundState {
  cv::Mat background;
  int frames_absorbed = 0;

  bool initialized(const DetectorConfig& cfg) const { return frames_absorbed >= cfg.bg_init_frames; }
};

cv::Mat to_gray(const cv::Mat& rgb);

// `frame` is RGB CV_8UC3 or grayscale CV_32F/CV_8U.
BackgroundState bg_update(const BackgroundState& state, const cv::Mat& frame, const DetectorConfig& cfg);

std::vector<Detection> bg_regions(const BackgroundState& state, const cv::Mat& frame,
                                  const std::vector<Detection>& existing, const DetectorConfig& cfg,
                                  int frame_index = 0);

enum class Mode { provider, flow, background, flow_background };

Mode parse_mode(const std::string& name);
std::string to_string(Mode mode);
inline bool uses_flow(Mode m) { return m == Mode::flow || m == Mode::flow_background; }
inline bool uses_background(Mode m) { return m == Mode::background || m == Mode::flow_background; }

// Union of provider boxes and the enabled auxiliary sources; auxiliary sources see the
// provider boxes for blackout. Order: provider, flow, background.
std::vector<Detection> fuse(int frame_index, const std::vector<Detection>& provider, const FlowField* flow,
                            const BackgroundState* background, const cv::Mat* frame, const DetectorConfig& cfg);

// Runs the fused detector over a whole video in frame order. Provider boxes are the raw
// detector rows (thresholded here); flow may be absent per frame.
class VideoDetector {
 public:
  VideoDetector(Mode mode, DetectorConfig cfg);

  std::vector<Detection> process(int frame_index, const cv::Mat& frame, const std::vector<Detection>& raw_provider,
                                 const FlowField* flow);

 private:
  Mode mode_;
  DetectorConfig cfg_;
  BackgroundState bg_;
};

// Fraction of ground-truth boxes covered by some detection with IoU >= iou_threshold.
double recall(const std::vector<std::vector<Box>>& gt_per_frame, const std::vector<std::vector<Detection>>& dets,
              double iou_threshold = 0.5);

}  // namespace ssmtl::detect
