#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "json.hpp"
#include "ssmtl/geometry.hpp"
#include "ssmtl/image.hpp"
#include "ssmtl/videoio.hpp"

namespace ssmtl::synthbench {

enum class AnomalyKind { reversed_motion, speed_anomaly, unseen_shape, erratic_path };

std::string to_string(AnomalyKind kind);
AnomalyKind parse_anomaly_kind(const std::string& name);

// Normal actors travel left to right in horizontal lanes, wrapping around at the right
// border. The last lane is reserved for unseen-shape anomalies.
struct SceneConfig {
  int height = 240;
  int width = 360;
  int train_videos = 8;
  int test_videos = 6;
  int frames = 200;
  int actors = 3;  // normal actors per video, one lane each
  double speed_min = 1.5;  // pixels/frame
  double speed_max = 2.5;
  int size_min = 44;
  int size_max = 52;
  int unseen_size = 56;
  // Test video k plants anomaly_kinds[k % n]; an empty list yields an all-normal test split.
  std::vector<AnomalyKind> anomaly_kinds{AnomalyKind::reversed_motion, AnomalyKind::speed_anomaly,
                                         AnomalyKind::unseen_shape, AnomalyKind::erratic_path};
  int anomaly_length = 40;
  int anomaly_start = -1;  // fixed first anomalous frame; -1 draws it per video
  double speed_factor = 3.0;
  double erratic_amplitude = 4.0;  // pixels
  double spurious_rate = 0.3;      // low-confidence false boxes per frame
  int pseudo_images = 64;
  bool teachers = true;
  int png_compression = 1;
  std::uint64_t seed = 0;

  void validate() const;
  int lane_spacing() const { return height / (actors + 1); }
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

inline constexpr int kNormalKinds = 3;
inline constexpr int kDetectorClasses = 4;  // three normal kinds plus "other"

std::string kind_name(int kind);

struct PlantedAnomaly {
  std::string video;
  AnomalyKind kind = AnomalyKind::reversed_motion;
  int first = 0;  // inclusive
  int last = 0;   // inclusive
  int track_id = 0;
};

void to_json(nlohmann::json& j, const PlantedAnomaly& a);

struct ActorTruth {
  int track_id = 0;
  int kind = 0;  // 0..2 normal kinds, 3 unseen
  bool anomalous = false;
  Box box;        // visible-pixel bounding box
  long area = 0;  // visible pixels
  float vx = 0, vy = 0;
};

struct RenderedVideo {
  std::string id;
  bool test = false;
  std::vector<cv::Mat> frames;  // RGB CV_8UC3
  std::vector<FlowField> flows;
  std::vector<std::uint8_t> labels;
  std::vector<BinaryMask> masks;  // test split only
  std::vector<std::vector<ActorTruth>> actors;
  std::vector<std::vector<Detection>> detections;  // oracle detector rows, spurious included
  std::vector<Track> tracks;                       // anomalous objects
  std::vector<PlantedAnomaly> anomalies;
  std::map<std::string, std::vector<videoio::TeacherRecord>> teachers;  // train split only
};

std::string video_id(int index);

// Deterministic in (cfg, test, index).
RenderedVideo render_video(const SceneConfig& cfg, bool test, int index);

cv::Mat background(const SceneConfig& cfg);
cv::Mat pseudo_image(std::uint64_t seed, int index, int size = 64);

// Writes the full dataset root: frames, labels, masks, oracle detections, flow, tracks,
// teacher outputs, <root>/pseudo/*.png and <root>/synth_config.json.
std::vector<PlantedAnomaly> generate(const SceneConfig& cfg, const std::filesystem::path& root);

}  // namespace ssmtl::synthbench
