#pragma once

#include <array>
#include <compare>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ssmtl/geometry.hpp"
#include "ssmtl/image.hpp"

namespace ssmtl::videoio {

namespace fs = std::filesystem;

// On-disk layout (one root serves real and synthetic data):
//   <root>/<split>/frames/<video>/<%06d>.png|jpg
//   <root>/<split>/labels/<video>.txt                  one 0/1 per line
//   <root>/<split>/masks/<video>/<%06d>.png
//   <root>/<split>/aux/detections/<video>.jsonl
//   <root>/<split>/aux/flow/<video>/<%06d>.flo         "VADF", u32 H, u32 W, H*W*(dx,dy) f32 LE
//   <root>/<split>/aux/teacher/<name>/<video>.jsonl
//   <root>/<split>/tracks/<video>.jsonl
struct Layout {
  fs::path root;
  std::string split;

  fs::path split_dir() const { return root / split; }
  fs::path frames_dir(const std::string& video) const { return split_dir() / "frames" / video; }
  fs::path labels_file(const std::string& video) const { return split_dir() / "labels" / (video + ".txt"); }
  fs::path masks_dir(const std::string& video) const { return split_dir() / "masks" / video; }
  fs::path detections_file(const std::string& video) const {
    return split_dir() / "aux" / "detections" / (video + ".jsonl");
  }
  fs::path flow_dir(const std::string& video) const { return split_dir() / "aux" / "flow" / video; }
  fs::path flow_file(const std::string& video, int frame) const;
  fs::path teacher_file(const std::string& teacher, const std::string& video) const {
    return split_dir() / "aux" / "teacher" / teacher / (video + ".jsonl");
  }
  fs::path tracks_file(const std::string& video) const { return split_dir() / "tracks" / (video + ".jsonl"); }
};

std::string frame_name(int index, std::string_view extension);

struct VideoInfo {
  std::string id;
  int frame_count = 0;
  int height = 0;
  int width = 0;
  std::string extension = ".png";

  bool operator==(const VideoInfo&) const = default;
};

struct VideoDataset {
  fs::path root;
  std::string split;
  std::vector<VideoInfo> videos;
  bool has_labels = false;
  bool has_masks = false;

  Layout layout() const { return {root, split}; }
  const VideoInfo& video(const std::string& id) const;
};

// Index a split without decoding pixel data (PNG headers are parsed for resolution checks).
VideoDataset load_dataset(const fs::path& root, std::string_view split);

// Lazy, disk-backed frame access for one video.
class Video final : public FrameSource {
 public:
  Video(const VideoDataset& dataset, const VideoInfo& info);

  int size() const override { return info_.frame_count; }
  int width() const override { return info_.width; }
  int height() const override { return info_.height; }
  cv::Mat frame(int index) const override;

  const VideoInfo& info() const { return info_; }
  // Decode every frame into memory.
  InMemoryFrames load_all() const;

 private:
  fs::path dir_;
  VideoInfo info_;
};

struct GroundTruth {
  std::vector<std::uint8_t> labels;
  std::vector<BinaryMask> masks;  // empty when the split ships no pixel masks

  bool has_masks() const { return !masks.empty(); }
};

GroundTruth load_ground_truth(const VideoDataset& dataset, const std::string& video);

// --- auxiliary data ---------------------------------------------------------------

// Detections grouped by frame; boxes clamped to the frame. Throws AuxMissingError if absent.
std::vector<std::vector<Detection>> load_detections(const fs::path& file, int frame_count, int width,
                                                    int height);
std::vector<std::vector<Detection>> load_detections(const VideoDataset& dataset, const std::string& video);
std::vector<Detection> load_detections(const VideoDataset& dataset, const std::string& video, int frame);
void write_detections(const fs::path& file, const std::vector<std::vector<Detection>>& per_frame);

FlowField read_flow(const fs::path& file);
void write_flow(const fs::path& file, const FlowField& flow);
// Throws AuxMissingError when the flow file is absent, ValidationError on shape mismatch.
FlowField load_flow(const VideoDataset& dataset, const std::string& video, int frame);
bool has_flow(const VideoDataset& dataset, const std::string& video);

// Teacher outputs are keyed by the integer-rounded box.
struct TeacherKey {
  int frame = 0;
  std::array<int, 4> box{};

  static TeacherKey of(int frame, const Box& box);
  auto operator<=>(const TeacherKey&) const = default;
};

struct TeacherRecord {
  TeacherKey key;
  std::vector<int> shape;  // empty for flat vectors
  std::vector<float> values;

  bool operator==(const TeacherRecord&) const = default;
};

using TeacherTable = std::map<TeacherKey, TeacherRecord>;

TeacherTable read_teacher(const fs::path& file);
void write_teacher(const fs::path& file, const std::vector<TeacherRecord>& records);
TeacherTable load_teacher(const VideoDataset& dataset, const std::string& teacher, const std::string& video);

std::vector<Track> read_tracks(const fs::path& file);
void write_tracks(const fs::path& file, const std::vector<Track>& tracks);

// Image helpers shared by the writers.
cv::Mat read_rgb(const fs::path& file);
void write_rgb(const fs::path& file, const cv::Mat& rgb);
BinaryMask read_mask(const fs::path& file);
void write_mask(const fs::path& file, const BinaryMask& mask);

void write_labels(const fs::path& file, const std::vector<std::uint8_t>& labels);

}  // namespace ssmtl::videoio
