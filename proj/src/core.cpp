#include <algorithm>

#include "ssmtl/error.hpp"
#include "ssmtl/geometry.hpp"
#include "ssmtl/image.hpp"

namespace ssmtl {

std::string_view to_string(DetectionSource source) {
  switch (source) {
    case DetectionSource::detector: return "detector";
    case DetectionSource::flow: return "flow";
    case DetectionSource::background: return "background";
  }
  return "detector";
}

DetectionSource parse_detection_source(std::string_view name) {
  if (name == "detector") return DetectionSource::detector;
  if (name == "flow") return DetectionSource::flow;
  if (name == "background") return DetectionSource::background;
  throw ValidationError("unknown detection source '" + std::string(name) + "'");
}

InMemoryFrames::InMemoryFrames(std::vector<cv::Mat> frames) : frames_(std::move(frames)) {}

cv::Mat InMemoryFrames::frame(int index) const {
  if (index < 0 || index >= size()) throw ValidationError("frame index out of range");
  return frames_[static_cast<size_t>(index)];
}

void InMemoryFrames::push_back(cv::Mat frame) { frames_.push_back(std::move(frame)); }

bool BinaryMask::any() const {
  return std::any_of(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; });
}

long BinaryMask::count() const {
  return static_cast<long>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

}  // namespace ssmtl
