#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

namespace ssmtl {

// Axis-aligned box in pixel units, half-open: [x1, x2) x [y1, y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return std::max(0.0, x2 - x1); }
  double height() const { return std::max(0.0, y2 - y1); }
  double area() const { return width() * height(); }
  bool empty() const { return width() <= 0 || height() <= 0; }

  Box clamped(int frame_width, int frame_height) const {
    auto cx = [&](double v) { return std::clamp(v, 0.0, double(frame_width)); };
    auto cy = [&](double v) { return std::clamp(v, 0.0, double(frame_height)); };
    return {cx(x1), cy(y1), cx(x2), cy(y2)};
  }

  Box rounded() const {
    return {std::round(x1), std::round(y1), std::round(x2), std::round(y2)};
  }

  Box shifted(double dx, double dy) const { return {x1 + dx, y1 + dy, x2 + dx, y2 + dy}; }

  bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

enum class DetectionSource { detector, flow, background };

std::string_view to_string(DetectionSource source);
DetectionSource parse_detection_source(std::string_view name);

struct Detection {
  int frame = 0;
  Box box;
  double confidence = 1.0;
  std::vector<double> class_probs;  // empty when the source has no class notion
  DetectionSource source = DetectionSource::detector;

  bool operator==(const Detection&) const = default;
};

}  // namespace ssmtl

namespace ssmtl {

struct TrackRegion {
  int frame = 0;
  Box box;
  bool operator==(const TrackRegion&) const = default;
};

// One annotated object followed across frames; frames strictly increasing.
struct Track {
  int id = 0;
  std::string kind;
  std::vector<TrackRegion> regions;
};

}  // namespace ssmtl
