#pragma once

#include <cstdint>
#include <vector>

#include <opencv2/core.hpp>

namespace ssmtl {

// Random access to the RGB frames of one video. frame() is a pure function of the index.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual int size() const = 0;
  virtual int width() const = 0;
  virtual int height() const = 0;
  // CV_8UC3, RGB channel order.
  virtual cv::Mat frame(int index) const = 0;
};

class InMemoryFrames final : public FrameSource {
 public:
  InMemoryFrames() = default;
  explicit InMemoryFrames(std::vector<cv::Mat> frames);

  int size() const override { return static_cast<int>(frames_.size()); }
  int width() const override { return frames_.empty() ? 0 : frames_.front().cols; }
  int height() const override { return frames_.empty() ? 0 : frames_.front().rows; }
  cv::Mat frame(int index) const override;

  void push_back(cv::Mat frame);

 private:
  std::vector<cv::Mat> frames_;
};

// Dense optical flow, pixels/frame. Interleaved (dx, dy) per pixel, row-major.
struct FlowField {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  FlowField() = default;
  FlowField(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w * 2, 0.0f) {}

  float dx(int y, int x) const { return data[(static_cast<size_t>(y) * width + x) * 2]; }
  float dy(int y, int x) const { return data[(static_cast<size_t>(y) * width + x) * 2 + 1]; }
  void set(int y, int x, float vx, float vy) {
    const size_t i = (static_cast<size_t>(y) * width + x) * 2;
    data[i] = vx;
    data[i + 1] = vy;
  }
  bool operator==(const FlowField&) const = default;
};

// Binary mask, one byte per pixel (0 or 1), row-major.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), data(static_cast<size_t>(h) * w, 0) {}

  std::uint8_t at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  bool any() const;
  long count() const;
};

}  // namespace ssmtl
