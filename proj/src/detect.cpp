#include "ssmtl/detect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "ssmtl/error.hpp"

namespace ssmtl::detect {

void DetectorConfig::validate() const {
  if (!(confidence_threshold > 0) || !(flow_magnitude_threshold > 0) || min_region_area <= 0 ||
      min_region_side <= 0 || !(bg_diff_threshold > 0))
    throw ConfigError("detector thresholds must be positive");
  if (bg_init_frames < 1) throw ConfigError("bg_init_frames must be >= 1");
  if (!(bg_update_rate > 0 && bg_update_rate <= 1)) throw ConfigError("bg_update_rate must lie in (0, 1]");
  if (closing_kernel < 1 || closing_kernel % 2 == 0) throw ConfigError("closing_kernel must be odd and >= 1");
}

void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = {{"confidence_threshold", c.confidence_threshold},
       {"flow_magnitude_threshold", c.flow_magnitude_threshold},
       {"min_region_area", c.min_region_area},
       {"min_region_side", c.min_region_side},
       {"bg_init_frames", c.bg_init_frames},
       {"bg_update_rate", c.bg_update_rate},
       {"bg_diff_threshold", c.bg_diff_threshold},
       {"closing_kernel", c.closing_kernel}};
}

void from_json(const nlohmann::json& j, DetectorConfig& c) {
  const DetectorConfig d;
  c.confidence_threshold = j.value("confidence_threshold", d.confidence_threshold);
  c.flow_magnitude_threshold = j.value("flow_magnitude_threshold", d.flow_magnitude_threshold);
  c.min_region_area = j.value("min_region_area", d.min_region_area);
  c.min_region_side = j.value("min_region_side", d.min_region_side);
  c.bg_init_frames = j.value("bg_init_frames", d.bg_init_frames);
  c.bg_update_rate = j.value("bg_update_rate", d.bg_update_rate);
  c.bg_diff_threshold = j.value("bg_diff_threshold", d.bg_diff_threshold);
  c.closing_kernel = j.value("closing_kernel", d.closing_kernel);
}

namespace {

struct DisjointSet {
  std::vector<int> parent;
  int make() {
    parent.push_back(static_cast<int>(parent.size()));
    return parent.back();
  }
  int find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) std::swap(a, b);
    parent[a] = b;
  }
};

std::vector<Detection> filter_components(const BinaryMask& mask, const DetectorConfig& cfg, DetectionSource source,
                                         int frame_index) {
  std::vector<Detection> out;
  for (const auto& c : connected_components(mask)) {
    if (c.area < cfg.min_region_area) continue;
    if (c.box.width() < cfg.min_region_side || c.box.height() < cfg.min_region_side) continue;
    Detection d;
    d.frame = frame_index;
    d.box = c.box;
    d.confidence = 1.0;
    d.source = source;
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace

std::vector<Component> connected_components(const BinaryMask& mask) {
  const int h = mask.height, w = mask.width;
  std::vector<int> labels(static_cast<size_t>(h) * w, -1);
  DisjointSet sets;
  // First pass: provisional labels from the already-visited 8-neighbours (W, NW, N, NE).
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      int label = -1;
      auto visit = [&](int ny, int nx) {
        if (ny < 0 || nx < 0 || nx >= w) return;
        const int l = labels[static_cast<size_t>(ny) * w + nx];
        if (l < 0) return;
        if (label < 0) label = l;
        else sets.unite(label, l);
      };
      visit(y, x - 1);
      visit(y - 1, x - 1);
      visit(y - 1, x);
      visit(y - 1, x + 1);
      labels[static_cast<size_t>(y) * w + x] = label < 0 ? sets.make() : label;
    }
  }
  // Second pass: resolve roots and accumulate statistics.
  std::vector<int> slot(sets.parent.size(), -1);
  std::vector<Component> comps;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int l = labels[static_cast<size_t>(y) * w + x];
      if (l < 0) continue;
      const int root = sets.find(l);
      if (slot[root] < 0) {
        slot[root] = static_cast<int>(comps.size());
        comps.push_back({Box{double(x), double(y), double(x + 1), double(y + 1)}, 0, long(y) * w + x});
      }
      Component& c = comps[static_cast<size_t>(slot[root])];
      c.area += 1;
      c.box.x1 = std::min(c.box.x1, double(x));
      c.box.y1 = std::min(c.box.y1, double(y));
      c.box.x2 = std::max(c.box.x2, double(x + 1));
      c.box.y2 = std::max(c.box.y2, double(y + 1));
    }
  }
  // Slots are created in raster order of first pixel already.
  return comps;
}

void blackout(BinaryMask& mask, const std::vector<Detection>& boxes) {
  for (const auto& d : boxes) {
    const Box b = d.box.clamped(mask.width, mask.height);
    const int x1 = static_cast<int>(std::floor(b.x1)), y1 = static_cast<int>(std::floor(b.y1));
    const int x2 = static_cast<int>(std::ceil(b.x2)), y2 = static_cast<int>(std::ceil(b.y2));
    for (int y = y1; y < y2; ++y)
      for (int x = x1; x < x2; ++x) mask.at(y, x) = 0;
  }
}

BinaryMask motion_mask(const FlowField& flow, double magnitude_threshold) {
  BinaryMask mask(flow.height, flow.width);
  const double t2 = magnitude_threshold * magnitude_threshold;
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) {
      const double dx = flow.dx(y, x), dy = flow.dy(y, x);
      mask.at(y, x) = (dx * dx + dy * dy > t2) ? 1 : 0;
    }
  return mask;
}

BinaryMask close(const BinaryMask& mask, int kernel) {
  if (kernel <= 1) return mask;
  cv::Mat m(mask.height, mask.width, CV_8U, const_cast<std::uint8_t*>(mask.data.data()));
  cv::Mat out;
  const cv::Mat k = cv::getStructuringElement(cv::MORPH_RECT, {kernel, kernel});
  cv::morphologyEx(m, out, cv::MORPH_CLOSE, k);
  BinaryMask result(mask.height, mask.width);
  std::copy(out.datastart, out.dataend, result.data.begin());
  return result;
}

std::vector<Detection> provider_detections(const std::vector<Detection>& raw, const DetectorConfig& cfg) {
  std::vector<Detection> out;
  for (const auto& d : raw) {
    if (d.confidence < cfg.confidence_threshold) continue;
    Detection kept = d;
    kept.source = DetectionSource::detector;
    out.push_back(std::move(kept));
  }
  return out;
}

std::vector<Detection> flow_regions(const FlowField& flow, const std::vector<Detection>& existing,
                                    const DetectorConfig& cfg, int frame_index) {
  BinaryMask mask = motion_mask(flow, cfg.flow_magnitude_threshold);
  blackout(mask, existing);
  return filter_components(mask, cfg, DetectionSource::flow, frame_index);
}

cv::Mat to_gray(const cv::Mat& frame) {
  cv::Mat gray;
  if (frame.channels() == 3) {
    cv::cvtColor(frame, gray, cv::COLOR_RGB2GRAY);
  } else {
    gray = frame;
  }
  cv::Mat out;
  gray.convertTo(out, CV_32F);
  return out;
}

BackgroundState bg_update(const BackgroundState& state, const cv::Mat& frame, const DetectorConfig& cfg) {
  const cv::Mat gray = to_gray(frame);
  BackgroundState next;
  if (state.frames_absorbed == 0 || state.background.empty()) {
    next.background = gray.clone();
    next.frames_absorbed = 1;
    return next;
  }
  if (gray.size() != state.background.size()) throw ValidationError("background/frame shape mismatch");
  const int n = state.frames_absorbed;
  if (n < cfg.bg_init_frames) {
    // Cumulative mean over the initialization window.
    next.background = state.background * (double(n) / (n + 1)) + gray * (1.0 / (n + 1));
  } else {
    const double r = cfg.bg_update_rate;
    next.background = state.background * (1.0 - r) + gray * r;
  }
  next.frames_absorbed = n + 1;
  return next;
}

std::vector<Detection> bg_regions(const BackgroundState& state, const cv::Mat& frame,
                                  const std::vector<Detection>& existing, const DetectorConfig& cfg,
                                  int frame_index) {
  if (!state.initialized(cfg)) throw PreconditionError("background state is not initialized");
  const cv::Mat gray = to_gray(frame);
  if (gray.size() != state.background.size()) throw ValidationError("background/frame shape mismatch");
  BinaryMask fg(gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y) {
    const float* g = gray.ptr<float>(y);
    const float* b = state.background.ptr<float>(y);
    for (int x = 0; x < gray.cols; ++x) fg.at(y, x) = std::abs(g[x] - b[x]) > cfg.bg_diff_threshold ? 1 : 0;
  }
  BinaryMask closed = close(fg, cfg.closing_kernel);
  blackout(closed, existing);
  return filter_components(closed, cfg, DetectionSource::background, frame_index);
}

Mode parse_mode(const std::string& name) {
  if (name == "provider") return Mode::provider;
  if (name == "flow" || name == "provider+flow") return Mode::flow;
  if (name == "background" || name == "provider+background") return Mode::background;
  if (name == "flow+background" || name == "provider+flow+background") return Mode::flow_background;
  throw ConfigError("unknown detection mode '" + name + "'");
}

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::provider: return "provider";
    case Mode::flow: return "flow";
    case Mode::background: return "background";
    case Mode::flow_background: return "flow+background";
  }
  return "provider";
}

std::vector<Detection> fuse(int frame_index, const std::vector<Detection>& provider, const FlowField* flow,
                            const BackgroundState* background, const cv::Mat* frame, const DetectorConfig& cfg) {
  std::vector<Detection> out = provider;
  for (auto& d : out) d.frame = frame_index;
  if (flow) {
    auto extra = flow_regions(*flow, provider, cfg, frame_index);
    out.insert(out.end(), extra.begin(), extra.end());
  }
  if (background && frame && background->initialized(cfg)) {
    auto extra = bg_regions(*background, *frame, provider, cfg, frame_index);
    out.insert(out.end(), extra.begin(), extra.end());
  }
  return out;
}

VideoDetector::VideoDetector(Mode mode, DetectorConfig cfg) : mode_(mode), cfg_(cfg) { cfg_.validate(); }

std::vector<Detection> VideoDetector::process(int frame_index, const cv::Mat& frame,
                                              const std::vector<Detection>& raw_provider, const FlowField* flow) {
  if (flow && uses_flow(mode_) && (flow->height != frame.rows || flow->width != frame.cols))
    throw ValidationError("flow/frame shape mismatch at frame " + std::to_string(frame_index));
  const auto provider = provider_detections(raw_provider, cfg_);
  const bool bg = uses_background(mode_);
  auto out = fuse(frame_index, provider, uses_flow(mode_) ? flow : nullptr, bg ? &bg_ : nullptr, bg ? &frame : nullptr,
                  cfg_);
  if (bg) bg_ = bg_update(bg_, frame, cfg_);
  return out;
}

double recall(const std::vector<std::vector<Box>>& gt_per_frame, const std::vector<std::vector<Detection>>& dets,
              double iou_threshold) {
  long total = 0, hit = 0;
  for (size_t f = 0; f < gt_per_frame.size(); ++f) {
    for (const auto& g : gt_per_frame[f]) {
      ++total;
      if (f >= dets.size()) continue;
      for (const auto& d : dets[f]) {
        if (iou(g, d.box) >= iou_threshold) {
          ++hit;
          break;
        }
      }
    }
  }
  return total ? double(hit) / double(total) : 0.0;
}

}  // namespace ssmtl::detect
