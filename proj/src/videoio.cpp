#include "ssmtl/videoio.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"
#include "ssmtl/error.hpp"

namespace ssmtl::videoio {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 3> kFrameExtensions = {".png", ".jpg", ".jpeg"};

bool parse_index(const std::string& stem, int& out) {
  if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; }))
    return false;
  out = std::stoi(stem);
  return true;
}

// Width/height straight from the IHDR chunk; avoids decoding every frame at index time.
bool png_size(const fs::path& file, int& width, int& height) {
  std::ifstream in(file, std::ios::binary);
  unsigned char header[24];
  if (!in.read(reinterpret_cast<char*>(header), sizeof header)) return false;
  static constexpr unsigned char kSig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (std::memcmp(header, kSig, 8) != 0) return false;
  auto be32 = [&](int off) {
    return (uint32_t(header[off]) << 24) | (uint32_t(header[off + 1]) << 16) | (uint32_t(header[off + 2]) << 8) |
           uint32_t(header[off + 3]);
  };
  width = static_cast<int>(be32(16));
  height = static_cast<int>(be32(20));
  return true;
}

void image_size(const fs::path& file, int& width, int& height) {
  if (png_size(file, width, height)) return;
  cv::Mat m = cv::imread(file.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw ValidationError("unreadable image " + file.string());
  width = m.cols;
  height = m.rows;
}

std::vector<std::string> read_lines(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw AuxMissingError("cannot open " + file.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

}  // namespace

fs::path Layout::flow_file(const std::string& video, int frame) const {
  return flow_dir(video) / frame_name(frame, ".flo");
}

std::string frame_name(int index, std::string_view extension) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return std::string(buf) + std::string(extension);
}

const VideoInfo& VideoDataset::video(const std::string& id) const {
  for (const auto& v : videos)
    if (v.id == id) return v;
  throw ConfigError("unknown video '" + id + "' in split " + split);
}

VideoDataset load_dataset(const fs::path& root, std::string_view split) {
  VideoDataset ds;
  ds.root = root;
  ds.split = std::string(split);
  const Layout layout = ds.layout();
  const fs::path frames_root = layout.split_dir() / "frames";
  if (!fs::is_directory(layout.split_dir())) throw ConfigError("missing split directory " + layout.split_dir().string());
  if (!fs::is_directory(frames_root)) throw ConfigError("missing frames directory " + frames_root.string());

  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(frames_root))
    if (entry.is_directory()) ids.push_back(entry.path().filename().string());
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw ValidationError("no videos found in " + frames_root.string());

  bool all_labels = true;
  bool all_masks = true;
  for (const auto& id : ids) {
    std::vector<std::pair<int, fs::path>> files;
    for (const auto& entry : fs::directory_iterator(frames_root / id)) {
      if (!entry.is_regular_file()) continue;
      const auto ext = entry.path().extension().string();
      if (std::find(kFrameExtensions.begin(), kFrameExtensions.end(), ext) == kFrameExtensions.end()) continue;
      int index = 0;
      if (!parse_index(entry.path().stem().string(), index)) continue;
      files.emplace_back(index, entry.path());
    }
    if (files.empty()) throw ValidationError("video '" + id + "' has no frames");
    std::sort(files.begin(), files.end());
    VideoInfo info;
    info.id = id;
    info.frame_count = static_cast<int>(files.size());
    info.extension = files.front().second.extension().string();
    for (int i = 0; i < info.frame_count; ++i) {
      if (files[static_cast<size_t>(i)].first != i)
        throw ValidationError("video '" + id + "' frame numbering is not contiguous from 0");
      int w = 0, h = 0;
      image_size(files[static_cast<size_t>(i)].second, w, h);
      if (i == 0) {
        info.width = w;
        info.height = h;
      } else if (w != info.width || h != info.height) {
        throw ValidationError("video '" + id + "' has inconsistent frame resolutions");
      }
    }
    if (!fs::exists(layout.labels_file(id))) all_labels = false;
    if (!fs::is_directory(layout.masks_dir(id))) all_masks = false;
    ds.videos.push_back(std::move(info));
  }
  ds.has_labels = all_labels;
  ds.has_masks = all_masks;
  return ds;
}

Video::Video(const VideoDataset& dataset, const VideoInfo& info)
    : dir_(dataset.layout().frames_dir(info.id)), info_(info) {}

cv::Mat Video::frame(int index) const {
  if (index < 0 || index >= info_.frame_count) throw ValidationError("frame index out of range");
  return read_rgb(dir_ / frame_name(index, info_.extension));
}

InMemoryFrames Video::load_all() const {
  InMemoryFrames frames;
  for (int i = 0; i < info_.frame_count; ++i) frames.push_back(frame(i));
  return frames;
}

cv::Mat read_rgb(const fs::path& file) {
  cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw ValidationError("unreadable image " + file.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return rgb;
}

void write_rgb(const fs::path& file, const cv::Mat& rgb) {
  ensure_parent(file);
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(file.string(), bgr)) throw Error("failed to write " + file.string());
}

BinaryMask read_mask(const fs::path& file) {
  cv::Mat m = cv::imread(file.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw ValidationError("unreadable mask " + file.string());
  BinaryMask mask(m.rows, m.cols);
  // Binarize at 0.5 of full scale.
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x) mask.at(y, x) = m.at<std::uint8_t>(y, x) >= 128 ? 1 : 0;
  return mask;
}

void write_mask(const fs::path& file, const BinaryMask& mask) {
  ensure_parent(file);
  cv::Mat m(mask.height, mask.width, CV_8U);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) m.at<std::uint8_t>(y, x) = mask.at(y, x) ? 255 : 0;
  if (!cv::imwrite(file.string(), m)) throw Error("failed to write " + file.string());
}

void write_labels(const fs::path& file, const std::vector<std::uint8_t>& labels) {
  ensure_parent(file);
  std::ofstream out(file);
  for (auto l : labels) out << int(l != 0) << '\n';
}

GroundTruth load_ground_truth(const VideoDataset& dataset, const std::string& video) {
  const VideoInfo& info = dataset.video(video);
  const Layout layout = dataset.layout();
  GroundTruth gt;
  const auto label_file = layout.labels_file(video);
  if (!fs::exists(label_file)) throw ConfigError("missing label file " + label_file.string());
  for (const auto& line : read_lines(label_file)) {
    if (line == "0") gt.labels.push_back(0);
    else if (line == "1") gt.labels.push_back(1);
    else throw ValidationError("label file " + label_file.string() + " contains '" + line + "'");
  }
  if (static_cast<int>(gt.labels.size()) != info.frame_count)
    throw ValidationError("label count " + std::to_string(gt.labels.size()) + " != frame count " +
                          std::to_string(info.frame_count) + " for video " + video);

  const auto mask_dir = layout.masks_dir(video);
  if (fs::is_directory(mask_dir)) {
    gt.masks.reserve(static_cast<size_t>(info.frame_count));
    for (int i = 0; i < info.frame_count; ++i) {
      const auto file = mask_dir / frame_name(i, ".png");
      BinaryMask mask = fs::exists(file) ? read_mask(file) : BinaryMask(info.height, info.width);
      if (mask.height != info.height || mask.width != info.width)
        throw ValidationError("mask resolution mismatch in " + file.string());
      if (mask.any() && !gt.labels[static_cast<size_t>(i)])
        throw ValidationError("frame " + std::to_string(i) + " of " + video + " has a mask but label 0");
      gt.masks.push_back(std::move(mask));
    }
  }
  return gt;
}

// --- detections ---------------------------------------------------------------------

std::vector<std::vector<Detection>> load_detections(const fs::path& file, int frame_count, int width,
                                                    int height) {
  if (!fs::exists(file)) throw AuxMissingError("detections missing: " + file.string());
  std::vector<std::vector<Detection>> out(static_cast<size_t>(frame_count));
  for (const auto& line : read_lines(file)) {
    const json rec = json::parse(line);
    Detection d;
    d.frame = rec.at("frame").get<int>();
    d.box = Box{rec.at("x1").get<double>(), rec.at("y1").get<double>(), rec.at("x2").get<double>(),
                rec.at("y2").get<double>()}
                .clamped(width, height);
    d.confidence = rec.value("confidence", 1.0);
    if (rec.contains("class_probs")) d.class_probs = rec.at("class_probs").get<std::vector<double>>();
    d.source = parse_detection_source(rec.value("source", std::string("detector")));
    if (d.frame < 0 || d.frame >= frame_count)
      throw ValidationError("detection frame " + std::to_string(d.frame) + " out of range in " + file.string());
    out[static_cast<size_t>(d.frame)].push_back(std::move(d));
  }
  return out;
}

std::vector<std::vector<Detection>> load_detections(const VideoDataset& dataset, const std::string& video) {
  const auto& info = dataset.video(video);
  return load_detections(dataset.layout().detections_file(video), info.frame_count, info.width, info.height);
}

std::vector<Detection> load_detections(const VideoDataset& dataset, const std::string& video, int frame) {
  auto all = load_detections(dataset, video);
  if (frame < 0 || frame >= static_cast<int>(all.size())) throw ValidationError("frame index out of range");
  return std::move(all[static_cast<size_t>(frame)]);
}

void write_detections(const fs::path& file, const std::vector<std::vector<Detection>>& per_frame) {
  ensure_parent(file);
  std::ofstream out(file);
  for (const auto& frame : per_frame) {
    for (const auto& d : frame) {
      json rec = {{"frame", d.frame},           {"x1", d.box.x1}, {"y1", d.box.y1}, {"x2", d.box.x2},
                  {"y2", d.box.y2},             {"confidence", d.confidence},
                  {"source", to_string(d.source)}};
      if (!d.class_probs.empty()) rec["class_probs"] = d.class_probs;
      out << rec.dump() << '\n';
    }
  }
  if (!out) throw Error("failed to write " + file.string());
}

// --- flow -----------------------------------------------------------------------------

namespace {

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

}  // namespace

void write_flow(const fs::path& file, const FlowField& flow) {
  ensure_parent(file);
  std::string buf = "VADF";
  put_u32(buf, static_cast<uint32_t>(flow.height));
  put_u32(buf, static_cast<uint32_t>(flow.width));
  buf.reserve(buf.size() + flow.data.size() * 4);
  for (float f : flow.data) put_u32(buf, std::bit_cast<uint32_t>(f));
  std::ofstream out(file, std::ios::binary);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("failed to write " + file.string());
}

FlowField read_flow(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw AuxMissingError("flow missing: " + file.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || buf.compare(0, 4, "VADF") != 0) throw ValidationError("bad flow header in " + file.string());
  const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
  FlowField flow(static_cast<int>(get_u32(p + 4)), static_cast<int>(get_u32(p + 8)));
  if (buf.size() != 12 + flow.data.size() * 4) throw ValidationError("truncated flow file " + file.string());
  for (size_t i = 0; i < flow.data.size(); ++i) flow.data[i] = std::bit_cast<float>(get_u32(p + 12 + 4 * i));
  return flow;
}

FlowField load_flow(const VideoDataset& dataset, const std::string& video, int frame) {
  const auto& info = dataset.video(video);
  const auto file = dataset.layout().flow_file(video, frame);
  if (!fs::exists(file)) throw AuxMissingError("flow missing: " + file.string());
  FlowField flow = read_flow(file);
  if (flow.height != info.height || flow.width != info.width)
    throw ValidationError("flow shape mismatch in " + file.string());
  return flow;
}

bool has_flow(const VideoDataset& dataset, const std::string& video) {
  return fs::is_directory(dataset.layout().flow_dir(video));
}

// --- teacher outputs ------------------------------------------------------------------

TeacherKey TeacherKey::of(int frame, const Box& box) {
  const Box r = box.rounded();
  return {frame, {int(r.x1), int(r.y1), int(r.x2), int(r.y2)}};
}

TeacherTable read_teacher(const fs::path& file) {
  TeacherTable table;
  for (const auto& line : read_lines(file)) {
    const json rec = json::parse(line);
    TeacherRecord r;
    r.key.frame = rec.at("frame").get<int>();
    r.key.box = rec.at("box").get<std::array<int, 4>>();
    if (rec.contains("shape")) r.shape = rec.at("shape").get<std::vector<int>>();
    r.values = rec.at("values").get<std::vector<float>>();
    table[r.key] = std::move(r);
  }
  return table;
}

void write_teacher(const fs::path& file, const std::vector<TeacherRecord>& records) {
  ensure_parent(file);
  std::ofstream out(file);
  for (const auto& r : records) {
    json rec = {{"frame", r.key.frame}, {"box", r.key.box}, {"values", r.values}};
    if (!r.shape.empty()) rec["shape"] = r.shape;
    out << rec.dump() << '\n';
  }
  if (!out) throw Error("failed to write " + file.string());
}

TeacherTable load_teacher(const VideoDataset& dataset, const std::string& teacher, const std::string& video) {
  const auto file = dataset.layout().teacher_file(teacher, video);
  if (!fs::exists(file)) throw AuxMissingError("teacher '" + teacher + "' missing: " + file.string());
  return read_teacher(file);
}

// --- tracks -----------------------------------------------------------------------------

std::vector<Track> read_tracks(const fs::path& file) {
  std::vector<Track> tracks;
  for (const auto& line : read_lines(file)) {
    const json rec = json::parse(line);
    Track t;
    t.id = rec.at("track_id").get<int>();
    t.kind = rec.value("kind", std::string());
    for (const auto& r : rec.at("regions")) {
      const auto b = r.at("box").get<std::array<double, 4>>();
      t.regions.push_back({r.at("frame").get<int>(), Box{b[0], b[1], b[2], b[3]}});
    }
    tracks.push_back(std::move(t));
  }
  return tracks;
}

void write_tracks(const fs::path& file, const std::vector<Track>& tracks) {
  ensure_parent(file);
  std::ofstream out(file);
  for (const auto& t : tracks) {
    json regions = json::array();
    for (const auto& r : t.regions)
      regions.push_back({{"frame", r.frame}, {"box", {r.box.x1, r.box.y1, r.box.x2, r.box.y2}}});
    out << json{{"track_id", t.id}, {"kind", t.kind}, {"regions", regions}}.dump() << '\n';
  }
}

}  // namespace ssmtl::videoio
