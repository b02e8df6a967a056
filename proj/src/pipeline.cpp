#include "ssmtl/pipeline.hpp"

#include <fstream>
#include <future>

#include "ssmtl/error.hpp"
#include "ssmtl/rng.hpp"

namespace ssmtl::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

PerFrame detect_video(const videoio::VideoDataset& dataset, const videoio::VideoInfo& info, detect::Mode mode,
                      const detect::DetectorConfig& cfg) {
  if (detect::uses_flow(mode) && !videoio::has_flow(dataset, info.id))
    throw AuxMissingError("optical flow missing for video " + info.id);
  const videoio::Video video(dataset, info);
  const PerFrame raw = videoio::load_detections(dataset, info.id);
  detect::VideoDetector detector(mode, cfg);
  PerFrame out;
  out.reserve(static_cast<size_t>(info.frame_count));
  for (int f = 0; f < info.frame_count; ++f) {
    std::optional<FlowField> flow;
    if (detect::uses_flow(mode)) flow = videoio::load_flow(dataset, info.id, f);
    out.push_back(detector.process(f, video.frame(f), raw[static_cast<size_t>(f)], flow ? &*flow : nullptr));
  }
  return out;
}

}  // namespace

DatasetDetections detect_dataset(const videoio::VideoDataset& dataset, detect::Mode mode,
                                 const detect::DetectorConfig& cfg, int workers) {
  DatasetDetections out;
  if (workers <= 1) {
    for (const auto& v : dataset.videos) out[v.id] = detect_video(dataset, v, mode, cfg);
    return out;
  }
  std::vector<std::future<PerFrame>> pending;
  for (size_t i = 0; i < dataset.videos.size(); i += static_cast<size_t>(workers)) {
    pending.clear();
    const size_t end = std::min(dataset.videos.size(), i + static_cast<size_t>(workers));
    for (size_t k = i; k < end; ++k)
      pending.push_back(std::async(std::launch::async, detect_video, std::cref(dataset),
                                   std::cref(dataset.videos[k]), mode, std::cref(cfg)));
    for (size_t k = i; k < end; ++k) out[dataset.videos[k].id] = pending[k - i].get();
  }
  return out;
}

void write_dataset_detections(const fs::path& dir, const DatasetDetections& dets) {
  for (const auto& [id, frames] : dets) videoio::write_detections(dir / (id + ".jsonl"), frames);
}

DatasetDetections read_dataset_detections(const fs::path& dir, const videoio::VideoDataset& dataset) {
  DatasetDetections out;
  for (const auto& v : dataset.videos) {
    const auto file = dir / (v.id + ".jsonl");
    if (!fs::exists(file)) throw ConfigError("detections missing for video " + v.id + ": " + file.string());
    out[v.id] = videoio::load_detections(file, v.frame_count, v.width, v.height);
  }
  return out;
}

std::vector<PerFrame> ordered(const DatasetDetections& dets, const videoio::VideoDataset& dataset) {
  std::vector<PerFrame> out;
  for (const auto& v : dataset.videos) {
    auto it = dets.find(v.id);
    if (it == dets.end()) throw ValidationError("detections missing for video " + v.id);
    out.push_back(it->second);
  }
  return out;
}

DatasetScores score_dataset(model::MultiTaskNet& net, const videoio::VideoDataset& dataset,
                            const DatasetDetections& dets, const score::NormalizationStats& norm,
                            const sequence::PermutationSet* perms, const score::ScoreConfig& cfg) {
  DatasetScores out;
  for (size_t i = 0; i < dataset.videos.size(); ++i) {
    const auto& v = dataset.videos[i];
    auto it = dets.find(v.id);
    if (it == dets.end()) throw ValidationError("detections missing for video " + v.id);
    const InMemoryFrames frames = videoio::Video(dataset, v).load_all();
    out.videos[v.id] = score::score_video(net, frames, it->second, norm, perms, cfg, derive_seed(cfg.seed, 41, i));
  }
  return out;
}

void write_dataset_scores(const fs::path& dir, const DatasetScores& scores, const model::TaskSet& tasks) {
  for (const auto& [id, v] : scores.videos) {
    score::write_series_csv(dir / (id + ".csv"), v.series, tasks);
    score::write_objects_jsonl(dir / (id + ".objects.jsonl"), v.objects);
  }
}

DatasetScores read_dataset_scores(const fs::path& dir, const videoio::VideoDataset& dataset) {
  DatasetScores out;
  for (const auto& v : dataset.videos) {
    const auto csv = dir / (v.id + ".csv");
    if (!fs::exists(csv)) throw ConfigError("scores missing for video " + v.id + ": " + csv.string());
    score::VideoScores s;
    s.series = score::read_series_csv(csv);
    if (static_cast<int>(s.series.smoothed.size()) != v.frame_count)
      throw ValidationError("score series of video " + v.id + " does not cover every frame");
    const auto objects = dir / (v.id + ".objects.jsonl");
    if (fs::exists(objects)) s.objects = score::read_objects_jsonl(objects);
    out.videos[v.id] = std::move(s);
  }
  return out;
}

json EvalReport::to_json() const {
  json j = {{"micro_auc", micro_auc},
            {"macro_auc", macro_auc},
            {"skipped_videos", skipped_videos},
            {"params", params}};
  j["rbdc"] = has_regions ? json(rbdc) : json(nullptr);
  j["tbdc"] = has_regions ? json(tbdc) : json(nullptr);
  return j;
}

EvalReport evaluate(const videoio::VideoDataset& dataset, const DatasetScores& scores,
                    const eval::CriterionParams& params) {
  EvalReport report;
  report.params = params;
  std::vector<double> all_scores;
  std::vector<std::uint8_t> all_labels;
  std::vector<eval::VideoScoresLabels> per_video;
  std::vector<eval::RegionPrediction> preds;
  std::vector<eval::GroundTruthTrack> tracks;
  std::vector<TrackRegion> regions;
  bool masks = true;
  int offset = 0;
  for (const auto& v : dataset.videos) {
    auto it = scores.videos.find(v.id);
    if (it == scores.videos.end()) throw ValidationError("scores missing for video " + v.id);
    const auto& s = it->second;
    const auto gt = videoio::load_ground_truth(dataset, v.id);
    if (gt.labels.size() != s.series.smoothed.size())
      throw ValidationError("labels and scores of video " + v.id + " differ in length");
    all_scores.insert(all_scores.end(), s.series.smoothed.begin(), s.series.smoothed.end());
    all_labels.insert(all_labels.end(), gt.labels.begin(), gt.labels.end());
    per_video.push_back({v.id, s.series.smoothed, gt.labels});
    if (gt.masks.empty()) {
      masks = false;
    } else {
      for (auto& t : eval::build_tracks(gt.masks, 0.2, offset)) {
        t.id = static_cast<int>(tracks.size());
        regions.insert(regions.end(), t.regions.begin(), t.regions.end());
        tracks.push_back(std::move(t));
      }
      for (const auto& o : s.objects) preds.push_back({o.frame + offset, o.box, o.score});
    }
    offset += v.frame_count;
  }
  report.micro_auc = eval::micro_auc(all_scores, all_labels);
  const auto macro = eval::macro_auc(per_video);
  report.macro_auc = macro.value;
  report.skipped_videos = macro.skipped_videos;
  if (masks && !tracks.empty()) {
    report.has_regions = true;
    report.rbdc = eval::rbdc(preds, regions, offset, params);
    report.tbdc = eval::tbdc(preds, tracks, offset, params);
  }
  return report;
}

double anomaly_recall(const videoio::VideoDataset& dataset, const DatasetDetections& dets, const std::string& kind,
                      double iou_threshold) {
  int total = 0, hit = 0;
  for (const auto& v : dataset.videos) {
    const auto file = dataset.layout().tracks_file(v.id);
    if (!fs::exists(file)) continue;
    const auto& frames = dets.at(v.id);
    for (const auto& t : videoio::read_tracks(file)) {
      if (!kind.empty() && t.kind != kind) continue;
      for (const auto& r : t.regions) {
        ++total;
        for (const auto& d : frames.at(static_cast<size_t>(r.frame)))
          if (iou(d.box, r.box) >= iou_threshold) {
            ++hit;
            break;
          }
      }
    }
  }
  if (total == 0) throw ValidationError("no anomaly regions of kind '" + kind + "' in the dataset");
  return double(hit) / total;
}

}  // namespace ssmtl::pipeline
