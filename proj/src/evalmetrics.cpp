#include "ssmtl/evalmetrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <tuple>

#include "ssmtl/detect.hpp"
#include "ssmtl/error.hpp"

namespace ssmtl::eval {

double micro_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
  const auto positives = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](auto l) { return l != 0; }));
  const double negatives = static_cast<double>(labels.size()) - positives;
  if (positives == 0 || negatives == 0) throw UndefinedAucError("AUC is undefined when only one class is present");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  // Sweep thresholds over distinct scores, highest first; each tie group adds one ROC point.
  double tp = 0, fp = 0, area = 0;
  for (size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    double group_tp = 0, group_fp = 0;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? group_tp : group_fp) += 1;
    area += group_fp * (tp + group_tp / 2.0);
    tp += group_tp;
    fp += group_fp;
  }
  return area / (positives * negatives);
}

MacroAuc macro_auc(const std::vector<VideoScoresLabels>& videos) {
  MacroAuc out;
  double sum = 0;
  for (const auto& v : videos) {
    try {
      sum += micro_auc(v.scores, v.labels);
      ++out.used_videos;
    } catch (const UndefinedAucError&) {
      out.skipped_videos.push_back(v.video);
    }
  }
  if (out.used_videos == 0) throw UndefinedAucError("no video contains both normal and abnormal frames");
  out.value = sum / out.used_videos;
  return out;
}

std::vector<GroundTruthTrack> build_tracks(const std::vector<BinaryMask>& masks, double link_iou, int frame_offset) {
  std::vector<GroundTruthTrack> tracks;
  std::vector<int> open;  // tracks whose last region sits on the previous frame
  for (size_t f = 0; f < masks.size(); ++f) {
    const int frame = frame_offset + static_cast<int>(f);
    const auto comps = detect::connected_components(masks[f]);
    std::vector<std::tuple<double, int, int>> pairs;  // (iou, component, track)
    for (int c = 0; c < static_cast<int>(comps.size()); ++c)
      for (int t : open) {
        const double v = iou(comps[static_cast<size_t>(c)].box, tracks[static_cast<size_t>(t)].regions.back().box);
        if (v > link_iou) pairs.emplace_back(v, c, t);
      }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
    std::vector<int> assigned(comps.size(), -1);
    std::vector<char> track_used(tracks.size(), 0);
    for (const auto& [v, c, t] : pairs) {
      if (assigned[static_cast<size_t>(c)] >= 0 || track_used[static_cast<size_t>(t)]) continue;
      assigned[static_cast<size_t>(c)] = t;
      track_used[static_cast<size_t>(t)] = 1;
    }
    std::vector<int> next_open;
    for (size_t c = 0; c < comps.size(); ++c) {
      int t = assigned[c];
      if (t < 0) {
        t = static_cast<int>(tracks.size());
        tracks.push_back({t, "", {}});
      }
      tracks[static_cast<size_t>(t)].regions.push_back({frame, comps[c].box});
      next_open.push_back(t);
    }
    open = std::move(next_open);
  }
  return tracks;
}

void to_json(nlohmann::json& j, const CriterionParams& p) {
  j = {{"iou_threshold", p.iou_threshold},
       {"track_fraction", p.track_fraction},
       {"fpr_range", {p.fpr_min, p.fpr_max}}};
}

namespace {

struct Matching {
  std::vector<size_t> order;                      // predictions sorted by descending score
  std::vector<std::vector<int>> matched_regions;  // per prediction (original index)
};

Matching match(const std::vector<RegionPrediction>& preds, const std::vector<TrackRegion>& gt, double iou_threshold) {
  std::map<int, std::vector<int>> by_frame;
  for (int r = 0; r < static_cast<int>(gt.size()); ++r) by_frame[gt[static_cast<size_t>(r)].frame].push_back(r);
  Matching m;
  m.matched_regions.resize(preds.size());
  for (size_t p = 0; p < preds.size(); ++p) {
    auto it = by_frame.find(preds[p].frame);
    if (it == by_frame.end()) continue;
    for (int r : it->second)
      if (iou(preds[p].box, gt[static_cast<size_t>(r)].box) >= iou_threshold) m.matched_regions[p].push_back(r);
  }
  m.order.resize(preds.size());
  std::iota(m.order.begin(), m.order.end(), size_t{0});
  std::stable_sort(m.order.begin(), m.order.end(),
                   [&](size_t a, size_t b) { return preds[a].score > preds[b].score; });
  return m;
}

// Shared sweep. `on_region` is called the first time a region becomes detected and returns
// the current detection rate.
template <typename OnRegion>
std::vector<CurvePoint> sweep(const std::vector<RegionPrediction>& preds, const Matching& m, int num_frames,
                              std::vector<char>& detected, OnRegion&& on_region, double initial_rate) {
  if (num_frames <= 0) throw ValidationError("num_frames must be positive");
  std::vector<CurvePoint> curve{{0.0, 0.0}};
  double rate = initial_rate;
  long false_positives = 0;
  for (size_t i = 0; i < m.order.size();) {
    const double s = preds[m.order[i]].score;
    for (; i < m.order.size() && preds[m.order[i]].score == s; ++i) {
      const auto& regions = m.matched_regions[m.order[i]];
      if (regions.empty()) {
        ++false_positives;
        continue;
      }
      for (int r : regions) {
        if (detected[static_cast<size_t>(r)]) continue;
        detected[static_cast<size_t>(r)] = 1;
        rate = on_region(r);
      }
    }
    curve.push_back({double(false_positives) / num_frames, rate});
  }
  return curve;
}

}  // namespace

std::vector<CurvePoint> rbdc_curve(const std::vector<RegionPrediction>& preds, const std::vector<TrackRegion>& gt,
                                   int num_frames, const CriterionParams& params) {
  if (gt.empty()) throw ValidationError("RBDC needs at least one ground-truth region");
  const Matching m = match(preds, gt, params.iou_threshold);
  std::vector<char> detected(gt.size(), 0);
  long count = 0;
  const double total = static_cast<double>(gt.size());
  return sweep(preds, m, num_frames, detected, [&](int) { return double(++count) / total; }, 0.0);
}

std::vector<CurvePoint> tbdc_curve(const std::vector<RegionPrediction>& preds,
                                   const std::vector<GroundTruthTrack>& tracks, int num_frames,
                                   const CriterionParams& params) {
  if (tracks.empty()) throw ValidationError("TBDC needs at least one ground-truth track");
  std::vector<TrackRegion> regions;
  std::vector<int> owner;
  for (size_t t = 0; t < tracks.size(); ++t) {
    if (tracks[t].regions.empty()) throw ValidationError("ground-truth track without regions");
    for (const auto& r : tracks[t].regions) {
      regions.push_back(r);
      owner.push_back(static_cast<int>(t));
    }
  }
  const Matching m = match(preds, regions, params.iou_threshold);
  std::vector<char> detected(regions.size(), 0);
  std::vector<long> per_track(tracks.size(), 0);
  std::vector<char> track_done(tracks.size(), 0);
  long done = 0;
  const double total = static_cast<double>(tracks.size());
  return sweep(
      preds, m, num_frames, detected,
      [&](int r) {
        const auto t = static_cast<size_t>(owner[static_cast<size_t>(r)]);
        ++per_track[t];
        if (!track_done[t] &&
            double(per_track[t]) >= params.track_fraction * double(tracks[t].regions.size())) {
          track_done[t] = 1;
          ++done;
        }
        return double(done) / total;
      },
      0.0);
}

double normalized_area(const std::vector<CurvePoint>& curve, double lo, double hi) {
  if (!(hi > lo)) throw ConfigError("false-positive range must have positive width");
  if (curve.empty()) return 0.0;
  double area = 0.0;
  for (size_t i = 0; i + 1 < curve.size(); ++i) {
    const CurvePoint a = curve[i], b = curve[i + 1];
    if (b.fpr <= a.fpr) continue;  // vertical step
    const double x0 = std::max(a.fpr, lo), x1 = std::min(b.fpr, hi);
    if (x1 <= x0) continue;
    auto at = [&](double x) { return a.rate + (b.rate - a.rate) * (x - a.fpr) / (b.fpr - a.fpr); };
    area += (x1 - x0) * (at(x0) + at(x1)) / 2.0;
  }
  const CurvePoint last = curve.back();
  if (last.fpr < hi) area += (hi - std::max(last.fpr, lo)) * last.rate;
  return area / (hi - lo);
}

double rbdc(const std::vector<RegionPrediction>& preds, const std::vector<TrackRegion>& gt, int num_frames,
            const CriterionParams& params) {
  return normalized_area(rbdc_curve(preds, gt, num_frames, params), params.fpr_min, params.fpr_max);
}

double tbdc(const std::vector<RegionPrediction>& preds, const std::vector<GroundTruthTrack>& tracks, int num_frames,
            const CriterionParams& params) {
  return normalized_area(tbdc_curve(preds, tracks, num_frames, params), params.fpr_min, params.fpr_max);
}

}  // namespace ssmtl::eval
