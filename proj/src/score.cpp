#include "ssmtl/score.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ssmtl/error.hpp"

namespace ssmtl::score {

namespace fs = std::filesystem;
using nlohmann::json;
using torch::indexing::Slice;

bool is_distance_head(Task t) { return t == Task::T3 || t == Task::T4 || t == Task::T6; }

bool has_score_rule(Task t) {
  return t == Task::T1 || t == Task::T2 || t == Task::T3 || t == Task::T4 || t == Task::T6 || t == Task::T8;
}

void ScoreConfig::validate() const {
  if (inpaint_passes < 1) throw ConfigError("inpaint_passes must be >= 1");
  if (smoothing_sigma < 0) throw ConfigError("smoothing_sigma must be >= 0");
  if (smoothing_truncate <= 0) throw ConfigError("smoothing_truncate must be positive");
  if (frame_reduce != "max" && frame_reduce != "mean") throw ConfigError("frame_reduce must be max or mean");
  if (batch_size < 1) throw ConfigError("score batch_size must be >= 1");
  if (half_length < 1) throw ConfigError("half_length must be >= 1");
}

void to_json(json& j, const ScoreConfig& c) {
  j = {{"inpaint_passes", c.inpaint_passes},
       {"smoothing_sigma", c.smoothing_sigma},
       {"smoothing_truncate", c.smoothing_truncate},
       {"frame_reduce", c.frame_reduce},
       {"batch_size", c.batch_size},
       {"half_length", c.half_length},
       {"seed", c.seed}};
}

void from_json(const json& j, ScoreConfig& c) {
  const ScoreConfig d;
  c.inpaint_passes = j.value("inpaint_passes", d.inpaint_passes);
  c.smoothing_sigma = j.value("smoothing_sigma", d.smoothing_sigma);
  c.smoothing_truncate = j.value("smoothing_truncate", d.smoothing_truncate);
  c.frame_reduce = j.value("frame_reduce", d.frame_reduce);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.half_length = j.value("half_length", d.half_length);
  c.seed = j.value("seed", d.seed);
}

void to_json(json& j, const NormalizationStats& s) {
  j = json::object();
  for (const auto& [t, v] : s.scale) j[model::to_string(t)] = v;
}

void from_json(const json& j, NormalizationStats& s) {
  s.scale.clear();
  for (const auto& [k, v] : j.items()) s.scale[model::parse_task(k)] = v.get<double>();
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("percentile of an empty sample");
  if (q < 0 || q > 100) throw ValidationError("percentile rank must be in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * double(values.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (values[hi] - values[lo]) * (pos - double(lo));
}

NormalizationStats compute_normalization(const std::vector<HeadScoreVector>& validation_scores, double q) {
  std::map<Task, std::vector<double>> by_head;
  for (const auto& v : validation_scores)
    for (const auto& [t, s] : v)
      if (is_distance_head(t)) by_head[t].push_back(s);
  NormalizationStats out;
  for (auto& [t, values] : by_head) out.scale[t] = std::max(percentile(std::move(values), q), 1e-12);
  return out;
}

// --- scoring rules ----------------------------------------------------------------------

double arrow_score(const torch::Tensor& probs) { return probs[1].item<double>(); }
double irregularity_score(const torch::Tensor& probs) { return probs[1].item<double>(); }

double reconstruction_mae(const torch::Tensor& prediction, const torch::Tensor& target) {
  return (prediction - target).abs().mean().item<double>();
}

double class_prob_delta(const torch::Tensor& predicted, const std::vector<double>& detector) {
  if (predicted.numel() != static_cast<int64_t>(detector.size()))
    throw ValidationError("class-probability vectors differ in length");
  const auto p = predicted.to(torch::kFloat64).contiguous();
  double sum = 0;
  for (size_t i = 0; i < detector.size(); ++i) sum += std::abs(p[static_cast<int64_t>(i)].item<double>() - detector[i]);
  return sum / double(detector.size());
}

double jigsaw_score(const torch::Tensor& probs, int correct) { return 1.0 - probs[correct].item<double>(); }

HeadScoreVector normalized(const HeadScoreVector& v, const NormalizationStats& norm) {
  HeadScoreVector out;
  for (const auto& [t, s] : v) {
    if (!is_distance_head(t)) {
      out[t] = s;
      continue;
    }
    auto it = norm.scale.find(t);
    if (it == norm.scale.end()) throw ConfigError("no normalization statistics for " + model::to_string(t));
    out[t] = std::clamp(s / it->second, 0.0, 1.0);
  }
  return out;
}

double object_score(const HeadScoreVector& v, const NormalizationStats& norm) {
  if (v.empty()) return 0.0;
  double sum = 0;
  for (const auto& [t, s] : normalized(v, norm)) sum += s;
  return sum / double(v.size());
}

// --- inpainting ---------------------------------------------------------------------------

namespace {

std::vector<std::vector<sequence::MaskPatch>> draw_masks(int count, int passes, sequence::Rng& rng) {
  std::vector<std::vector<sequence::MaskPatch>> masks(static_cast<size_t>(count));
  for (auto& m : masks)
    for (int p = 0; p < passes; ++p) m.push_back(sequence::sample_inpaint_mask(rng));
  return masks;
}

std::vector<double> inpaint_with_masks(const ImageModel& model, const torch::Tensor& images,
                                       const std::vector<std::vector<sequence::MaskPatch>>& masks) {
  torch::Tensor current = images;
  const size_t passes = masks.empty() ? 0 : masks.front().size();
  for (size_t p = 0; p < passes; ++p) {
    std::vector<torch::Tensor> masked;
    for (int64_t i = 0; i < images.size(0); ++i)
      masked.push_back(sequence::apply_inpaint_mask(current[i], masks[static_cast<size_t>(i)][p]));
    current = model(torch::stack(masked));
  }
  const torch::Tensor d = (images - current).pow(2).flatten(1).mean(1).to(torch::kFloat64).contiguous();
  return std::vector<double>(d.data_ptr<double>(), d.data_ptr<double>() + d.numel());
}

}  // namespace

std::vector<double> iterative_inpaint_scores(const ImageModel& model, const torch::Tensor& images, int passes,
                                             sequence::Rng& rng) {
  if (images.dim() != 4) throw ValidationError("inpainting expects [N, H, W, C] images");
  return inpaint_with_masks(model, images, draw_masks(static_cast<int>(images.size(0)), passes, rng));
}

double iterative_inpaint_score(const ImageModel& model, const torch::Tensor& image, int passes,
                               sequence::Rng& rng) {
  return iterative_inpaint_scores(model, image.unsqueeze(0), passes, rng).front();
}

// --- batched head scores ----------------------------------------------------------------------

std::vector<HeadScoreVector> head_scores(model::MultiTaskNet& net, const std::vector<ObjectInput>& objects,
                                         const sequence::PermutationSet* perms, const ScoreConfig& cfg,
                                         sequence::Rng& rng) {
  cfg.validate();
  const auto& bc = net->config();
  std::vector<Task> active;
  for (Task t : bc.tasks)
    if (has_score_rule(t)) active.push_back(t);
  if (bc.has(Task::T8) && (perms == nullptr || perms->size() == 0))
    throw ConfigError("jigsaw head needs the permutation set stored with the checkpoint");

  // Independent streams keep every draw tied to its object, whatever the batch size.
  sequence::Rng mask_rng(rng()), perm_rng(rng());
  const int n = static_cast<int>(objects.size());
  std::vector<std::vector<sequence::MaskPatch>> masks;
  if (bc.has(Task::T6)) masks = draw_masks(n, cfg.inpaint_passes, mask_rng);
  std::vector<int> perm_index;
  if (bc.has(Task::T8))
    for (int i = 0; i < n; ++i) perm_index.push_back(std::uniform_int_distribution<int>(0, perms->size() - 1)(perm_rng));

  torch::NoGradGuard no_grad;
  net->eval();
  std::vector<HeadScoreVector> out(static_cast<size_t>(n));
  const int mid = bc.input_length / 2;
  auto as_sequence = [&](const torch::Tensor& imgs) {
    return imgs.unsqueeze(1).expand({imgs.size(0), bc.input_length, imgs.size(1), imgs.size(2), imgs.size(3)});
  };
  ImageModel inpaint_model = [&](const torch::Tensor& imgs) {
    return net->head_forward(net->features(as_sequence(imgs)), Task::T6).image;
  };

  for (int start = 0; start < n; start += cfg.batch_size) {
    const int end = std::min(n, start + cfg.batch_size);
    std::vector<torch::Tensor> batch;
    for (int i = start; i < end; ++i) {
      const auto& crops = objects[static_cast<size_t>(i)].crops;
      if (crops.size(0) != bc.input_length) throw ValidationError("object sequence length differs from the model input");
      batch.push_back(crops);
    }
    const torch::Tensor x = torch::stack(batch);
    const torch::Tensor middle = x.index({Slice(), mid});
    torch::Tensor feats;
    if (bc.has(Task::T1) || bc.has(Task::T2) || bc.has(Task::T4)) feats = net->features(x);

    for (Task t : active) {
      switch (t) {
        case Task::T1:
        case Task::T2: {
          const torch::Tensor p = net->head_forward(feats, t).probs.to(torch::kFloat64).contiguous();
          for (int i = start; i < end; ++i) out[static_cast<size_t>(i)][t] = p[i - start][1].item<double>();
          break;
        }
        case Task::T3: {
          torch::Tensor masked = x.clone();
          masked.index_put_({Slice(), mid}, 0.0);
          const torch::Tensor pred = net->head_forward(net->features(masked), Task::T3).image;
          const torch::Tensor mae = (pred - middle).abs().flatten(1).mean(1).to(torch::kFloat64).contiguous();
          for (int i = start; i < end; ++i) out[static_cast<size_t>(i)][t] = mae[i - start].item<double>();
          break;
        }
        case Task::T4: {
          const torch::Tensor p = net->head_forward(feats, Task::T4).probs;
          for (int i = start; i < end; ++i) {
            const auto& cp = objects[static_cast<size_t>(i)].class_probs;
            if (cp.size() == static_cast<size_t>(p.size(1))) out[static_cast<size_t>(i)][t] = class_prob_delta(p[i - start], cp);
          }
          break;
        }
        case Task::T6: {
          const std::vector<std::vector<sequence::MaskPatch>> chunk(masks.begin() + start, masks.begin() + end);
          const auto d = inpaint_with_masks(inpaint_model, middle, chunk);
          for (int i = start; i < end; ++i) out[static_cast<size_t>(i)][t] = d[static_cast<size_t>(i - start)];
          break;
        }
        case Task::T8: {
          std::vector<torch::Tensor> shuffled;
          for (int i = start; i < end; ++i)
            shuffled.push_back(sequence::apply_permutation(middle[i - start], (*perms)[perm_index[static_cast<size_t>(i)]]));
          const torch::Tensor p =
              net->head_forward(net->features(as_sequence(torch::stack(shuffled))), Task::T8).probs.to(torch::kFloat64);
          for (int i = start; i < end; ++i)
            out[static_cast<size_t>(i)][t] = 1.0 - p[i - start][perm_index[static_cast<size_t>(i)]].item<double>();
          break;
        }
        default: break;
      }
    }
  }
  return out;
}

// --- frame series -------------------------------------------------------------------------------

std::vector<double> gaussian_smooth(const std::vector<double>& x, double sigma, double truncate) {
  if (x.empty() || sigma <= 0) return x;
  const int radius = static_cast<int>(truncate * sigma + 0.5);
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double total = 0;
  for (int k = -radius; k <= radius; ++k) total += kernel[static_cast<size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (auto& w : kernel) w /= total;

  // Symmetric extension (edge sample repeated), periodic in 2n.
  const int n = static_cast<int>(x.size());
  std::vector<double> padded(static_cast<size_t>(n + 2 * radius));
  for (int i = -radius; i < n + radius; ++i) {
    int j = i;
    while (j < 0 || j >= n) j = j < 0 ? -j - 1 : 2 * n - j - 1;
    padded[static_cast<size_t>(i + radius)] = x[static_cast<size_t>(j)];
  }
  std::vector<double> y(x.size());
  for (int i = 0; i < n; ++i) {
    double acc = 0;
    for (int k = 0; k <= 2 * radius; ++k) acc += kernel[static_cast<size_t>(k)] * padded[static_cast<size_t>(i + k)];
    y[static_cast<size_t>(i)] = acc;
  }
  return y;
}

ScoreSeries frame_series(const std::vector<ScoredObject>& objects, int frame_count, const ScoreConfig& cfg) {
  ScoreSeries s;
  s.raw.assign(static_cast<size_t>(frame_count), 0.0);
  s.n_objects.assign(static_cast<size_t>(frame_count), 0);
  s.heads.assign(static_cast<size_t>(frame_count), {});
  std::vector<double> best(static_cast<size_t>(frame_count), -1.0), sum(static_cast<size_t>(frame_count), 0.0);
  for (const auto& o : objects) {
    if (o.frame < 0 || o.frame >= frame_count) throw ValidationError("scored object outside the video");
    const auto f = static_cast<size_t>(o.frame);
    ++s.n_objects[f];
    sum[f] += o.score;
    if (o.score > best[f]) {
      best[f] = o.score;
      s.heads[f] = o.heads;
    }
  }
  for (size_t f = 0; f < s.raw.size(); ++f) {
    if (s.n_objects[f] == 0) continue;
    s.raw[f] = cfg.frame_reduce == "mean" ? sum[f] / s.n_objects[f] : best[f];
  }
  s.smoothed = gaussian_smooth(s.raw, cfg.smoothing_sigma, cfg.smoothing_truncate);
  return s;
}

VideoScores score_video(model::MultiTaskNet& net, const FrameSource& frames,
                        const std::vector<std::vector<Detection>>& detections, const NormalizationStats& norm,
                        const sequence::PermutationSet* perms, const ScoreConfig& cfg, std::uint64_t video_seed) {
  if (static_cast<int>(detections.size()) != frames.size())
    throw ValidationError("detections do not cover every frame");
  std::vector<ObjectInput> inputs;
  VideoScores out;
  for (int f = 0; f < frames.size(); ++f)
    for (const auto& d : detections[static_cast<size_t>(f)]) {
      auto seq = sequence::extract(frames, d.box, f, cfg.half_length);
      if (!seq) continue;
      inputs.push_back({seq->crops, d.class_probs});
      out.objects.push_back({f, d.box.clamped(frames.width(), frames.height()), 0.0, {}});
    }
  sequence::Rng rng(video_seed);
  const auto raw = head_scores(net, inputs, perms, cfg, rng);
  for (size_t i = 0; i < raw.size(); ++i) {
    out.objects[i].heads = normalized(raw[i], norm);
    out.objects[i].score = object_score(raw[i], norm);
  }
  out.series = frame_series(out.objects, frames.size(), cfg);
  return out;
}

// --- IO ------------------------------------------------------------------------------------------

void write_series_csv(const fs::path& file, const ScoreSeries& series, const model::TaskSet& tasks) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  std::vector<Task> heads;
  for (Task t : tasks)
    if (has_score_rule(t)) heads.push_back(t);
  out << "frame,raw,smoothed,n_objects";
  for (Task t : heads) out << ',' << model::to_string(t);
  out << '\n';
  out.precision(17);
  for (size_t f = 0; f < series.raw.size(); ++f) {
    out << f << ',' << series.raw[f] << ',' << series.smoothed[f] << ',' << series.n_objects[f];
    for (Task t : heads) {
      auto it = series.heads[f].find(t);
      out << ',' << (it == series.heads[f].end() ? 0.0 : it->second);
    }
    out << '\n';
  }
  if (!out) throw Error("failed to write " + file.string());
}

ScoreSeries read_series_csv(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open score series " + file.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 4 || header[1] != "raw" || header[2] != "smoothed")
    throw ValidationError("unexpected score series header in " + file.string());
  ScoreSeries s;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) throw ValidationError("ragged score series row in " + file.string());
    s.raw.push_back(std::stod(cells[1]));
    s.smoothed.push_back(std::stod(cells[2]));
    s.n_objects.push_back(std::stoi(cells[3]));
    HeadScoreVector h;
    for (size_t c = 4; c < cells.size(); ++c) h[model::parse_task(header[c])] = std::stod(cells[c]);
    s.heads.push_back(std::move(h));
  }
  return s;
}

void write_objects_jsonl(const fs::path& file, const std::vector<ScoredObject>& objects) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  for (const auto& o : objects) {
    json heads = json::object();
    for (const auto& [t, v] : o.heads) heads[model::to_string(t)] = v;
    out << json{{"frame", o.frame}, {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}, {"score", o.score}, {"heads", heads}}
               .dump()
        << '\n';
  }
  if (!out) throw Error("failed to write " + file.string());
}

std::vector<ScoredObject> read_objects_jsonl(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open scored objects " + file.string());
  std::vector<ScoredObject> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    ScoredObject o;
    o.frame = j.at("frame").get<int>();
    const auto b = j.at("box").get<std::vector<double>>();
    if (b.size() != 4) throw ValidationError("box must have four coordinates");
    o.box = Box{b[0], b[1], b[2], b[3]};
    o.score = j.at("score").get<double>();
    if (j.contains("heads"))
      for (const auto& [k, v] : j.at("heads").items()) o.heads[model::parse_task(k)] = v.get<double>();
    out.push_back(std::move(o));
  }
  return out;
}

}  // namespace ssmtl::score
