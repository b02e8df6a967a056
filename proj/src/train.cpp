#include "ssmtl/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "ssmtl/error.hpp"
#include "ssmtl/rng.hpp"

namespace ssmtl::train {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;
using nlohmann::json;
using sequence::Rng;

// --- configuration ----------------------------------------------------------------------

void TrainConfig::validate() const {
  backbone.validate();
  score.validate();
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (adversarial_start_epoch < 0 || adversarial_start_epoch > epochs)
    throw ConfigError("adversarial_start_epoch must lie in [0, epochs]");
  if (!(adversarial_scale > 0)) throw ConfigError("adversarial_scale must be positive");
  if (!(pseudo_ratio > 0 && pseudo_ratio <= 1)) throw ConfigError("pseudo_ratio must lie in (0, 1]");
  if (frame_stride < 1) throw ConfigError("frame_stride must be >= 1");
  if (max_objects < 0) throw ConfigError("max_objects must be >= 0");
  if (min_box_side < 1) throw ConfigError("min_box_side must be >= 1");
  if (skips.empty() || *std::min_element(skips.begin(), skips.end()) < 2)
    throw ConfigError("intermittence skips must be nonempty and >= 2");
  if (2 * half_length + 1 != backbone.input_length)
    throw ConfigError("sequence length 2*half_length+1 must equal the backbone input length");
  for (const auto& [t, w] : task_weights)
    if (w < 0 || !std::isfinite(w)) throw ConfigError("task weights must be finite and >= 0");
  (void)detect::parse_mode(detection_mode);
}

double TrainConfig::weight(Task t) const {
  auto it = task_weights.find(t);
  return it == task_weights.end() ? 1.0 : it->second;
}

TrainConfig preset(const std::string& name) {
  TrainConfig c;
  c.preset = name;
  auto& b = c.backbone;
  // Twelve heads do not divide the toy token widths, so the per-head width is explicit.
  b.cvt_blocks = 3;
  b.cvt_heads = 12;
  b.head_dim = 8;
  if (name == "custom") return c;
  if (name == "ssmtl") {
    b.tasks = {Task::T1, Task::T2, Task::T3, Task::T4};
    b.cvt_placement = model::CvtPlacement::none;
    c.detection_mode = "provider";
  } else if (name == "ssmtl++v1") {
    b.tasks = {Task::T1, Task::T2, Task::T3, Task::T5};
    b.cvt_placement = model::CvtPlacement::three_d;
    c.detection_mode = "flow";
  } else if (name == "ssmtl++v2") {
    b.tasks = {Task::T1, Task::T2, Task::T3, Task::T6};
    b.cvt_placement = model::CvtPlacement::three_d;
    c.detection_mode = "flow";
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected ssmtl, ssmtl++v1, ssmtl++v2 or custom)");
  }
  return c;
}

std::vector<std::string> preset_names() { return {"ssmtl", "ssmtl++v1", "ssmtl++v2", "custom"}; }

void to_json(json& j, const TrainConfig& c) {
  json weights = json::object();
  for (const auto& [t, w] : c.task_weights) weights[model::to_string(t)] = w;
  j = {{"preset", c.preset},
       {"backbone", c.backbone},
       {"epochs", c.epochs},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"val_fraction", c.val_fraction},
       {"adversarial_start_epoch", c.adversarial_start_epoch},
       {"adversarial_scale", c.adversarial_scale},
       {"pseudo_ratio", c.pseudo_ratio},
       {"task_weights", weights},
       {"seed", c.seed},
       {"frame_stride", c.frame_stride},
       {"max_objects", c.max_objects},
       {"min_box_side", c.min_box_side},
       {"skips", c.skips},
       {"half_length", c.half_length},
       {"permutation_seed", c.permutation_seed},
       {"detection_mode", c.detection_mode},
       {"score", c.score}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d = preset(j.value("preset", std::string("custom")));
  c = d;
  if (j.contains("backbone")) {
    json merged = d.backbone;
    merged.merge_patch(j.at("backbone"));
    c.backbone = merged.get<model::BackboneConfig>();
  }
  c.epochs = j.value("epochs", d.epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.adversarial_start_epoch = j.value("adversarial_start_epoch", d.adversarial_start_epoch);
  c.adversarial_scale = j.value("adversarial_scale", d.adversarial_scale);
  c.pseudo_ratio = j.value("pseudo_ratio", d.pseudo_ratio);
  if (j.contains("task_weights"))
    for (const auto& [k, v] : j.at("task_weights").items()) c.task_weights[model::parse_task(k)] = v.get<double>();
  c.seed = j.value("seed", d.seed);
  c.frame_stride = j.value("frame_stride", d.frame_stride);
  c.max_objects = j.value("max_objects", d.max_objects);
  c.min_box_side = j.value("min_box_side", d.min_box_side);
  c.skips = j.value("skips", d.skips);
  c.half_length = j.value("half_length", d.half_length);
  c.permutation_seed = j.value("permutation_seed", d.permutation_seed);
  c.detection_mode = j.value("detection_mode", d.detection_mode);
  if (j.contains("score")) {
    json merged = d.score;
    merged.merge_patch(j.at("score"));
    c.score = merged.get<score::ScoreConfig>();
  }
}

// --- data -------------------------------------------------------------------------------------

namespace {

torch::Tensor vector_tensor(const std::vector<float>& v) {
  return torch::from_blob(const_cast<float*>(v.data()), {static_cast<int64_t>(v.size())}, torch::kFloat32).clone();
}

torch::Tensor vector_tensor(const std::vector<double>& v) {
  return torch::from_blob(const_cast<double*>(v.data()), {static_cast<int64_t>(v.size())}, torch::kFloat64)
      .to(torch::kFloat32);
}

}  // namespace

std::vector<std::vector<std::vector<Detection>>> load_training_detections(const videoio::VideoDataset& dataset,
                                                                          const std::optional<fs::path>& dir,
                                                                          const detect::DetectorConfig& det_cfg) {
  std::vector<std::vector<std::vector<Detection>>> out;
  for (const auto& v : dataset.videos) {
    if (dir) {
      out.push_back(videoio::load_detections(*dir / (v.id + ".jsonl"), v.frame_count, v.width, v.height));
    } else {
      auto rows = videoio::load_detections(dataset, v.id);
      for (auto& frame : rows) frame = detect::provider_detections(frame, det_cfg);
      out.push_back(std::move(rows));
    }
  }
  return out;
}

TrainData build_corpus(const videoio::VideoDataset& dataset,
                       const std::vector<std::vector<std::vector<Detection>>>& detections, const TrainConfig& cfg) {
  if (detections.size() != dataset.videos.size()) throw ValidationError("detections do not cover every video");
  const auto& bc = cfg.backbone;
  TrainData data;
  for (size_t v = 0; v < dataset.videos.size(); ++v) {
    const auto& info = dataset.videos[v];
    if (static_cast<int>(detections[v].size()) != info.frame_count)
      throw ValidationError("detections of video " + info.id + " do not cover every frame");
    data.video_ids.push_back(info.id);
    data.frames.push_back(std::make_shared<InMemoryFrames>(videoio::Video(dataset, info).load_all()));

    auto teacher = [&](Task t, const std::string& name) {
      if (!bc.has(t)) return videoio::TeacherTable{};
      try {
        return videoio::load_teacher(dataset, name, info.id);
      } catch (const AuxMissingError&) {
        return videoio::TeacherTable{};
      }
    };
    const auto features = teacher(Task::T4, "features");
    const auto segmentation = teacher(Task::T7, "segmentation");
    const auto pose = teacher(Task::T9, "pose");

    for (int f = 0; f < info.frame_count; f += cfg.frame_stride) {
      for (const auto& d : detections[v][static_cast<size_t>(f)]) {
        const Box box = d.box.clamped(info.width, info.height);
        if (box.width() < cfg.min_box_side || box.height() < cfg.min_box_side) continue;
        CorpusObject o;
        o.video = static_cast<int>(v);
        o.frame = f;
        o.box = box;
        o.class_probs = d.class_probs;
        const auto key = videoio::TeacherKey::of(f, box);
        if (auto it = features.find(key); it != features.end()) o.teacher_features = it->second.values;
        if (auto it = segmentation.find(key); it != segmentation.end()) o.teacher_segmentation = it->second.values;
        if (auto it = pose.find(key); it != pose.end()) o.teacher_pose = it->second.values;
        data.objects.push_back(std::move(o));
      }
    }
  }
  if (cfg.max_objects > 0 && static_cast<int>(data.objects.size()) > cfg.max_objects) {
    std::vector<size_t> idx(data.objects.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(derive_seed(cfg.seed, 7));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<size_t>(cfg.max_objects));
    std::sort(idx.begin(), idx.end());
    std::vector<CorpusObject> kept;
    for (size_t i : idx) kept.push_back(std::move(data.objects[i]));
    data.objects = std::move(kept);
  }
  auto require = [&](Task t, auto member, const char* teacher) {
    if (!bc.has(t)) return;
    const bool any = std::any_of(data.objects.begin(), data.objects.end(), [&](const CorpusObject& o) { return !(o.*member).empty(); });
    if (!any) throw AuxMissingError(model::to_string(t) + " needs '" + teacher + "' teacher outputs for the training objects");
  };
  require(Task::T4, &CorpusObject::teacher_features, "features");
  require(Task::T7, &CorpusObject::teacher_segmentation, "segmentation");
  require(Task::T9, &CorpusObject::teacher_pose, "pose");
  return data;
}

std::vector<torch::Tensor> load_pseudo_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("pseudo-anomaly directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<torch::Tensor> out;
  for (const auto& f : files) {
    const cv::Mat rgb = videoio::read_rgb(f);
    auto t = sequence::crop_resize(rgb, Box{0, 0, double(rgb.cols), double(rgb.rows)});
    if (t) out.push_back(*t);
  }
  return out;
}

Split split_train_val(int n, double fraction, std::uint64_t seed) {
  if (n < 2) throw ValidationError("need at least two examples to split into train and validation");
  if (!(fraction > 0 && fraction < 1)) throw ConfigError("validation fraction must lie in (0, 1)");
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const int n_val = std::clamp(static_cast<int>(std::lround(fraction * n)), 1, n - 1);
  Split s;
  s.val.assign(idx.begin(), idx.begin() + n_val);
  s.train.assign(idx.begin() + n_val, idx.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

torch::Tensor pose_heatmaps(const std::vector<float>& keypoints, int size, double sigma) {
  const int joints = static_cast<int>(keypoints.size() / 2);
  const torch::Tensor coords = torch::arange(size, torch::kFloat32);
  const torch::Tensor yy = coords.view({size, 1, 1}), xx = coords.view({1, size, 1});
  const torch::Tensor kp = vector_tensor(keypoints).view({joints, 2}) * float(size);
  const torch::Tensor kx = kp.index({torch::indexing::Slice(), 0}).view({1, 1, joints});
  const torch::Tensor ky = kp.index({torch::indexing::Slice(), 1}).view({1, 1, joints});
  return torch::exp(-((xx - kx).pow(2) + (yy - ky).pow(2)) / float(2 * sigma * sigma));
}

std::optional<TaskBatchItem> make_item(Task task, const TrainData& data, const CorpusObject& o, Rng& rng,
                                       const TrainConfig& cfg, const sequence::PermutationSet& perms) {
  const FrameSource& frames = *data.frames[static_cast<size_t>(o.video)];
  const int length = cfg.backbone.input_length;
  TaskBatchItem item;
  item.task = task;
  auto forward = [&] { return sequence::extract(frames, o.box, o.frame, cfg.half_length); };
  auto middle = [&] { return sequence::crop_resize(frames.frame(o.frame), o.box); };

  switch (task) {
    case Task::T1: {
      auto seq = forward();
      if (!seq) return std::nullopt;
      auto [ex, dir] = sequence::arrow_of_time_example(*seq, rng);
      item.input = ex.crops;
      item.label = dir == sequence::Direction::backward ? 1 : 0;
      return item;
    }
    case Task::T2: {
      sequence::IrregularityOptions opts;
      opts.skips = cfg.skips;
      auto ex = sequence::irregularity_example(frames, o.box, o.frame, rng, opts, cfg.half_length);
      if (!ex) return std::nullopt;
      item.input = ex->first.crops;
      item.label = ex->second ? 1 : 0;
      return item;
    }
    case Task::T3: {
      auto seq = forward();
      if (!seq) return std::nullopt;
      auto masked = sequence::mask_middle(*seq);
      item.input = masked.input.crops;
      item.target = masked.target;
      return item;
    }
    case Task::T4: {
      if (static_cast<int>(o.teacher_features.size()) != cfg.backbone.teacher_dim ||
          static_cast<int>(o.class_probs.size()) != cfg.backbone.num_classes)
        return std::nullopt;
      auto seq = forward();
      if (!seq) return std::nullopt;
      item.input = seq->crops;
      item.target = vector_tensor(o.teacher_features);
      item.class_probs = vector_tensor(o.class_probs);
      return item;
    }
    case Task::T6: {
      auto img = middle();
      if (!img) return std::nullopt;
      const auto patch = sequence::sample_inpaint_mask(rng);
      item.input = sequence::static_sequence(sequence::apply_inpaint_mask(*img, patch), length);
      item.target = *img;
      return item;
    }
    case Task::T7: {
      const int c = cfg.backbone.seg_channels;
      if (static_cast<int>(o.teacher_segmentation.size()) != c * 16 * 16) return std::nullopt;
      auto img = middle();
      if (!img) return std::nullopt;
      item.input = sequence::static_sequence(*img, length);
      const torch::Tensor seg = vector_tensor(o.teacher_segmentation).view({1, c, 16, 16});
      item.target = F::interpolate(seg, F::InterpolateFuncOptions()
                                            .size(std::vector<int64_t>{sequence::kCropSize, sequence::kCropSize})
                                            .mode(torch::kBilinear)
                                            .align_corners(false))
                        .squeeze(0)
                        .permute({1, 2, 0})
                        .contiguous();
      return item;
    }
    case Task::T8: {
      auto img = middle();
      if (!img) return std::nullopt;
      auto [shuffled, index] = sequence::jigsaw_example(*img, perms, rng);
      item.input = sequence::static_sequence(shuffled, length);
      item.label = index;
      return item;
    }
    case Task::T9: {
      if (static_cast<int>(o.teacher_pose.size()) != cfg.backbone.pose_joints * 2) return std::nullopt;
      auto img = middle();
      if (!img) return std::nullopt;
      item.input = sequence::static_sequence(*img, length);
      item.target = pose_heatmaps(o.teacher_pose);
      return item;
    }
    case Task::T5: return std::nullopt;  // pseudo-anomalies come from pseudo_item
  }
  return std::nullopt;
}

TaskBatchItem pseudo_item(const torch::Tensor& image, int length) {
  TaskBatchItem item;
  item.task = Task::T5;
  item.input = sequence::static_sequence(image, length);
  item.target = image;
  item.pseudo_anomaly = true;
  return item;
}

// --- losses ---------------------------------------------------------------------------------

TaskTargets stack_targets(Task task, const std::vector<TaskBatchItem>& items) {
  if (items.empty()) throw ValidationError("no items for task " + model::to_string(task));
  TaskTargets t;
  if (model::is_classification(task)) {
    std::vector<int64_t> labels;
    for (const auto& i : items) labels.push_back(i.label);
    t.labels = torch::tensor(labels, torch::kInt64);
  } else if (task == Task::T4) {
    std::vector<torch::Tensor> f, p;
    for (const auto& i : items) {
      f.push_back(i.target);
      p.push_back(i.class_probs);
    }
    t.features = torch::stack(f);
    t.class_probs = torch::stack(p);
  } else {
    std::vector<torch::Tensor> imgs;
    for (const auto& i : items) imgs.push_back(i.target);
    t.images = torch::stack(imgs);
  }
  return t;
}

torch::Tensor task_loss(Task task, const model::HeadOutput& out, const TaskTargets& targets) {
  if (model::is_classification(task)) {
    if (!targets.labels.defined()) throw ValidationError("missing labels for " + model::to_string(task));
    return F::cross_entropy(out.logits, targets.labels);
  }
  if (task == Task::T4) {
    if (!targets.features.defined() || !targets.class_probs.defined())
      throw ValidationError("missing distillation targets for T4");
    const torch::Tensor q = targets.class_probs;
    const torch::Tensor kl = (q * (torch::log(q.clamp_min(1e-12)) - torch::log_softmax(out.logits, 1))).sum(1).mean();
    return F::mse_loss(out.features, targets.features) + kl;
  }
  if (!targets.images.defined()) throw ValidationError("missing image targets for " + model::to_string(task));
  if (task == Task::T3) return F::l1_loss(out.image, targets.images);
  return F::mse_loss(out.image, targets.images);
}

LossBreakdown multi_task_loss(const std::map<Task, model::HeadOutput>& outputs,
                              const std::map<Task, TaskTargets>& targets, const TrainConfig& cfg) {
  LossBreakdown out;
  for (const auto& [task, o] : outputs) {
    auto it = targets.find(task);
    if (it == targets.end()) throw ValidationError("missing targets for task " + model::to_string(task));
    const torch::Tensor l = task_loss(task, o, it->second);
    out.per_task[task] = l.item<double>();
    const torch::Tensor weighted = l * cfg.weight(task);
    out.total = out.total.defined() ? out.total + weighted : weighted;
  }
  if (!out.total.defined()) throw ValidationError("no task outputs in the batch");
  return out;
}

// --- optimization -------------------------------------------------------------------------------

namespace {

struct Assembled {
  std::vector<Task> tasks;
  std::vector<std::vector<TaskBatchItem>> items;
};

// One shared encoder pass over every task's inputs, then per-head outputs.
std::map<Task, model::HeadOutput> forward_tasks(model::MultiTaskNet& net, const Assembled& a, const TrainConfig& cfg) {
  std::vector<torch::Tensor> inputs;
  for (const auto& group : a.items)
    for (const auto& i : group) inputs.push_back(i.input);
  const torch::Tensor feats = net->features(torch::stack(inputs));
  std::map<Task, model::HeadOutput> out;
  int64_t offset = 0;
  for (size_t k = 0; k < a.tasks.size(); ++k) {
    const auto n = static_cast<int64_t>(a.items[k].size());
    const torch::Tensor f = feats.narrow(0, offset, n);
    out[a.tasks[k]] = a.tasks[k] == Task::T5 ? net->adversarial_forward(f, cfg.adversarial_scale)
                                             : net->head_forward(f, a.tasks[k]);
    offset += n;
  }
  return out;
}

std::map<Task, TaskTargets> targets_of(const Assembled& a) {
  std::map<Task, TaskTargets> out;
  for (size_t k = 0; k < a.tasks.size(); ++k) out[a.tasks[k]] = stack_targets(a.tasks[k], a.items[k]);
  return out;
}

Assembled assemble(const std::vector<int>& objects, const TrainData& data, const TrainConfig& cfg, Rng& rng,
                   const sequence::PermutationSet& perms) {
  Assembled a;
  for (Task t : cfg.backbone.tasks) {
    if (t == Task::T5) continue;
    std::vector<TaskBatchItem> group;
    for (int idx : objects)
      if (auto item = make_item(t, data, data.objects[static_cast<size_t>(idx)], rng, cfg, perms))
        group.push_back(std::move(*item));
    if (group.empty()) continue;
    a.tasks.push_back(t);
    a.items.push_back(std::move(group));
  }
  return a;
}

}  // namespace

EpochStats train_epoch(model::MultiTaskNet& net, torch::optim::Optimizer& opt, const TrainData& data,
                       const std::vector<int>& train, const TrainConfig& cfg, int epoch,
                       const sequence::PermutationSet& perms) {
  const auto e = static_cast<std::uint64_t>(epoch);
  Rng shuffle_rng(derive_seed(cfg.seed, 11, e)), aug_rng(derive_seed(cfg.seed, 12, e)),
      pseudo_rng(derive_seed(cfg.seed, 13, e));
  std::vector<int> order = train;
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  const bool adversarial = cfg.backbone.has(Task::T5) && epoch >= cfg.adversarial_start_epoch;
  if (adversarial && data.pseudo.empty())
    throw ConfigError("T5 is enabled but no pseudo-anomaly images were provided");
  const int n_pseudo = std::max(1, static_cast<int>(std::lround(cfg.pseudo_ratio * cfg.batch_size)));

  net->train();
  EpochStats stats;
  stats.epoch = epoch;
  std::map<Task, double> sums;
  std::map<Task, int> counts;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
    const std::vector<int> batch(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
    Assembled a = assemble(batch, data, cfg, aug_rng, perms);
    if (adversarial) {
      std::vector<TaskBatchItem> group;
      std::uniform_int_distribution<size_t> pick(0, data.pseudo.size() - 1);
      for (int k = 0; k < n_pseudo; ++k) group.push_back(pseudo_item(data.pseudo[pick(pseudo_rng)], cfg.backbone.input_length));
      stats.pseudo_items += n_pseudo;
      a.tasks.push_back(Task::T5);
      a.items.push_back(std::move(group));
    }
    if (a.tasks.empty()) continue;
    const auto outputs = forward_tasks(net, a, cfg);
    const LossBreakdown loss = multi_task_loss(outputs, targets_of(a), cfg);
    for (const auto& [t, v] : loss.per_task)
      if (!std::isfinite(v))
        throw NonFiniteLossError("non-finite loss for task " + model::to_string(t) + " in epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(stats.batches));
    opt.zero_grad();
    loss.total.backward();
    opt.step();
    for (const auto& [t, v] : loss.per_task) {
      sums[t] += v;
      ++counts[t];
    }
    ++stats.batches;
  }
  for (const auto& [t, s] : sums) stats.train_loss[t] = s / counts[t];
  return stats;
}

std::map<Task, double> validation_loss(model::MultiTaskNet& net, const TrainData& data, const std::vector<int>& val,
                                       const TrainConfig& cfg, const sequence::PermutationSet& perms) {
  torch::NoGradGuard no_grad;
  net->eval();
  Rng rng(derive_seed(cfg.seed, 21));
  std::map<Task, double> sums;
  std::map<Task, int64_t> counts;
  for (size_t start = 0; start < val.size(); start += static_cast<size_t>(cfg.batch_size)) {
    const size_t end = std::min(val.size(), start + static_cast<size_t>(cfg.batch_size));
    const std::vector<int> batch(val.begin() + static_cast<long>(start), val.begin() + static_cast<long>(end));
    const Assembled a = assemble(batch, data, cfg, rng, perms);
    if (a.tasks.empty()) continue;
    const auto outputs = forward_tasks(net, a, cfg);
    const auto targets = targets_of(a);
    for (size_t k = 0; k < a.tasks.size(); ++k) {
      const Task t = a.tasks[k];
      const auto n = static_cast<int64_t>(a.items[k].size());
      sums[t] += task_loss(t, outputs.at(t), targets.at(t)).item<double>() * double(n);
      counts[t] += n;
    }
  }
  std::map<Task, double> out;
  for (const auto& [t, s] : sums) out[t] = s / double(counts[t]);
  return out;
}

int select_best_epoch(const std::vector<double>& val_totals) {
  if (val_totals.empty()) throw ValidationError("no validation losses to select from");
  return static_cast<int>(std::min_element(val_totals.begin(), val_totals.end()) - val_totals.begin());
}

std::vector<score::HeadScoreVector> validation_scores(model::MultiTaskNet& net, const TrainData& data,
                                                      const std::vector<int>& val, const TrainConfig& cfg,
                                                      const sequence::PermutationSet& perms) {
  std::vector<score::ObjectInput> inputs;
  for (int idx : val) {
    const auto& o = data.objects[static_cast<size_t>(idx)];
    auto seq = sequence::extract(*data.frames[static_cast<size_t>(o.video)], o.box, o.frame, cfg.half_length);
    if (seq) inputs.push_back({seq->crops, o.class_probs});
  }
  Rng rng(derive_seed(cfg.seed, 31));
  return score::head_scores(net, inputs, &perms, cfg.score, rng);
}

FitResult fit(const TrainConfig& cfg, const TrainData& data, const EpochCallback& on_epoch) {
  cfg.validate();
  const Split split = split_train_val(static_cast<int>(data.objects.size()), cfg.val_fraction, derive_seed(cfg.seed, 1));
  FitResult result;
  result.net = model::MultiTaskNet(cfg.backbone, cfg.seed);
  result.perms = sequence::build_permutation_set(cfg.permutation_seed, cfg.backbone.jigsaw_classes);
  torch::optim::Adam opt(result.net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));

  std::vector<double> totals;
  std::vector<torch::Tensor> best;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats stats = train_epoch(result.net, opt, data, split.train, cfg, epoch, result.perms);
    stats.val_loss = validation_loss(result.net, data, split.val, cfg, result.perms);
    double total = 0;
    for (const auto& [t, v] : stats.val_loss) total += v;
    stats.val_total = stats.val_loss.empty() ? 0.0 : total / double(stats.val_loss.size());
    totals.push_back(stats.val_total);
    if (select_best_epoch(totals) == epoch) best = model::snapshot(*result.net);
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats, result.net);
  }
  result.best_epoch = select_best_epoch(totals);
  model::restore(*result.net, best);
  result.net->eval();
  result.norm = score::compute_normalization(validation_scores(result.net, data, split.val, cfg, result.perms));
  return result;
}

void save_result(const fs::path& file, const FitResult& result, const TrainConfig& cfg) {
  json history = json::array();
  for (const auto& s : result.history) {
    json train = json::object(), val = json::object();
    for (const auto& [t, v] : s.train_loss) train[model::to_string(t)] = v;
    for (const auto& [t, v] : s.val_loss) val[model::to_string(t)] = v;
    history.push_back({{"epoch", s.epoch}, {"train", train}, {"val", val}, {"val_total", s.val_total}});
  }
  const json meta = {{"train", cfg},
                     {"permutations", json::parse(sequence::permutation_set_to_json(result.perms))},
                     {"normalization", result.norm},
                     {"best_epoch", result.best_epoch},
                     {"history", history}};
  model::MultiTaskNet net = result.net;
  model::save_checkpoint(file, net, meta);
}

void write_log_csv(const fs::path& file, const std::vector<EpochStats>& history, const model::TaskSet& tasks) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  out << "epoch";
  for (Task t : tasks) out << ",train_" << model::to_string(t);
  for (Task t : tasks)
    if (t != Task::T5) out << ",val_" << model::to_string(t);
  out << ",val_total,pseudo_items\n";
  out.precision(10);
  auto cell = [](const std::map<Task, double>& m, Task t) {
    auto it = m.find(t);
    return it == m.end() ? std::string() : std::to_string(it->second);
  };
  for (const auto& s : history) {
    out << s.epoch;
    for (Task t : tasks) out << ',' << cell(s.train_loss, t);
    for (Task t : tasks)
      if (t != Task::T5) out << ',' << cell(s.val_loss, t);
    out << ',' << s.val_total << ',' << s.pseudo_items << '\n';
  }
  if (!out) throw Error("failed to write " + file.string());
}

}  // namespace ssmtl::train
