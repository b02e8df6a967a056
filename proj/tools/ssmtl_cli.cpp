// ssmtl: synth-generate | detect | prepare | train | score | eval | plot
#include <algorithm>
#include <cstdio>
#include <stdexcept>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <malloc.h>
#include <optional>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <torch/torch.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssmtl/error.hpp"
#include "ssmtl/manifest.hpp"
#include "ssmtl/pipeline.hpp"
#include "ssmtl/plot.hpp"
#include "ssmtl/rng.hpp"
#include "ssmtl/synthbench.hpp"
#include "ssmtl/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ssmtl;

namespace {

// Bad command-line usage discovered after parsing (exit status 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::string out;
};

struct Options {
  Common common;
  std::string data;
  std::string split;
  std::string preset;
  std::string mode = "flow";
  std::string detections;
  std::string corpus;
  std::string pseudo;
  std::string checkpoint;
  std::string scores;
  std::string video;
};

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object: " + path);
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed config file " + path + ": " + e.what());
  }
}

void set_threads(int workers) {
  torch::set_num_threads(std::max(1, workers));
  cv::setNumThreads(std::max(1, workers));
}

RunManifest begin(const std::string& command, const Common& c) {
  RunManifest m;
  m.command = command;
  m.started_at = utc_timestamp();
  m.extra["workers"] = c.workers;
  return m;
}

void finish(RunManifest& m, const fs::path& dir) {
  m.finished_at = utc_timestamp();
  m.write(dir / "manifest.json");
}

std::vector<fs::path> per_video(const fs::path& dir, const videoio::VideoDataset& ds, const std::string& suffix) {
  std::vector<fs::path> out;
  for (const auto& v : ds.videos) out.push_back(dir / (v.id + suffix));
  return out;
}

detect::DetectorConfig detector_config(const json& cfg) {
  detect::DetectorConfig d = cfg.value("detector", json::object()).get<detect::DetectorConfig>();
  d.validate();
  return d;
}

// --- synth-generate ------------------------------------------------------------------------

void cmd_generate(const Options& o) {
  auto scene = read_config(o.common.config).get<synthbench::SceneConfig>();
  if (o.common.seed) scene.seed = *o.common.seed;
  scene.validate();
  const fs::path root = o.common.out;
  OutputGuard guard({root / "train", root / "test", root / "pseudo", root / "synth_config.json",
                     root / "manifest.json", root});
  RunManifest m = begin("synth-generate", o.common);
  m.config = scene;
  m.seed = scene.seed;
  const auto planted = synthbench::generate(scene, root);
  m.outputs = {{"dataset", root.string()}};
  m.extra["anomalies"] = planted;
  finish(m, root);
  guard.commit();
}

// --- detect -------------------------------------------------------------------------------------

void cmd_detect(const Options& o) {
  const json cfg = read_config(o.common.config);
  const auto det = detector_config(cfg);
  const auto mode = detect::parse_mode(o.mode);
  const auto ds = videoio::load_dataset(o.data, o.split);
  const fs::path out = o.common.out;
  auto outputs = per_video(out, ds, ".jsonl");
  outputs.push_back(out / "manifest.json");
  outputs.push_back(out);
  OutputGuard guard(outputs);
  RunManifest m = begin("detect", o.common);
  m.config = {{"detector", det}, {"mode", detect::to_string(mode)}};
  m.inputs = {{"data", o.data}, {"split", o.split}};
  const auto dets = pipeline::detect_dataset(ds, mode, det, o.common.workers);
  pipeline::write_dataset_detections(out, dets);
  std::size_t total = 0;
  for (const auto& [id, frames] : dets)
    for (const auto& f : frames) total += f.size();
  m.outputs = {{"detections", out.string()}, {"count", total}};
  finish(m, out);
  guard.commit();
}

// --- prepare / train ----------------------------------------------------------------------------

train::TrainConfig train_config(const Options& o, json& raw) {
  raw = read_config(o.common.config);
  if (!o.preset.empty()) raw["preset"] = o.preset;
  if (!raw.contains("preset")) raw["preset"] = "ssmtl++v1";
  const auto names = train::preset_names();
  if (!raw["preset"].is_string() ||
      std::find(names.begin(), names.end(), raw["preset"].get<std::string>()) == names.end())
    throw UsageError("unknown preset " + raw["preset"].dump());
  json body = raw;
  body.erase("detector");
  auto cfg = body.get<train::TrainConfig>();
  if (o.common.seed) cfg.seed = *o.common.seed;
  cfg.validate();
  return cfg;
}

std::vector<pipeline::PerFrame> corpus_detections(const std::string& file, const videoio::VideoDataset& ds) {
  std::vector<pipeline::PerFrame> out;
  std::map<std::string, size_t> index;
  for (const auto& v : ds.videos) {
    index[v.id] = out.size();
    out.emplace_back(static_cast<size_t>(v.frame_count));
  }
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open corpus " + file);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const auto it = index.find(j.at("video").get<std::string>());
      if (it == index.end()) throw ValidationError("unknown video");
      auto& frames = out[it->second];
      const int f = j.at("frame").get<int>();
      if (f < 0 || f >= static_cast<int>(frames.size())) throw ValidationError("frame out of range");
      const auto b = j.at("box").get<std::vector<double>>();
      if (b.size() != 4) throw ValidationError("box needs four coordinates");
      Detection d;
      d.frame = f;
      d.box = Box{b[0], b[1], b[2], b[3]};
      d.class_probs = j.value("class_probs", std::vector<double>{});
      frames[static_cast<size_t>(f)].push_back(std::move(d));
    } catch (const json::exception& e) {
      throw ValidationError(file + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError(file + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

train::TrainData load_training_data(const Options& o, const videoio::VideoDataset& ds, train::TrainConfig cfg,
                                    const detect::DetectorConfig& det, json& inputs) {
  train::TrainData data;
  if (!o.corpus.empty()) {
    inputs["corpus"] = o.corpus;
    cfg.frame_stride = 1;
    cfg.max_objects = 0;
    data = train::build_corpus(ds, corpus_detections(o.corpus, ds), cfg);
  } else if (!o.detections.empty()) {
    inputs["detections"] = o.detections;
    data = train::build_corpus(ds, pipeline::ordered(pipeline::read_dataset_detections(o.detections, ds), ds), cfg);
  } else {
    inputs["detections"] = "computed:" + cfg.detection_mode;
    const auto dets = pipeline::detect_dataset(ds, detect::parse_mode(cfg.detection_mode), det, o.common.workers);
    data = train::build_corpus(ds, pipeline::ordered(dets, ds), cfg);
  }
  return data;
}

void cmd_prepare(const Options& o) {
  json raw;
  const auto cfg = train_config(o, raw);
  const auto det = detector_config(raw);
  const auto ds = videoio::load_dataset(o.data, o.split);
  const fs::path out = o.common.out;
  OutputGuard guard({out / "corpus.jsonl", out / "permutations.json", out / "manifest.json", out});
  RunManifest m = begin("prepare", o.common);
  m.config = cfg;
  m.config["detector"] = det;
  m.seed = cfg.seed;
  m.inputs = {{"data", o.data}, {"split", o.split}};
  const auto data = load_training_data(o, ds, cfg, det, m.inputs);
  fs::create_directories(out);
  {
    std::ofstream f(out / "corpus.jsonl");
    for (const auto& obj : data.objects) {
      f << json{{"video", data.video_ids[static_cast<size_t>(obj.video)]},
                {"frame", obj.frame},
                {"box", {obj.box.x1, obj.box.y1, obj.box.x2, obj.box.y2}},
                {"class_probs", obj.class_probs},
                {"teacher", {{"features", !obj.teacher_features.empty()},
                             {"segmentation", !obj.teacher_segmentation.empty()},
                             {"pose", !obj.teacher_pose.empty()}}}}
               .dump()
        << '\n';
    }
    if (!f) throw Error("failed to write corpus");
  }
  sequence::save_permutation_set(out / "permutations.json",
                                 sequence::build_permutation_set(cfg.permutation_seed, cfg.backbone.jigsaw_classes));
  const auto split = train::split_train_val(static_cast<int>(data.objects.size()), cfg.val_fraction,
                                            derive_seed(cfg.seed, 1));
  m.outputs = {{"corpus", (out / "corpus.jsonl").string()},
               {"permutations", (out / "permutations.json").string()},
               {"objects", static_cast<std::int64_t>(data.objects.size())},
               {"train_objects", static_cast<std::int64_t>(split.train.size())},
               {"val_objects", static_cast<std::int64_t>(split.val.size())}};
  finish(m, out);
  guard.commit();
}

void cmd_train(const Options& o) {
  json raw;
  const auto cfg = train_config(o, raw);
  const auto det = detector_config(raw);
  set_threads(o.common.workers);
  const auto ds = videoio::load_dataset(o.data, o.split);
  const fs::path out = o.common.out;
  OutputGuard guard({out / "model.ckpt", out / "train_log.csv", out / "manifest.json", out});
  RunManifest m = begin("train", o.common);
  m.config = cfg;
  m.config["detector"] = det;
  m.seed = cfg.seed;
  m.inputs = {{"data", o.data}, {"split", o.split}};

  auto data = load_training_data(o, ds, cfg, det, m.inputs);
  if (cfg.backbone.has(model::Task::T5)) {
    const fs::path pseudo = o.pseudo.empty() ? fs::path(o.data) / "pseudo" : fs::path(o.pseudo);
    if (fs::is_directory(pseudo)) {
      data.pseudo = train::load_pseudo_images(pseudo);
      m.inputs["pseudo"] = pseudo.string();
    } else if (cfg.adversarial_start_epoch < cfg.epochs) {
      throw ConfigError("T5 needs pseudo-anomaly images; none found at " + pseudo.string());
    }
  }
  std::cerr << "train: " << data.objects.size() << " objects, " << data.pseudo.size() << " pseudo images, tasks "
            << json(model::task_names(cfg.backbone.tasks)).dump() << "\n";
  const auto result = train::fit(cfg, data, [&](const train::EpochStats& s, model::MultiTaskNet&) {
    std::cerr << "epoch " << s.epoch << " val " << s.val_total << " (" << s.batches << " batches)\n";
  });
  train::save_result(out / "model.ckpt", result, cfg);
  train::write_log_csv(out / "train_log.csv", result.history, cfg.backbone.tasks);
  m.outputs = {{"checkpoint", (out / "model.ckpt").string()}, {"log", (out / "train_log.csv").string()}};
  m.extra["tasks"] = model::task_names(cfg.backbone.tasks);
  m.extra["preset"] = cfg.preset;
  m.extra["best_epoch"] = result.best_epoch;
  m.extra["objects"] = data.objects.size();
  finish(m, out);
  guard.commit();
}

// --- score -----------------------------------------------------------------------------------

void cmd_score(const Options& o) {
  set_threads(o.common.workers);
  auto ckpt = model::load_checkpoint(o.checkpoint);
  const json overrides = read_config(o.common.config);
  json train_cfg = ckpt.meta.value("train", json::object());
  json score_json = train_cfg.value("score", json::object());
  score_json.merge_patch(overrides.value("score", json::object()));
  auto scfg = score_json.get<score::ScoreConfig>();
  if (o.common.seed) scfg.seed = *o.common.seed;
  scfg.validate();
  if (!ckpt.meta.contains("normalization")) throw ConfigError("checkpoint carries no normalization statistics");
  const auto norm = ckpt.meta.at("normalization").get<score::NormalizationStats>();
  std::optional<sequence::PermutationSet> perms;
  if (ckpt.meta.contains("permutations"))
    perms = sequence::permutation_set_from_json(ckpt.meta.at("permutations").dump());

  const auto ds = videoio::load_dataset(o.data, o.split);
  const fs::path out = o.common.out;
  auto outputs = per_video(out, ds, ".csv");
  for (auto& p : per_video(out, ds, ".objects.jsonl")) outputs.push_back(p);
  outputs.push_back(out / "manifest.json");
  outputs.push_back(out);
  OutputGuard guard(outputs);
  RunManifest m = begin("score", o.common);
  m.config = {{"score", scfg}};
  m.seed = scfg.seed;
  m.inputs = {{"data", o.data}, {"split", o.split}, {"checkpoint", o.checkpoint}};

  pipeline::DatasetDetections dets;
  if (!o.detections.empty()) {
    m.inputs["detections"] = o.detections;
    dets = pipeline::read_dataset_detections(o.detections, ds);
  } else {
    const std::string mode = overrides.value("mode", train_cfg.value("detection_mode", std::string("flow")));
    const auto det = detector_config(overrides.contains("detector") ? overrides : train_cfg);
    m.inputs["detections"] = "computed:" + mode;
    dets = pipeline::detect_dataset(ds, detect::parse_mode(mode), det, o.common.workers);
  }
  const auto scores = pipeline::score_dataset(ckpt.net, ds, dets, norm, perms ? &*perms : nullptr, scfg);
  pipeline::write_dataset_scores(out, scores, ckpt.net->config().tasks);
  m.outputs = {{"scores", out.string()}};
  m.extra["tasks"] = model::task_names(ckpt.net->config().tasks);
  finish(m, out);
  guard.commit();
}

// --- eval / plot -----------------------------------------------------------------------------

eval::CriterionParams criterion_params(const json& cfg) {
  eval::CriterionParams p;
  const json c = cfg.value("criteria", json::object());
  p.iou_threshold = c.value("iou_threshold", p.iou_threshold);
  p.track_fraction = c.value("track_fraction", p.track_fraction);
  if (c.contains("fpr_range")) {
    const auto r = c.at("fpr_range").get<std::vector<double>>();
    if (r.size() != 2) throw ConfigError("fpr_range needs two values");
    p.fpr_min = r[0];
    p.fpr_max = r[1];
  }
  if (!(p.iou_threshold > 0 && p.iou_threshold <= 1) || !(p.track_fraction > 0 && p.track_fraction <= 1) ||
      !(p.fpr_min >= 0 && p.fpr_max > p.fpr_min))
    throw ConfigError("invalid detection-criterion parameters");
  return p;
}

void cmd_eval(const Options& o) {
  const auto params = criterion_params(read_config(o.common.config));
  const auto ds = videoio::load_dataset(o.data, o.split);
  const fs::path out = o.common.out;
  OutputGuard guard({out / "eval.json", out / "manifest.json", out});
  RunManifest m = begin("eval", o.common);
  m.config = {{"criteria", params}};
  m.inputs = {{"data", o.data}, {"split", o.split}, {"scores", o.scores}};
  const auto report = pipeline::evaluate(ds, pipeline::read_dataset_scores(o.scores, ds), params);
  fs::create_directories(out);
  {
    std::ofstream f(out / "eval.json");
    f << report.to_json().dump(2) << '\n';
    if (!f) throw Error("failed to write eval report");
  }
  m.outputs = {{"report", (out / "eval.json").string()}};
  finish(m, out);
  guard.commit();
  std::cout << report.to_json().dump() << '\n';
}

void cmd_plot(const Options& o) {
  const auto ds = videoio::load_dataset(o.data, o.split);
  const auto scores = pipeline::read_dataset_scores(o.scores, ds);
  const fs::path out = o.common.out;
  std::vector<std::string> ids;
  for (const auto& v : ds.videos)
    if (o.video.empty() || v.id == o.video) ids.push_back(v.id);
  if (ids.empty()) throw ConfigError("unknown video " + o.video);
  std::vector<fs::path> outputs;
  for (const auto& id : ids) {
    outputs.push_back(out / (id + ".png"));
    outputs.push_back(out / (id + ".csv"));
  }
  outputs.push_back(out / "manifest.json");
  outputs.push_back(out);
  OutputGuard guard(outputs);
  RunManifest m = begin("plot", o.common);
  m.config = json::object();
  m.inputs = {{"data", o.data}, {"split", o.split}, {"scores", o.scores}};
  fs::create_directories(out);
  for (const auto& id : ids) {
    const auto gt = videoio::load_ground_truth(ds, id);
    const auto& series = scores.videos.at(id).series;
    const cv::Mat img = plot::render_scores(series, gt.labels, "video " + id);
    if (!cv::imwrite((out / (id + ".png")).string(), img)) throw Error("failed to write plot for " + id);
    plot::write_plot_csv(out / (id + ".csv"), series, gt.labels);
  }
  m.outputs = {{"plots", out.string()}, {"videos", ids}};
  finish(m, out);
  guard.commit();
}

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--config", c.config, "JSON configuration file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Seed overriding the configuration");
  app->add_option("--workers", c.workers, "Worker threads (1 = bitwise reproducible)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  auto* out = app->add_option("--out", c.out, "Output location");
  if (out_required) out->required();
}

}  // namespace

int main(int argc, char** argv) {
  // Keep large tensor buffers on the heap instead of an mmap/munmap round trip per step.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Object-centric video anomaly detection with self-supervised multi-task learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  Options o;
  const auto presets = train::preset_names();
  const std::vector<std::string> modes{"provider", "flow", "background", "flow+background"};

  auto* gen = app.add_subcommand("synth-generate", "Render the synthetic benchmark");
  add_common(gen, o.common);

  auto* det = app.add_subcommand("detect", "Fused object detection (provider, +flow, +background)");
  add_common(det, o.common);
  det->add_option("--data", o.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  det->add_option("--split", o.split, "train or test")->default_val("test");
  det->add_option("--mode", o.mode, "Detector set")->check(CLI::IsMember(modes))->capture_default_str();

  auto* prep = app.add_subcommand("prepare", "Build the training object corpus");
  add_common(prep, o.common);
  prep->add_option("--data", o.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  prep->add_option("--split", o.split, "Split")->default_val("train");
  prep->add_option("--preset", o.preset, "Task preset")->check(CLI::IsMember(presets));
  prep->add_option("--detections", o.detections, "Directory of per-video detections")->check(CLI::ExistingDirectory);

  auto* tr = app.add_subcommand("train", "Train the multi-task network");
  add_common(tr, o.common);
  tr->add_option("--data", o.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--split", o.split, "Split")->default_val("train");
  tr->add_option("--preset", o.preset, "Task preset")->check(CLI::IsMember(presets));
  auto* tr_det =
      tr->add_option("--detections", o.detections, "Directory of per-video detections")->check(CLI::ExistingDirectory);
  tr->add_option("--corpus", o.corpus, "corpus.jsonl written by prepare")->check(CLI::ExistingFile)->excludes(tr_det);
  tr->add_option("--pseudo", o.pseudo, "Pseudo-anomaly image directory (default <data>/pseudo)");

  auto* sc = app.add_subcommand("score", "Score test videos with a checkpoint");
  add_common(sc, o.common);
  sc->add_option("--data", o.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  sc->add_option("--split", o.split, "Split")->default_val("test");
  sc->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  sc->add_option("--detections", o.detections, "Directory of per-video detections")->check(CLI::ExistingDirectory);

  auto* ev = app.add_subcommand("eval", "Frame AUC and region/track detection criteria");
  add_common(ev, o.common);
  ev->add_option("--data", o.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", o.split, "Split")->default_val("test");
  ev->add_option("--scores", o.scores, "Directory written by score")->required()->check(CLI::ExistingDirectory);

  auto* pl = app.add_subcommand("plot", "Score curves with anomalous frames shaded (PNG + CSV)");
  add_common(pl, o.common);
  pl->add_option("--data", o.data, "Dataset root")->required()->check(CLI::ExistingDirectory);
  pl->add_option("--split", o.split, "Split")->default_val("test");
  pl->add_option("--scores", o.scores, "Directory written by score")->required()->check(CLI::ExistingDirectory);
  pl->add_option("--video", o.video, "Single video id (default all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) cmd_generate(o);
    else if (*det) cmd_detect(o);
    else if (*prep) cmd_prepare(o);
    else if (*tr) cmd_train(o);
    else if (*sc) cmd_score(o);
    else if (*ev) cmd_eval(o);
    else if (*pl) cmd_plot(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
