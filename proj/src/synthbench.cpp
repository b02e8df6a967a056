#include "ssmtl/synthbench.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "ssmtl/error.hpp"
#include "ssmtl/rng.hpp"

namespace ssmtl::synthbench {

namespace fs = std::filesystem;
using nlohmann::json;
using Rng = std::mt19937_64;

std::string to_string(AnomalyKind kind) {
  switch (kind) {
    case AnomalyKind::reversed_motion: return "reversed_motion";
    case AnomalyKind::speed_anomaly: return "speed_anomaly";
    case AnomalyKind::unseen_shape: return "unseen_shape";
    case AnomalyKind::erratic_path: return "erratic_path";
  }
  return "reversed_motion";
}

AnomalyKind parse_anomaly_kind(const std::string& name) {
  for (auto k : {AnomalyKind::reversed_motion, AnomalyKind::speed_anomaly, AnomalyKind::unseen_shape,
                 AnomalyKind::erratic_path})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown anomaly kind '" + name + "'");
}

std::string kind_name(int kind) {
  static const char* names[] = {"striped_square", "shaded_disc", "dotted_block", "unseen"};
  return names[std::clamp(kind, 0, 3)];
}

void SceneConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("scene config: " + m); };
  if (height < 16 || width < 16) fail("resolution too small");
  if (train_videos < 0 || test_videos < 0 || train_videos + test_videos == 0) fail("no videos requested");
  if (frames < 1) fail("frames must be >= 1");
  if (actors < 1) fail("at least one actor is needed");
  if (!(speed_min > 0) || speed_max < speed_min) fail("bad velocity range");
  if (size_min < 4 || size_max < size_min) fail("bad actor size range");
  if (lane_spacing() < std::max(size_max, unseen_size)) fail("lanes too narrow for the actor sizes");
  if (speed_max * std::max(1.0, speed_factor) >= size_min / 2.0) fail("velocities must stay below half the actor size");
  if (!anomaly_kinds.empty() && test_videos > 0) {
    if (anomaly_length < 1 || anomaly_length > frames) fail("anomaly interval does not fit the video");
    if (anomaly_start >= 0 && anomaly_start + anomaly_length > frames) fail("anomaly interval exceeds the video");
    const double room = width - size_max;
    for (auto k : anomaly_kinds) {
      double travel = speed_max * anomaly_length;
      if (k == AnomalyKind::speed_anomaly) travel *= speed_factor;
      if (k == AnomalyKind::erratic_path) travel *= 2;
      if (k == AnomalyKind::unseen_shape) travel += unseen_size - size_max;
      if (travel > room) fail(to_string(k) + " actor would leave the frame during its interval");
    }
  }
  if (erratic_amplitude < 0 || erratic_amplitude * 2 > lane_spacing() - size_max)
    fail("erratic amplitude exceeds the lane gap");
  if (spurious_rate < 0 || spurious_rate > 1) fail("spurious_rate must be in [0, 1]");
  if (pseudo_images < 0) fail("pseudo_images must be >= 0");
}

void to_json(json& j, const SceneConfig& c) {
  std::vector<std::string> kinds;
  for (auto k : c.anomaly_kinds) kinds.push_back(to_string(k));
  j = {{"height", c.height},
       {"width", c.width},
       {"train_videos", c.train_videos},
       {"test_videos", c.test_videos},
       {"frames", c.frames},
       {"actors", c.actors},
       {"speed_min", c.speed_min},
       {"speed_max", c.speed_max},
       {"size_min", c.size_min},
       {"size_max", c.size_max},
       {"unseen_size", c.unseen_size},
       {"anomaly_kinds", kinds},
       {"anomaly_length", c.anomaly_length},
       {"anomaly_start", c.anomaly_start},
       {"speed_factor", c.speed_factor},
       {"erratic_amplitude", c.erratic_amplitude},
       {"spurious_rate", c.spurious_rate},
       {"pseudo_images", c.pseudo_images},
       {"teachers", c.teachers},
       {"png_compression", c.png_compression},
       {"seed", c.seed}};
}

void from_json(const json& j, SceneConfig& c) {
  const SceneConfig d;
  c.height = j.value("height", d.height);
  c.width = j.value("width", d.width);
  c.train_videos = j.value("train_videos", d.train_videos);
  c.test_videos = j.value("test_videos", d.test_videos);
  c.frames = j.value("frames", d.frames);
  c.actors = j.value("actors", d.actors);
  c.speed_min = j.value("speed_min", d.speed_min);
  c.speed_max = j.value("speed_max", d.speed_max);
  c.size_min = j.value("size_min", d.size_min);
  c.size_max = j.value("size_max", d.size_max);
  c.unseen_size = j.value("unseen_size", d.unseen_size);
  if (j.contains("anomaly_kinds")) {
    c.anomaly_kinds.clear();
    for (const auto& k : j.at("anomaly_kinds")) c.anomaly_kinds.push_back(parse_anomaly_kind(k.get<std::string>()));
  }
  c.anomaly_length = j.value("anomaly_length", d.anomaly_length);
  c.anomaly_start = j.value("anomaly_start", d.anomaly_start);
  c.speed_factor = j.value("speed_factor", d.speed_factor);
  c.erratic_amplitude = j.value("erratic_amplitude", d.erratic_amplitude);
  c.spurious_rate = j.value("spurious_rate", d.spurious_rate);
  c.pseudo_images = j.value("pseudo_images", d.pseudo_images);
  c.teachers = j.value("teachers", d.teachers);
  c.png_compression = j.value("png_compression", d.png_compression);
  c.seed = j.value("seed", d.seed);
}

void to_json(json& j, const PlantedAnomaly& a) {
  j = {{"video", a.video}, {"kind", to_string(a.kind)}, {"first", a.first}, {"last", a.last}, {"track_id", a.track_id}};
}

std::string video_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", index + 1);
  return buf;
}

namespace {

std::uint64_t derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) { return derive_seed(seed, a, b); }

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

enum Shape { kSquare = 0, kDisc = 1, kBlock = 2, kTriangle = 3, kCross = 4 };

struct Actor {
  int track_id = 0;
  int kind = 0;
  int shape = kSquare;
  double w = 0, h = 0;
  double speed = 0;
  double lane_y = 0;  // lane centre
  int first = 0, last = 0;  // visible frame range (inclusive)
  bool anomalous = false;
  std::vector<double> x, y;    // top-left per frame
  std::vector<double> vx, vy;  // displacement to the next frame
};

bool inside(const Actor& a, double u, double v) {
  if (u < 0 || v < 0 || u >= a.w || v >= a.h) return false;
  switch (a.shape) {
    case kDisc: {
      const double r = a.w / 2;
      return (u - r) * (u - r) + (v - r) * (v - r) < r * r;
    }
    case kTriangle: return std::abs(u - a.w / 2) <= v / 2;
    case kCross: {
      const double t = a.w / 3;
      return (u >= t && u < 2 * t) || (v >= t && v < 2 * t);
    }
    default: return true;
  }
}

// Normal kinds: a per-kind hue over blocky value noise, so displacement is unambiguous.
// The unseen kind keeps a checkerboard no normal actor shares.
cv::Vec3b texture(const Actor& a, double u, double v) {
  if (a.kind >= kNormalKinds)
    return ((static_cast<int>(std::floor(u / 7)) + static_cast<int>(std::floor(v / 7))) % 2) ? cv::Vec3b(240, 230, 40)
                                                                                              : cv::Vec3b(150, 30, 190);
  static const std::array<cv::Vec3d, kNormalKinds> hues{cv::Vec3d(200, 60, 60), cv::Vec3d(50, 90, 210),
                                                        cv::Vec3d(60, 170, 80)};
  const auto cu = static_cast<std::uint64_t>(std::floor(u / 5)), cv_ = static_cast<std::uint64_t>(std::floor(v / 5));
  const double noise = double(splitmix64(derive(static_cast<std::uint64_t>(a.kind), cu, cv_)) >> 11) * 0x1.0p-53;
  const cv::Vec3d c = hues[static_cast<size_t>(a.kind)] * (0.5 + 0.8 * noise);
  return cv::Vec3b(cv::saturate_cast<uchar>(c[0]), cv::saturate_cast<uchar>(c[1]), cv::saturate_cast<uchar>(c[2]));
}

double wrap_x(double x, double w, int width) {
  const double period = width + w;
  double r = std::fmod(x + w, period);
  if (r < 0) r += period;
  return r - w;
}

// Integrates constant-speed motion from x0, wrapping at the right border.
void integrate(Actor& a, double x0, int frames, int width) {
  a.x.assign(static_cast<size_t>(frames), 0.0);
  a.y.assign(static_cast<size_t>(frames), a.lane_y - a.h / 2);
  double x = x0, y = a.lane_y - a.h / 2;
  for (int f = 0; f < frames; ++f) {
    a.x[static_cast<size_t>(f)] = x;
    a.y[static_cast<size_t>(f)] = y;
    x += a.vx[static_cast<size_t>(f)];
    y += a.vy[static_cast<size_t>(f)];
    if (x >= width) x = wrap_x(x, a.w, width);
  }
}

std::vector<float> pose_keypoints(int kind) {
  std::vector<float> out;
  for (int k = 0; k < 17; ++k) {
    const double angle = 2 * std::numbers::pi * k / 17.0 + 0.5 * kind;
    const double r = 0.25 + 0.1 * ((k + kind) % 3);
    out.push_back(static_cast<float>(0.5 + r * std::cos(angle)));
    out.push_back(static_cast<float>(0.5 + r * std::sin(angle)));
  }
  return out;
}

}  // namespace

cv::Mat background(const SceneConfig& cfg) {
  Rng rng(derive(cfg.seed, 0xB4C6));
  const double p1 = uniform(rng, 0, 6.28), p2 = uniform(rng, 0, 6.28), p3 = uniform(rng, 0, 6.28);
  cv::Mat bg(cfg.height, cfg.width, CV_8UC3);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) {
      const double g = 100 + 20 * std::sin(x / 17.0 + p1) * std::cos(y / 23.0 + p2) + 10 * std::sin((x + y) / 41.0 + p3);
      bg.at<cv::Vec3b>(y, x) = cv::Vec3b(cv::saturate_cast<uchar>(g), cv::saturate_cast<uchar>(g + 8),
                                         cv::saturate_cast<uchar>(g - 6));
    }
  return bg;
}

cv::Mat pseudo_image(std::uint64_t seed, int index, int size) {
  Rng rng(derive(seed, 0x95E0, static_cast<std::uint64_t>(index)));
  auto colour = [&] {
    return cv::Vec3d(uniform(rng, 0, 255), uniform(rng, 0, 255), uniform(rng, 0, 255));
  };
  const cv::Vec3d c1 = colour(), c2 = colour();
  cv::Mat img(size, size, CV_8UC3);
  const int type = index % 3;
  const double freq = uniform(rng, 0.15, 0.8), theta = uniform(rng, 0, std::numbers::pi);
  const int petals = uniform_int(rng, 4, 9);
  std::vector<std::array<double, 3>> blobs;  // cx, cy, sigma
  std::vector<cv::Vec3d> blob_colours;
  for (int b = 0; b < 5; ++b) {
    blobs.push_back({uniform(rng, 0, size), uniform(rng, 0, size), uniform(rng, 4, 14)});
    blob_colours.push_back(colour());
  }
  std::normal_distribution<double> noise(0, 12);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      cv::Vec3d c;
      if (type == 0) {
        const double t = 0.5 + 0.5 * std::sin(freq * (x * std::cos(theta) + y * std::sin(theta)));
        c = c1 * t + c2 * (1 - t);
      } else if (type == 1) {
        const double dx = x - size / 2.0, dy = y - size / 2.0;
        const double r = std::hypot(dx, dy), a = std::atan2(dy, dx);
        const double edge = size * 0.42 * (0.6 + 0.4 * std::cos(petals * a));
        c = r < edge ? c1 * (1 - 0.5 * r / edge) : c2;
      } else {
        c = c2 * 0.3;
        for (size_t b = 0; b < blobs.size(); ++b) {
          const double d2 = std::pow(x - blobs[b][0], 2) + std::pow(y - blobs[b][1], 2);
          c += blob_colours[b] * std::exp(-d2 / (2 * blobs[b][2] * blobs[b][2]));
        }
      }
      for (int k = 0; k < 3; ++k) img.at<cv::Vec3b>(y, x)[k] = cv::saturate_cast<uchar>(c[k] + noise(rng));
    }
  return img;
}

RenderedVideo render_video(const SceneConfig& cfg, bool test, int index) {
  cfg.validate();
  const int n = cfg.frames, W = cfg.width, H = cfg.height;
  Rng rng(derive(cfg.seed, test ? 2 : 1, static_cast<std::uint64_t>(index)));
  RenderedVideo out;
  out.id = video_id(index);
  out.test = test;

  std::vector<Actor> actors;
  for (int i = 0; i < cfg.actors; ++i) {
    Actor a;
    a.track_id = i;
    a.kind = uniform_int(rng, 0, kNormalKinds - 1);
    a.shape = a.kind;
    a.w = uniform_int(rng, cfg.size_min, cfg.size_max);
    a.h = a.kind == kBlock ? std::round(a.w * 0.7) : a.w;
    a.speed = uniform(rng, cfg.speed_min, cfg.speed_max);
    a.lane_y = cfg.lane_spacing() * (i + 0.5);
    a.first = 0;
    a.last = n - 1;
    a.vx.assign(static_cast<size_t>(n), a.speed);
    a.vy.assign(static_cast<size_t>(n), 0.0);
    actors.push_back(std::move(a));
  }
  std::vector<double> x0;
  for (auto& a : actors) x0.push_back(uniform(rng, -a.w, W));

  const bool plant = test && !cfg.anomaly_kinds.empty();
  int anomalous = -1;
  if (plant) {
    const AnomalyKind kind = cfg.anomaly_kinds[static_cast<size_t>(index) % cfg.anomaly_kinds.size()];
    const int L = cfg.anomaly_length;
    int a0 = cfg.anomaly_start;
    if (a0 < 0) {
      const int lo = std::min(30, n - L), hi = std::max(lo, n - L - 30);
      a0 = uniform_int(rng, std::max(0, lo), std::max(0, hi));
    }
    const int a1 = a0 + L - 1;
    if (kind == AnomalyKind::unseen_shape) {
      Actor u;
      u.track_id = cfg.actors;
      u.kind = 3;
      u.shape = uniform_int(rng, 0, 1) ? kCross : kTriangle;
      u.w = u.h = cfg.unseen_size;
      u.speed = uniform(rng, cfg.speed_min, cfg.speed_max);
      u.lane_y = cfg.lane_spacing() * (cfg.actors + 0.5);
      u.first = a0;
      u.last = a1;
      u.vx.assign(static_cast<size_t>(n), u.speed);
      u.vy.assign(static_cast<size_t>(n), 0.0);
      const double xa = uniform(rng, 0, std::max(0.0, W - u.w - u.speed * L));
      x0.push_back(xa - u.speed * a0);  // only positions inside [a0, a1] are ever drawn
      actors.push_back(std::move(u));
      anomalous = static_cast<int>(actors.size()) - 1;
    } else {
      anomalous = uniform_int(rng, 0, cfg.actors - 1);
      Actor& a = actors[static_cast<size_t>(anomalous)];
      double lo = 0, hi = W - a.w;
      for (int f = a0; f <= a1; ++f) {
        auto& vx = a.vx[static_cast<size_t>(f)];
        if (kind == AnomalyKind::reversed_motion) vx = -a.speed;
        if (kind == AnomalyKind::speed_anomaly) vx = a.speed * cfg.speed_factor;
        if (kind == AnomalyKind::erratic_path) vx = a.speed * uniform(rng, 0.0, 2.0);
      }
      if (kind == AnomalyKind::erratic_path) {
        // Vertical offset re-drawn every frame, back on the lane when the interval ends.
        double offset = 0;
        for (int f = a0; f <= a1; ++f) {
          const double target = f == a1 ? 0.0 : uniform(rng, -cfg.erratic_amplitude, cfg.erratic_amplitude);
          a.vy[static_cast<size_t>(f)] = target - offset;
          offset = target;
        }
      }
      double travel_right = 0, travel_left = 0, pos = 0;
      for (int f = a0; f <= a1; ++f) {
        pos += a.vx[static_cast<size_t>(f)];
        travel_right = std::max(travel_right, pos);
        travel_left = std::min(travel_left, pos);
      }
      lo = -travel_left;
      hi = W - a.w - travel_right;
      const double xa = uniform(rng, lo, std::max(lo, hi));
      x0[static_cast<size_t>(anomalous)] = wrap_x(xa - a.speed * a0, a.w, W);
    }
    out.anomalies.push_back({out.id, kind, a0, a1, actors[static_cast<size_t>(anomalous)].track_id});
    actors[static_cast<size_t>(anomalous)].anomalous = true;
  }
  for (size_t i = 0; i < actors.size(); ++i) integrate(actors[i], x0[i], n, W);
  // Normal actors first, the anomalous one on top so its mask is its full silhouette.
  std::vector<size_t> order;
  for (size_t i = 0; i < actors.size(); ++i)
    if (static_cast<int>(i) != anomalous) order.push_back(i);
  if (anomalous >= 0) order.push_back(static_cast<size_t>(anomalous));

  const cv::Mat bg = background(cfg);
  std::vector<short> owner(static_cast<size_t>(H) * W);
  out.frames.reserve(static_cast<size_t>(n));
  Rng det_rng(derive(cfg.seed, test ? 4 : 3, static_cast<std::uint64_t>(index)));
  for (int f = 0; f < n; ++f) {
    cv::Mat img = bg.clone();
    FlowField flow(H, W);
    std::fill(owner.begin(), owner.end(), short(-1));
    for (size_t i : order) {
      const Actor& a = actors[i];
      if (f < a.first || f > a.last) continue;
      const double px = a.x[static_cast<size_t>(f)], py = a.y[static_cast<size_t>(f)];
      const int xs = std::max(0, static_cast<int>(std::floor(px))), xe = std::min(W, static_cast<int>(std::ceil(px + a.w)) + 1);
      const int ys = std::max(0, static_cast<int>(std::floor(py))), ye = std::min(H, static_cast<int>(std::ceil(py + a.h)) + 1);
      const float vx = static_cast<float>(a.vx[static_cast<size_t>(f)]), vy = static_cast<float>(a.vy[static_cast<size_t>(f)]);
      for (int y = ys; y < ye; ++y)
        for (int x = xs; x < xe; ++x) {
          const double u = x + 0.5 - px, v = y + 0.5 - py;
          if (!inside(a, u, v)) continue;
          img.at<cv::Vec3b>(y, x) = texture(a, u, v);
          flow.set(y, x, vx, vy);
          owner[static_cast<size_t>(y) * W + x] = static_cast<short>(i);
        }
    }

    std::vector<ActorTruth> truths;
    std::vector<int> minx(actors.size(), W), miny(actors.size(), H), maxx(actors.size(), -1), maxy(actors.size(), -1);
    std::vector<long> area(actors.size(), 0);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const short o = owner[static_cast<size_t>(y) * W + x];
        if (o < 0) continue;
        const auto k = static_cast<size_t>(o);
        ++area[k];
        minx[k] = std::min(minx[k], x);
        miny[k] = std::min(miny[k], y);
        maxx[k] = std::max(maxx[k], x);
        maxy[k] = std::max(maxy[k], y);
      }
    for (size_t i = 0; i < actors.size(); ++i) {
      if (area[i] == 0) continue;
      ActorTruth t;
      t.track_id = actors[i].track_id;
      t.kind = actors[i].kind;
      t.anomalous = actors[i].anomalous && plant && f >= out.anomalies[0].first && f <= out.anomalies[0].last;
      t.box = Box{double(minx[i]), double(miny[i]), double(maxx[i] + 1), double(maxy[i] + 1)};
      t.area = area[i];
      t.vx = static_cast<float>(actors[i].vx[static_cast<size_t>(f)]);
      t.vy = static_cast<float>(actors[i].vy[static_cast<size_t>(f)]);
      truths.push_back(t);
    }

    // Oracle detector: every visible known-class actor, plus low-confidence clutter.
    std::vector<Detection> dets;
    for (const auto& t : truths) {
      if (t.kind >= kNormalKinds || t.area < 200) continue;
      Detection d;
      d.frame = f;
      d.box = t.box;
      d.confidence = uniform(det_rng, 0.85, 0.99);
      d.class_probs.assign(kDetectorClasses, 0.1 / (kDetectorClasses - 1));
      d.class_probs[static_cast<size_t>(t.kind)] = 0.9;
      d.source = DetectionSource::detector;
      dets.push_back(d);
    }
    if (uniform(det_rng, 0, 1) < cfg.spurious_rate) {
      const double w = uniform(det_rng, 30, 60), h = uniform(det_rng, 30, 60);
      const double x = uniform(det_rng, 0, W - w), y = uniform(det_rng, 0, H - h);
      Detection d;
      d.frame = f;
      d.box = Box{std::round(x), std::round(y), std::round(x + w), std::round(y + h)};
      d.confidence = uniform(det_rng, 0.05, 0.75);
      d.class_probs.assign(kDetectorClasses, 1.0 / kDetectorClasses);
      dets.push_back(d);
    }

    if (test) {
      BinaryMask m(H, W);
      std::uint8_t label = 0;
      if (anomalous >= 0 && f >= out.anomalies[0].first && f <= out.anomalies[0].last) {
        for (size_t p = 0; p < owner.size(); ++p)
          if (owner[p] == anomalous) m.data[p] = 1;
        label = 1;
      }
      out.masks.push_back(std::move(m));
      out.labels.push_back(label);
    } else {
      out.labels.push_back(0);
    }

    if (!test && cfg.teachers) {
      cv::Mat gray;
      cv::cvtColor(img, gray, cv::COLOR_RGB2GRAY);
      for (const auto& d : dets) {
        if (d.confidence < 0.8) continue;
        const auto key = videoio::TeacherKey::of(f, d.box);
        const int x1 = std::clamp(key.box[0], 0, W), y1 = std::clamp(key.box[1], 0, H);
        const int x2 = std::clamp(key.box[2], x1 + 1, W), y2 = std::clamp(key.box[3], y1 + 1, H);
        const short who = [&] {
          for (const auto& t : truths)
            if (t.box == d.box) return static_cast<short>(t.track_id);
          return short(-1);
        }();
        videoio::TeacherRecord feat{key, {}, {}}, seg{key, {1, 16, 16}, {}}, pose{key, {17, 2}, {}};
        std::vector<float> means, stds;
        for (int gy = 0; gy < 4; ++gy)
          for (int gx = 0; gx < 4; ++gx) {
            const int cx1 = x1 + (x2 - x1) * gx / 4, cx2 = std::max(cx1 + 1, x1 + (x2 - x1) * (gx + 1) / 4);
            const int cy1 = y1 + (y2 - y1) * gy / 4, cy2 = std::max(cy1 + 1, y1 + (y2 - y1) * (gy + 1) / 4);
            cv::Scalar mean, sd;
            cv::meanStdDev(gray(cv::Range(cy1, std::min(cy2, H)), cv::Range(cx1, std::min(cx2, W))), mean, sd);
            means.push_back(static_cast<float>(mean[0] / 255.0));
            stds.push_back(static_cast<float>(sd[0] / 255.0));
          }
        feat.values = means;
        feat.values.insert(feat.values.end(), stds.begin(), stds.end());
        for (int gy = 0; gy < 16; ++gy)
          for (int gx = 0; gx < 16; ++gx) {
            long hit = 0, total = 0;
            const int cx1 = x1 + (x2 - x1) * gx / 16, cx2 = std::max(cx1 + 1, x1 + (x2 - x1) * (gx + 1) / 16);
            const int cy1 = y1 + (y2 - y1) * gy / 16, cy2 = std::max(cy1 + 1, y1 + (y2 - y1) * (gy + 1) / 16);
            for (int y = cy1; y < std::min(cy2, H); ++y)
              for (int x = cx1; x < std::min(cx2, W); ++x) {
                ++total;
                hit += owner[static_cast<size_t>(y) * W + x] >= 0 &&
                       actors[static_cast<size_t>(owner[static_cast<size_t>(y) * W + x])].track_id == who;
              }
            seg.values.push_back(total ? static_cast<float>(double(hit) / double(total)) : 0.0f);
          }
        int kind = 0;
        for (const auto& t : truths)
          if (t.track_id == who) kind = t.kind;
        pose.values = pose_keypoints(kind);
        out.teachers["features"].push_back(std::move(feat));
        out.teachers["segmentation"].push_back(std::move(seg));
        out.teachers["pose"].push_back(std::move(pose));
      }
    }

    out.frames.push_back(img);
    out.flows.push_back(std::move(flow));
    out.actors.push_back(std::move(truths));
    out.detections.push_back(std::move(dets));
  }

  if (anomalous >= 0) {
    Track t;
    t.id = actors[static_cast<size_t>(anomalous)].track_id;
    t.kind = to_string(out.anomalies[0].kind);
    for (int f = out.anomalies[0].first; f <= out.anomalies[0].last; ++f)
      for (const auto& a : out.actors[static_cast<size_t>(f)])
        if (a.track_id == t.id) t.regions.push_back({f, a.box});
    out.tracks.push_back(std::move(t));
  }
  return out;
}

namespace {

void write_png(const fs::path& file, const cv::Mat& rgb, int compression) {
  fs::create_directories(file.parent_path());
  cv::Mat bgr;
  if (rgb.channels() == 3) cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  else bgr = rgb;
  if (!cv::imwrite(file.string(), bgr, {cv::IMWRITE_PNG_COMPRESSION, compression}))
    throw Error("failed to write " + file.string());
}

}  // namespace

std::vector<PlantedAnomaly> generate(const SceneConfig& cfg, const fs::path& root) {
  cfg.validate();
  std::vector<PlantedAnomaly> planted;
  for (int split = 0; split < 2; ++split) {
    const bool test = split == 1;
    const videoio::Layout layout{root, test ? "test" : "train"};
    const int count = test ? cfg.test_videos : cfg.train_videos;
    for (int v = 0; v < count; ++v) {
      const RenderedVideo video = render_video(cfg, test, v);
      for (int f = 0; f < cfg.frames; ++f) {
        const auto name = videoio::frame_name(f, ".png");
        write_png(layout.frames_dir(video.id) / name, video.frames[static_cast<size_t>(f)], cfg.png_compression);
        videoio::write_flow(layout.flow_file(video.id, f), video.flows[static_cast<size_t>(f)]);
        if (test) {
          const BinaryMask& m = video.masks[static_cast<size_t>(f)];
          cv::Mat img(m.height, m.width, CV_8U);
          for (size_t p = 0; p < m.data.size(); ++p) img.data[p] = m.data[p] ? 255 : 0;
          write_png(layout.masks_dir(video.id) / name, img, cfg.png_compression);
        }
      }
      videoio::write_labels(layout.labels_file(video.id), video.labels);
      videoio::write_detections(layout.detections_file(video.id), video.detections);
      if (test) videoio::write_tracks(layout.tracks_file(video.id), video.tracks);
      for (const auto& [name, records] : video.teachers)
        videoio::write_teacher(layout.teacher_file(name, video.id), records);
      planted.insert(planted.end(), video.anomalies.begin(), video.anomalies.end());
    }
  }
  for (int i = 0; i < cfg.pseudo_images; ++i)
    write_png(root / "pseudo" / videoio::frame_name(i, ".png"), pseudo_image(cfg.seed, i), cfg.png_compression);

  json meta = {{"config", cfg}, {"anomalies", planted}};
  std::ofstream(root / "synth_config.json") << meta.dump(2) << '\n';
  return planted;
}

}  // namespace ssmtl::synthbench
