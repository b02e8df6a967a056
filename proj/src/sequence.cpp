#include "ssmtl/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "json.hpp"
#include "ssmtl/error.hpp"

namespace ssmtl::sequence {

std::optional<torch::Tensor> crop_resize(const cv::Mat& rgb, const Box& box, int size) {
  const Box b = box.rounded().clamped(rgb.cols, rgb.rows);
  const int x1 = int(b.x1), y1 = int(b.y1), x2 = int(b.x2), y2 = int(b.y2);
  if (x2 <= x1 || y2 <= y1) return std::nullopt;
  cv::Mat resized;
  cv::resize(rgb(cv::Rect(x1, y1, x2 - x1, y2 - y1)), resized, cv::Size(size, size), 0, 0, cv::INTER_LINEAR);
  cv::Mat as_float;
  resized.convertTo(as_float, CV_32FC3, 1.0 / 255.0);
  return torch::from_blob(as_float.data, {size, size, 3}, torch::kFloat32).clone();
}

std::vector<int> sequence_indices(int center, int half_length, int stride, int frame_count) {
  std::vector<int> idx;
  idx.reserve(static_cast<size_t>(2 * half_length + 1));
  for (int k = -half_length; k <= half_length; ++k) idx.push_back(std::clamp(center + k * stride, 0, frame_count - 1));
  return idx;
}

std::optional<TemporalSequence> extract(const FrameSource& frames, const Box& box, int center, int half_length,
                                        int stride, int size) {
  if (center < 0 || center >= frames.size()) throw ValidationError("center frame out of range");
  std::vector<torch::Tensor> crops;
  for (int f : sequence_indices(center, half_length, stride, frames.size())) {
    auto crop = crop_resize(frames.frame(f), box, size);
    if (!crop) return std::nullopt;
    crops.push_back(std::move(*crop));
  }
  TemporalSequence seq;
  seq.crops = torch::stack(crops);
  seq.source = {"", center, box.clamped(frames.width(), frames.height())};
  seq.skip = stride;
  seq.intermittent = stride > 1;
  return seq;
}

TemporalSequence reversed(const TemporalSequence& seq) {
  TemporalSequence out = seq;
  out.crops = seq.crops.flip({0});
  out.direction = seq.direction == Direction::forward ? Direction::backward : Direction::forward;
  return out;
}

std::pair<TemporalSequence, Direction> arrow_of_time_example(const TemporalSequence& seq, Rng& rng,
                                                             std::optional<Direction> forced) {
  if (seq.length() < 2) throw ValidationError("arrow of time needs at least two crops");
  Direction d = forced ? *forced : (std::bernoulli_distribution(0.5)(rng) ? Direction::backward : Direction::forward);
  if (d == Direction::backward) return {reversed(seq), Direction::backward};
  TemporalSequence out = seq;
  out.direction = Direction::forward;
  return {out, Direction::forward};
}

std::optional<std::pair<TemporalSequence, bool>> irregularity_example(const FrameSource& frames, const Box& box,
                                                                      int center, Rng& rng,
                                                                      const IrregularityOptions& opts,
                                                                      int half_length) {
  if (opts.skips.empty()) throw ConfigError("intermittence skip set is empty");
  const bool intermittent =
      opts.forced_intermittent ? *opts.forced_intermittent : std::bernoulli_distribution(0.5)(rng);
  int stride = 1;
  if (intermittent) {
    stride = opts.forced_skip ? *opts.forced_skip
                              : opts.skips[std::uniform_int_distribution<size_t>(0, opts.skips.size() - 1)(rng)];
  }
  auto seq = extract(frames, box, center, half_length, stride);
  if (!seq) return std::nullopt;
  seq->intermittent = intermittent;
  return std::make_pair(std::move(*seq), intermittent);
}

MaskedMiddle mask_middle(const TemporalSequence& seq) {
  if (seq.length() % 2 == 0) throw ValidationError("middle masking needs an odd-length sequence");
  MaskedMiddle out;
  out.target = seq.middle().clone();
  out.input = seq;
  out.input.crops = seq.crops.clone();
  out.input.crops[seq.half_length()].zero_();
  return out;
}

TemporalSequence reassemble(const MaskedMiddle& masked) {
  TemporalSequence out = masked.input;
  out.crops = masked.input.crops.clone();
  out.crops[out.half_length()].copy_(masked.target);
  return out;
}

std::array<int, 4> MaskPatch::rect(int image_size) const {
  const int x1 = center_x - width / 2, y1 = center_y - height / 2;
  return {std::clamp(x1, 0, image_size), std::clamp(y1, 0, image_size), std::clamp(x1 + width, 0, image_size),
          std::clamp(y1 + height, 0, image_size)};
}

MaskPatch sample_inpaint_mask(Rng& rng, int image_size, double sigma, int min_side, int max_side) {
  const double mid = image_size / 2.0;
  std::normal_distribution<double> center(mid, sigma);
  std::uniform_int_distribution<int> side(min_side, max_side);
  MaskPatch p;
  p.center_x = std::clamp(static_cast<int>(std::lround(center(rng))), 0, image_size - 1);
  p.center_y = std::clamp(static_cast<int>(std::lround(center(rng))), 0, image_size - 1);
  p.width = side(rng);
  p.height = side(rng);
  return p;
}

torch::Tensor apply_inpaint_mask(const torch::Tensor& image, const MaskPatch& patch, float fill) {
  const auto r = patch.rect(static_cast<int>(image.size(1)));
  torch::Tensor out = image.clone();
  using torch::indexing::Slice;
  out.index({Slice(r[1], r[3]), Slice(r[0], r[2])}).fill_(fill);
  return out;
}

int hamming(const Permutation& a, const Permutation& b) {
  int d = 0;
  for (int i = 0; i < kJigsawTiles; ++i) d += a[i] != b[i];
  return d;
}

Permutation inverse(const Permutation& p) {
  Permutation inv{};
  for (int i = 0; i < kJigsawTiles; ++i) inv[p[i]] = i;
  return inv;
}

PermutationSet build_permutation_set(std::uint64_t seed, int count, int candidates) {
  PermutationSet set;
  set.seed = seed;
  Rng rng(seed);
  Permutation identity{};
  std::iota(identity.begin(), identity.end(), 0);
  set.permutations.push_back(identity);
  std::set<Permutation> seen{identity};
  while (set.size() < count) {
    Permutation best{};
    int best_score = -1;
    for (int c = 0; c < candidates; ++c) {
      Permutation p = identity;
      std::shuffle(p.begin(), p.end(), rng);
      if (seen.count(p)) continue;
      int score = kJigsawTiles;
      for (const auto& q : set.permutations) score = std::min(score, hamming(p, q));
      if (score > best_score) {
        best_score = score;
        best = p;
      }
    }
    if (best_score < 0) continue;
    seen.insert(best);
    set.permutations.push_back(best);
  }
  return set;
}

std::string permutation_set_to_json(const PermutationSet& set) {
  nlohmann::json j = {{"seed", set.seed}, {"permutations", set.permutations}};
  return j.dump();
}

PermutationSet permutation_set_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  PermutationSet set;
  set.seed = j.value("seed", std::uint64_t{0});
  const auto& perms = j.is_array() ? j : j.at("permutations");
  for (const auto& p : perms) {
    const auto v = p.get<std::vector<int>>();
    if (v.size() != kJigsawTiles) throw ValidationError("permutation must have 16 entries");
    Permutation perm{};
    std::copy(v.begin(), v.end(), perm.begin());
    if (std::set<int>(v.begin(), v.end()).size() != kJigsawTiles ||
        *std::max_element(v.begin(), v.end()) >= kJigsawTiles || *std::min_element(v.begin(), v.end()) < 0)
      throw ValidationError("invalid permutation in set");
    set.permutations.push_back(perm);
  }
  return set;
}

void save_permutation_set(const std::filesystem::path& file, const PermutationSet& set) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream(file) << permutation_set_to_json(set) << '\n';
}

PermutationSet load_permutation_set(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open permutation set " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return permutation_set_from_json(ss.str());
}

torch::Tensor apply_permutation(const torch::Tensor& image, const Permutation& perm) {
  if (image.dim() != 3 || image.size(0) != kCropSize || image.size(1) != kCropSize)
    throw ValidationError("jigsaw expects a 64x64 image");
  constexpr int tile = kCropSize / kJigsawGrid;
  using torch::indexing::Slice;
  torch::Tensor out = torch::empty_like(image);
  for (int k = 0; k < kJigsawTiles; ++k) {
    const int src = perm[k];
    const int oy = (k / kJigsawGrid) * tile, ox = (k % kJigsawGrid) * tile;
    const int sy = (src / kJigsawGrid) * tile, sx = (src % kJigsawGrid) * tile;
    out.index_put_({Slice(oy, oy + tile), Slice(ox, ox + tile)},
                   image.index({Slice(sy, sy + tile), Slice(sx, sx + tile)}));
  }
  return out;
}

std::pair<torch::Tensor, int> jigsaw_example(const torch::Tensor& image, const PermutationSet& perms, Rng& rng,
                                             std::optional<int> forced_index) {
  if (perms.size() == 0) throw ConfigError("empty permutation set");
  const int index = forced_index ? *forced_index : std::uniform_int_distribution<int>(0, perms.size() - 1)(rng);
  return {apply_permutation(image, perms[index]), index};
}

torch::Tensor static_sequence(const torch::Tensor& image, int length) {
  return image.unsqueeze(0).expand({length, image.size(0), image.size(1), image.size(2)}).contiguous();
}

}  // namespace ssmtl::sequence
