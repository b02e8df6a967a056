#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "ssmtl/geometry.hpp"
#include "ssmtl/image.hpp"

namespace ssmtl::sequence {

inline constexpr int kCropSize = 64;
inline constexpr int kDefaultHalfLength = 3;  // sequences of 2t+1 = 7 crops

using Rng = std::mt19937_64;

enum class Direction { forward, backward };

struct SequenceSource {
  std::string video;
  int center = 0;
  Box box;
};

// Stack of 2t+1 same-box crops, float32 [T, 64, 64, 3] with values in [0, 1].
struct TemporalSequence {
  torch::Tensor crops;
  SequenceSource source;
  Direction direction = Direction::forward;
  bool intermittent = false;
  int skip = 1;

  int length() const { return static_cast<int>(crops.size(0)); }
  int half_length() const { return (length() - 1) / 2; }
  torch::Tensor middle() const { return crops[half_length()]; }
};

// Crop `box` (clamped, rounded to integer pixels) from one RGB frame and resize bilinearly.
// Returns float32 [size, size, 3] in [0, 1]; nullopt when the clamped box has zero area.
std::optional<torch::Tensor> crop_resize(const cv::Mat& rgb, const Box& box, int size = kCropSize);

// Frame indices i - t*stride ... i + t*stride clamped to [0, n-1].
std::vector<int> sequence_indices(int center, int half_length, int stride, int frame_count);

std::optional<TemporalSequence> extract(const FrameSource& frames, const Box& box, int center,
                                        int half_length = kDefaultHalfLength, int stride = 1,
                                        int size = kCropSize);

TemporalSequence reversed(const TemporalSequence& seq);

// Reverses with probability 1/2 unless `forced` is given.
std::pair<TemporalSequence, Direction> arrow_of_time_example(const TemporalSequence& seq, Rng& rng,
                                                             std::optional<Direction> forced = std::nullopt);

struct IrregularityOptions {
  std::vector<int> skips{2, 3, 4, 5};
  std::optional<bool> forced_intermittent;
  std::optional<int> forced_skip;
};

// Label true means intermittent.
std::optional<std::pair<TemporalSequence, bool>> irregularity_example(const FrameSource& frames, const Box& box,
                                                                      int center, Rng& rng,
                                                                      const IrregularityOptions& opts = {},
                                                                      int half_length = kDefaultHalfLength);

// Middle crop zeroed in `input`; `target` is the original middle crop.
struct MaskedMiddle {
  TemporalSequence input;
  torch::Tensor target;
};

MaskedMiddle mask_middle(const TemporalSequence& seq);
TemporalSequence reassemble(const MaskedMiddle& masked);

struct MaskPatch {
  int center_x = 0;
  int center_y = 0;
  int width = 0;
  int height = 0;

  // Pixel rectangle [x1, x2) x [y1, y2) clipped to a size x size image.
  std::array<int, 4> rect(int image_size) const;
};

MaskPatch sample_inpaint_mask(Rng& rng, int image_size = kCropSize, double sigma = 20.0, int min_side = 4,
                              int max_side = 32);

// image: [H, W, C]. Pixels inside the patch set to `fill`.
torch::Tensor apply_inpaint_mask(const torch::Tensor& image, const MaskPatch& patch, float fill = 0.0f);

inline constexpr int kJigsawGrid = 4;
inline constexpr int kJigsawTiles = kJigsawGrid * kJigsawGrid;
inline constexpr int kJigsawPermutations = 100;

using Permutation = std::array<int, kJigsawTiles>;

struct PermutationSet {
  std::vector<Permutation> permutations;
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(permutations.size()); }
  const Permutation& operator[](int i) const { return permutations[static_cast<size_t>(i)]; }
};

// 100 distinct permutations of 16 tiles, index 0 the identity, the rest chosen greedily
// from random candidates to maximize the minimum pairwise Hamming distance.
PermutationSet build_permutation_set(std::uint64_t seed, int count = kJigsawPermutations, int candidates = 256);

int hamming(const Permutation& a, const Permutation& b);
Permutation inverse(const Permutation& p);

std::string permutation_set_to_json(const PermutationSet& set);
PermutationSet permutation_set_from_json(const std::string& text);
void save_permutation_set(const std::filesystem::path& file, const PermutationSet& set);
PermutationSet load_permutation_set(const std::filesystem::path& file);

// Output tile k is input tile perm[k] (row-major 4x4 grid of 16x16 tiles). image: [64, 64, C].
torch::Tensor apply_permutation(const torch::Tensor& image, const Permutation& perm);

std::pair<torch::Tensor, int> jigsaw_example(const torch::Tensor& image, const PermutationSet& perms, Rng& rng,
                                             std::optional<int> forced_index = std::nullopt);

// Repeat one image along time so single-image tasks share the 3D encoder. [H,W,C] -> [T,H,W,C].
torch::Tensor static_sequence(const torch::Tensor& image, int length = 2 * kDefaultHalfLength + 1);

}  // namespace ssmtl::sequence
