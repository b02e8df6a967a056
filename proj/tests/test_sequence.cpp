#include <gtest/gtest.h>

#include <map>
#include <set>

#include <opencv2/imgproc.hpp>

#include "ssmtl/error.hpp"
#include "ssmtl/sequence.hpp"
#include "test_util.hpp"

using namespace ssmtl;
using namespace ssmtl::sequence;

namespace {

// Frame f is filled with the constant value f, so every crop reveals its source index.
InMemoryFrames indexed_frames(int n, int h = 48, int w = 64) {
  std::vector<cv::Mat> frames;
  for (int f = 0; f < n; ++f) frames.emplace_back(h, w, CV_8UC3, cv::Scalar(f, f, f));
  return InMemoryFrames(frames);
}

std::vector<int> crop_indices(const TemporalSequence& seq) {
  std::vector<int> out;
  for (int k = 0; k < seq.length(); ++k) out.push_back(int(std::lround(seq.crops[k].mean().item<double>() * 255.0)));
  return out;
}

torch::Tensor random_image(std::uint64_t seed, int size = 64) {
  torch::manual_seed(seed);
  return torch::rand({size, size, 3});
}

InMemoryFrames random_frames(int n, int h, int w, std::uint64_t seed) {
  cv::RNG rng(seed);
  std::vector<cv::Mat> frames;
  for (int f = 0; f < n; ++f) {
    cv::Mat m(h, w, CV_8UC3);
    rng.fill(m, cv::RNG::UNIFORM, 0, 256);
    frames.push_back(m);
  }
  return InMemoryFrames(frames);
}

}  // namespace

TEST(SequenceExtract, CentredWindowOfSevenCrops) {
  const auto frames = indexed_frames(100);
  const auto seq = extract(frames, {4, 4, 40, 30}, 10);
  ASSERT_TRUE(seq);
  EXPECT_EQ(seq->crops.sizes(), (torch::IntArrayRef{7, 64, 64, 3}));
  EXPECT_EQ(seq->crops.dtype(), torch::kFloat32);
  EXPECT_EQ(crop_indices(*seq), (std::vector<int>{7, 8, 9, 10, 11, 12, 13}));
  EXPECT_EQ(seq->source.center, 10);
}

TEST(SequenceExtract, ZeroHalfLengthIsTheMiddleCrop) {
  const auto frames = indexed_frames(20);
  const auto seq = extract(frames, {0, 0, 20, 20}, 5, 0);
  ASSERT_TRUE(seq);
  EXPECT_EQ(seq->length(), 1);
  EXPECT_EQ(crop_indices(*seq), std::vector<int>{5});
}

TEST(SequenceExtract, IndicesClampAtVideoEdges) {
  const auto frames = indexed_frames(10);
  EXPECT_EQ(crop_indices(*extract(frames, {0, 0, 20, 20}, 0)), (std::vector<int>{0, 0, 0, 0, 1, 2, 3}));
  EXPECT_EQ(crop_indices(*extract(frames, {0, 0, 20, 20}, 9)), (std::vector<int>{6, 7, 8, 9, 9, 9, 9}));
  EXPECT_EQ(sequence_indices(20, 3, 2, 100), (std::vector<int>{14, 16, 18, 20, 22, 24, 26}));
  EXPECT_EQ(sequence_indices(1, 3, 5, 8), (std::vector<int>{0, 0, 0, 1, 6, 7, 7}));
}

TEST(SequenceExtract, DegenerateBoxIsSkipped) {
  const auto frames = indexed_frames(10);
  EXPECT_FALSE(extract(frames, {70, 10, 90, 30}, 3));
  EXPECT_FALSE(extract(frames, {10, 10, 10, 30}, 3));
}

TEST(SequenceExtract, TranslationConsistent) {
  const auto base = random_frames(9, 40, 50, 3);
  std::vector<cv::Mat> shifted;
  for (int f = 0; f < base.size(); ++f) {
    cv::Mat big(52, 67, CV_8UC3, cv::Scalar(9, 9, 9));
    base.frame(f).copyTo(big(cv::Rect(7, 5, 50, 40)));
    shifted.push_back(big);
  }
  const auto a = extract(base, {3, 6, 31, 33}, 4);
  const auto b = extract(InMemoryFrames(shifted), {10, 11, 38, 38}, 4);
  ASSERT_TRUE(a && b);
  EXPECT_TRUE(torch::equal(a->crops, b->crops));
}

TEST(SequenceExtract, CropMatchesBilinearResize) {
  const auto frames = random_frames(1, 40, 50, 4);
  const auto crop = crop_resize(frames.frame(0), {5.4, 2.6, 25.2, 31.0});
  ASSERT_TRUE(crop);
  cv::Mat roi = frames.frame(0)(cv::Rect(5, 3, 20, 28)), resized;
  cv::resize(roi, resized, {64, 64}, 0, 0, cv::INTER_LINEAR);
  for (int y = 0; y < 64; y += 7)
    for (int x = 0; x < 64; x += 5)
      for (int c = 0; c < 3; ++c)
        EXPECT_NEAR((*crop)[y][x][c].item<float>(), resized.at<cv::Vec3b>(y, x)[c] / 255.0f, 1e-6);
  EXPECT_GE(crop->min().item<float>(), 0.0f);
  EXPECT_LE(crop->max().item<float>(), 1.0f);
}

TEST(SequenceArrow, ForcedDirections) {
  const auto seq = *extract(indexed_frames(30), {0, 0, 20, 20}, 10);
  Rng rng(1);
  const auto [fwd, l1] = arrow_of_time_example(seq, rng, Direction::forward);
  EXPECT_EQ(l1, Direction::forward);
  EXPECT_TRUE(torch::equal(fwd.crops, seq.crops));
  const auto [bwd, l2] = arrow_of_time_example(seq, rng, Direction::backward);
  EXPECT_EQ(l2, Direction::backward);
  EXPECT_EQ(bwd.direction, Direction::backward);
  for (int k = 0; k < 7; ++k) EXPECT_TRUE(torch::equal(bwd.crops[k], seq.crops[6 - k]));
}

TEST(SequenceArrow, ReversalIsAnInvolution) {
  const auto seq = *extract(random_frames(12, 30, 30, 5), {2, 2, 28, 28}, 6);
  const auto twice = reversed(reversed(seq));
  EXPECT_TRUE(torch::equal(twice.crops, seq.crops));
  EXPECT_EQ(twice.direction, Direction::forward);
}

TEST(SequenceArrow, BackwardFractionIsHalf) {
  TemporalSequence seq;
  seq.crops = torch::zeros({7, 2, 2, 3});
  Rng rng(42);
  int backward = 0;
  for (int i = 0; i < 10000; ++i) backward += arrow_of_time_example(seq, rng).second == Direction::backward;
  EXPECT_GE(backward / 1e4, 0.48);
  EXPECT_LE(backward / 1e4, 0.52);
  TemporalSequence single;
  single.crops = torch::zeros({1, 2, 2, 3});
  EXPECT_THROW(arrow_of_time_example(single, rng), ValidationError);
}

TEST(SequenceIrregularity, RegularMatchesExtract) {
  const auto frames = indexed_frames(60);
  Rng rng(2);
  IrregularityOptions opts;
  opts.forced_intermittent = false;
  const auto ex = irregularity_example(frames, {0, 0, 20, 20}, 20, rng, opts);
  ASSERT_TRUE(ex);
  EXPECT_FALSE(ex->second);
  EXPECT_TRUE(torch::equal(ex->first.crops, extract(frames, {0, 0, 20, 20}, 20)->crops));
}

TEST(SequenceIrregularity, SkipTwoIndices) {
  const auto frames = indexed_frames(60);
  Rng rng(2);
  IrregularityOptions opts;
  opts.forced_intermittent = true;
  opts.forced_skip = 2;
  const auto ex = irregularity_example(frames, {0, 0, 20, 20}, 20, rng, opts);
  ASSERT_TRUE(ex);
  EXPECT_TRUE(ex->second);
  EXPECT_EQ(ex->first.skip, 2);
  EXPECT_EQ(crop_indices(ex->first), (std::vector<int>{14, 16, 18, 20, 22, 24, 26}));
}

TEST(SequenceIrregularity, SkipsAreUniform) {
  const auto frames = indexed_frames(60, 8, 8);
  Rng rng(3);
  IrregularityOptions opts;
  opts.forced_intermittent = true;
  std::map<int, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto ex = irregularity_example(frames, {0, 0, 8, 8}, 30, rng, opts, 1);
    ++counts[ex->first.skip];
  }
  ASSERT_EQ(counts.size(), 4u);
  for (int s = 2; s <= 5; ++s) {
    EXPECT_GE(counts[s] / double(n), 0.23) << s;
    EXPECT_LE(counts[s] / double(n), 0.27) << s;
  }
}

TEST(SequenceMiddle, MaskAndReassemble) {
  const auto seq = *extract(random_frames(12, 30, 30, 6), {2, 2, 28, 28}, 6);
  const auto masked = mask_middle(seq);
  EXPECT_EQ(masked.input.crops[3].abs().sum().item<float>(), 0.0f);
  EXPECT_TRUE(torch::equal(masked.target, seq.crops[3]));
  for (int k : {0, 1, 2, 4, 5, 6}) EXPECT_TRUE(torch::equal(masked.input.crops[k], seq.crops[k]));
  EXPECT_TRUE(torch::equal(reassemble(masked).crops, seq.crops));
}

TEST(SequenceInpaint, SizeAndOverlapBounds) {
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const auto p = sample_inpaint_mask(rng);
    ASSERT_GE(p.width, 4);
    ASSERT_LE(p.width, 32);
    ASSERT_GE(p.height, 4);
    ASSERT_LE(p.height, 32);
    const auto r = p.rect(64);
    ASSERT_GE(r[0], 0);
    ASSERT_GE(r[1], 0);
    ASSERT_LE(r[2], 64);
    ASSERT_LE(r[3], 64);
    ASSERT_LT(r[0], r[2]);
    ASSERT_LT(r[1], r[3]);
  }
}

TEST(SequenceInpaint, CentreConcentratesInTheMiddle) {
  Rng rng(8);
  double sx = 0, sy = 0;
  std::set<int> widths;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto p = sample_inpaint_mask(rng);
    sx += p.center_x;
    sy += p.center_y;
    widths.insert(p.width);
  }
  EXPECT_NEAR(sx / n, 32.0, 1.0);
  EXPECT_NEAR(sy / n, 32.0, 1.0);
  EXPECT_EQ(widths.size(), 29u);
}

TEST(SequenceInpaint, OnlyPatchPixelsChange) {
  const auto img = random_image(9) * 0.5 + 0.25;
  MaskPatch p{10, 50, 8, 12};
  const auto out = apply_inpaint_mask(img, p);
  const auto r = p.rect(64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const bool inside = x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
      if (inside) ASSERT_EQ(out[y][x].abs().sum().item<float>(), 0.0f);
      else ASSERT_TRUE(torch::equal(out[y][x], img[y][x]));
    }
  EXPECT_TRUE(torch::equal(apply_inpaint_mask(img, p, 0.5f).sub(out).abs().greater(0).any(), torch::tensor(true)));
}

TEST(SequenceJigsaw, PermutationSetProperties) {
  const auto set = build_permutation_set(0);
  ASSERT_EQ(set.size(), 100);
  Permutation id;
  for (int k = 0; k < 16; ++k) id[k] = k;
  EXPECT_EQ(set[0], id);
  std::set<Permutation> distinct(set.permutations.begin(), set.permutations.end());
  EXPECT_EQ(distinct.size(), 100u);
  int min_distance = 16;
  for (int i = 0; i < 100; ++i)
    for (int j = i + 1; j < 100; ++j) {
      int d = 0;
      for (int k = 0; k < 16; ++k) d += set[i][k] != set[j][k];
      EXPECT_EQ(d, hamming(set[i], set[j]));
      min_distance = std::min(min_distance, d);
    }
  EXPECT_GE(min_distance, 8);
  for (const auto& p : set.permutations) {
    std::set<int> tiles(p.begin(), p.end());
    EXPECT_EQ(tiles.size(), 16u);
  }
  EXPECT_EQ(build_permutation_set(0).permutations, set.permutations);
}

TEST(SequenceJigsaw, ApplyAndInvert) {
  const auto set = build_permutation_set(0);
  const auto img = random_image(10);
  EXPECT_TRUE(torch::equal(apply_permutation(img, set[0]), img));
  for (int i : {1, 17, 99}) {
    const auto shuffled = apply_permutation(img, set[i]);
    EXPECT_TRUE(torch::equal(apply_permutation(shuffled, inverse(set[i])), img));
    // Output tile k is input tile perm[k].
    for (int k = 0; k < 16; ++k) {
      const int src = set[i][k];
      const auto out_tile = shuffled.slice(0, (k / 4) * 16, (k / 4) * 16 + 16).slice(1, (k % 4) * 16, (k % 4) * 16 + 16);
      const auto in_tile = img.slice(0, (src / 4) * 16, (src / 4) * 16 + 16).slice(1, (src % 4) * 16, (src % 4) * 16 + 16);
      EXPECT_TRUE(torch::equal(out_tile, in_tile));
    }
  }
  Rng rng(11);
  const auto [forced, label] = jigsaw_example(img, set, rng, 5);
  EXPECT_EQ(label, 5);
  EXPECT_TRUE(torch::equal(forced, apply_permutation(img, set[5])));
  EXPECT_THROW(jigsaw_example(torch::rand({32, 64, 3}), set, rng), ValidationError);
}

TEST(SequenceJigsaw, JsonAndFileRoundTrip) {
  const auto set = build_permutation_set(77);
  EXPECT_EQ(permutation_set_from_json(permutation_set_to_json(set)).permutations, set.permutations);
  testutil::TempDir dir;
  save_permutation_set(dir.path() / "perms.json", set);
  const auto loaded = load_permutation_set(dir.path() / "perms.json");
  EXPECT_EQ(loaded.permutations, set.permutations);
  EXPECT_EQ(loaded.seed, 77u);
}

TEST(SequenceStatic, RepeatsImageAlongTime) {
  const auto img = random_image(12);
  const auto seq = static_sequence(img);
  EXPECT_EQ(seq.sizes(), (torch::IntArrayRef{7, 64, 64, 3}));
  for (int k = 0; k < 7; ++k) EXPECT_TRUE(torch::equal(seq[k], img));
}
