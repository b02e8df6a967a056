#include <gtest/gtest.h>

#include "model_checks.hpp"
#include "ssmtl/error.hpp"
#include "ssmtl/model.hpp"
#include "ssmtl/train.hpp"
#include "test_util.hpp"

using namespace ssmtl;
using namespace ssmtl::model;

namespace {

void expect_head_contract(MultiTaskNet& net, Task t, const torch::Tensor& f, int batch) {
  SCOPED_TRACE(to_string(t));
  const auto& cfg = net->config();
  const auto out = net->head_forward(f, t);
  if (is_classification(t)) {
    const int classes = t == Task::T8 ? cfg.jigsaw_classes : 2;
    EXPECT_EQ(out.logits.sizes(), (torch::IntArrayRef{batch, classes}));
    EXPECT_LT((out.probs.sum(1) - 1).abs().max().item<double>(), 1e-5);
  } else if (is_decoder(t)) {
    int channels = 3;
    if (t == Task::T7) channels = cfg.seg_channels;
    if (t == Task::T9) channels = cfg.pose_joints;
    EXPECT_EQ(out.image.sizes(), (torch::IntArrayRef{batch, 64, 64, channels}));
    EXPECT_GE(out.image.min().item<double>(), 0.0);
    EXPECT_LE(out.image.max().item<double>(), 1.0);
  } else {
    EXPECT_EQ(out.features.sizes(), (torch::IntArrayRef{batch, cfg.teacher_dim}));
    EXPECT_EQ(out.logits.sizes(), (torch::IntArrayRef{batch, cfg.num_classes}));
    EXPECT_LT((out.probs.sum(1) - 1).abs().max().item<double>(), 1e-5);
  }
}

}  // namespace

TEST(ModelShapes, TokenGridIsSevenByEightByEight) {
  for (const std::string preset : {"ssmtl", "ssmtl++v1", "ssmtl++v2"}) {
    SCOPED_TRACE(preset);
    MultiTaskNet net(train::preset(preset).backbone, 0);
    torch::NoGradGuard g;
    const auto x = checks::random_sequences(2, 1);
    const auto grid = net->encoder_forward(x);
    EXPECT_EQ(grid.sizes(), (torch::IntArrayRef{2, 64, 7, 8, 8}));
    if (net->config().cvt_placement == CvtPlacement::three_d) {
      EXPECT_EQ(net->cvt_forward(grid).sizes(), grid.sizes());
    }
    const auto f = net->features(x);
    EXPECT_EQ(f.sizes(), (torch::IntArrayRef{2, 64, 8, 8}));
    for (Task t : net->config().tasks) expect_head_contract(net, t, f, 2);
    if (net->config().has(Task::T5)) {
      EXPECT_EQ(net->adversarial_forward(f).image.sizes(), (torch::IntArrayRef{2, 64, 64, 3}));
    }
  }
}

TEST(ModelShapes, EveryTaskHeadOnCustomBackbone) {
  BackboneConfig cfg;
  cfg.tasks = {Task::T1, Task::T2, Task::T3, Task::T4, Task::T5, Task::T6, Task::T7, Task::T8, Task::T9};
  MultiTaskNet net(cfg, 0);
  torch::NoGradGuard g;
  const auto f = net->features(checks::random_sequences(3, 2));
  for (Task t : cfg.tasks) expect_head_contract(net, t, f, 3);
}

TEST(ModelShapes, TwoDimensionalPlacementPoolsFirst) {
  BackboneConfig cfg;
  cfg.cvt_placement = CvtPlacement::two_d;
  MultiTaskNet net(cfg, 0);
  torch::NoGradGuard g;
  const auto grid = net->encoder_forward(checks::random_sequences(2, 3));
  EXPECT_EQ(net->cvt_forward(temporal_pool(grid)).sizes(), (torch::IntArrayRef{2, 64, 8, 8}));
  EXPECT_THROW(net->cvt_forward(grid), ValidationError);
}

TEST(ModelShapes, RejectsWrongInput) {
  MultiTaskNet net(BackboneConfig{}, 0);
  EXPECT_THROW(net->features(torch::rand({1, 5, 64, 64, 3})), ValidationError);
  EXPECT_THROW(net->features(torch::rand({1, 7, 32, 32, 3})), ValidationError);
}

TEST(ModelConfig, Validation) {
  BackboneConfig cfg;
  cfg.cvt_heads = 12;
  cfg.head_dim = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);  // 12 does not divide 64
  cfg.head_dim = 8;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.attention_dim(), 96);
  cfg.cvt_blocks = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.cvt_placement = CvtPlacement::none;
  EXPECT_NO_THROW(cfg.validate());
  nlohmann::json j = train::preset("ssmtl++v1").backbone;
  const auto back = j.get<BackboneConfig>();
  EXPECT_EQ(back.tasks, (TaskSet{Task::T1, Task::T2, Task::T3, Task::T5}));
  EXPECT_EQ(back.cvt_blocks, 3);
  EXPECT_EQ(back.cvt_heads, 12);
  EXPECT_EQ(parse_task("T7"), Task::T7);
  EXPECT_THROW(parse_task("T10"), ConfigError);
}

TEST(ModelAttention, RowsSumToOneAndFusedPathAgrees) {
  for (const std::string preset : {"ssmtl++v1", "ssmtl++v2"}) {
    SCOPED_TRACE(preset);
    const auto r = checks::attention_check(preset);
    EXPECT_LT(r.max_row_error, 1e-5);
    EXPECT_LT(r.max_fused_error, 1e-4);
    // 448 query tokens, keys subsampled by the stride-2 projection.
    EXPECT_EQ(r.shape, (std::vector<int64_t>{2, 12, 448, 112}));
  }
}

TEST(ModelAttention, UniformAttentionAveragesValues) {
  CvtBlock block(64, 12, 8, true, 1, 4);
  torch::NoGradGuard g;
  const auto grid = torch::rand({1, 64, 2, 4, 4});
  block->force_uniform_attention = true;
  block->record_attention = true;
  block->forward(grid);
  EXPECT_LT((block->last_attention - 1.0 / 32).abs().max().item<double>(), 1e-7);
}

TEST(ModelGradient, ReversalScalesEncoderGradients) {
  const auto r = checks::gradient_reversal_check();
  EXPECT_GT(r.encoder_grad_norm, 1e-6);
  EXPECT_LE(r.max_encoder_deviation, 1e-6);
  EXPECT_EQ(r.max_head_deviation, 0.0);
}

TEST(ModelGradient, ReverseIsIdentityForward) {
  const auto x = torch::randn({3, 4}, torch::requires_grad());
  const auto y = grad_reverse(x, 0.2);
  EXPECT_TRUE(torch::equal(y, x));
  y.sum().backward();
  EXPECT_LT((x.grad() + 0.2).abs().max().item<double>(), 1e-7);
}

TEST(ModelGradient, FiniteDifferencesMatchAutograd) {
  const auto r = checks::finite_difference_check();
  EXPECT_EQ(r.checked, 20);
  EXPECT_LT(r.max_relative_error, 1e-3);
}

TEST(ModelInit, HeadsDoNotPerturbSharedWeights) {
  BackboneConfig a, b;
  b.tasks = {Task::T1, Task::T2, Task::T3, Task::T6, Task::T8};
  MultiTaskNet na(a, 5), nb(b, 5);
  const auto pa = na->encoder_parameters(), pb = nb->encoder_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_TRUE(torch::equal(pa[i], pb[i]));
  EXPECT_TRUE(torch::equal(na->head(Task::T3)->parameters()[0], nb->head(Task::T3)->parameters()[0]));
}

TEST(ModelCheckpoint, RoundTripPreservesOutputs) {
  testutil::TempDir dir;
  auto cfg = train::preset("ssmtl++v1").backbone;
  MultiTaskNet net(cfg, 8);
  save_checkpoint(dir.path() / "m.ckpt", net, {{"note", "x"}});
  auto loaded = load_checkpoint(dir.path() / "m.ckpt");
  EXPECT_EQ(loaded.meta["note"], "x");
  EXPECT_EQ(loaded.net->config().tasks, cfg.tasks);
  net->eval();
  loaded.net->eval();
  torch::NoGradGuard g;
  const auto x = checks::random_sequences(1, 6);
  EXPECT_TRUE(torch::equal(net->features(x), loaded.net->features(x)));
  EXPECT_THROW(load_checkpoint(dir.path() / "missing.ckpt"), Error);
}

TEST(ModelCheckpoint, SnapshotRestore) {
  MultiTaskNet net(BackboneConfig{}, 1);
  const auto snap = snapshot(*net);
  {
    torch::NoGradGuard g;
    for (auto& p : net->parameters()) p.add_(1.0);
  }
  restore(*net, snap);
  const auto now = net->parameters();
  for (size_t i = 0; i < now.size(); ++i) EXPECT_TRUE(torch::equal(now[i], snap[i]));
}
