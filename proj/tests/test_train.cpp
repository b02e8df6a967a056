#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include "ssmtl/error.hpp"
#include "ssmtl/train.hpp"
#include "test_util.hpp"
#include "train_fixture.hpp"

using namespace ssmtl;
using namespace ssmtl::train;

namespace {

model::HeadOutput classification(const torch::Tensor& logits) {
  model::HeadOutput o;
  o.logits = logits;
  o.probs = torch::softmax(logits, 1);
  return o;
}

model::HeadOutput image_output(const torch::Tensor& image) {
  model::HeadOutput o;
  o.image = image;
  return o;
}

}  // namespace

TEST(TrainSplit, FifteenPercentPartition) {
  const auto s = split_train_val(100, 0.15, 4);
  EXPECT_EQ(s.train.size(), 85u);
  EXPECT_EQ(s.val.size(), 15u);
  std::set<int> all(s.train.begin(), s.train.end());
  for (int v : s.val) EXPECT_TRUE(all.insert(v).second);
  EXPECT_EQ(all.size(), 100u);
  EXPECT_EQ(*all.begin(), 0);
  EXPECT_EQ(*all.rbegin(), 99);
  const auto again = split_train_val(100, 0.15, 4);
  EXPECT_EQ(again.val, s.val);
  EXPECT_NE(split_train_val(100, 0.15, 5).val, s.val);
  EXPECT_EQ(split_train_val(3, 0.15, 0).val.size(), 1u);
  EXPECT_THROW(split_train_val(1, 0.15, 0), ValidationError);
  EXPECT_THROW(split_train_val(10, 1.0, 0), ConfigError);
}

TEST(TrainLoss, UniformCrossEntropyIsLn2) {
  TaskTargets t;
  t.labels = torch::tensor({0, 1, 1}, torch::kInt64);
  EXPECT_NEAR(task_loss(Task::T1, classification(torch::zeros({3, 2})), t).item<double>(), std::log(2.0), 1e-7);
}

TEST(TrainLoss, PerfectPredictionIsZero) {
  TaskTargets t;
  t.images = torch::rand({2, 64, 64, 3});
  EXPECT_EQ(task_loss(Task::T3, image_output(t.images.clone()), t).item<double>(), 0.0);
  EXPECT_EQ(task_loss(Task::T6, image_output(t.images.clone()), t).item<double>(), 0.0);
}

TEST(TrainLoss, MaeForMiddleCropMseForReconstruction) {
  TaskTargets t;
  t.images = torch::zeros({1, 2, 2, 3});
  const auto pred = image_output(torch::full({1, 2, 2, 3}, 0.5));
  EXPECT_NEAR(task_loss(Task::T3, pred, t).item<double>(), 0.5, 1e-7);
  EXPECT_NEAR(task_loss(Task::T5, pred, t).item<double>(), 0.25, 1e-7);
}

TEST(TrainLoss, WeightedSumOfTasks) {
  TrainConfig cfg;
  std::map<Task, model::HeadOutput> outs;
  std::map<Task, TaskTargets> targets;
  // T3 with MAE 0.2 and T6 with MSE 0.4.
  targets[Task::T3].images = torch::zeros({1, 2, 2, 3});
  outs[Task::T3] = image_output(torch::full({1, 2, 2, 3}, 0.2));
  targets[Task::T6].images = torch::zeros({1, 2, 2, 3});
  outs[Task::T6] = image_output(torch::full({1, 2, 2, 3}, std::sqrt(0.4)));
  auto loss = multi_task_loss(outs, targets, cfg);
  EXPECT_NEAR(loss.total.item<double>(), 0.6, 1e-6);
  EXPECT_NEAR(loss.per_task.at(Task::T3), 0.2, 1e-6);
  cfg.task_weights[Task::T6] = 2.0;
  EXPECT_NEAR(multi_task_loss(outs, targets, cfg).total.item<double>(), 1.0, 1e-6);
  targets.erase(Task::T6);
  EXPECT_THROW(multi_task_loss(outs, targets, cfg), ValidationError);
}

TEST(TrainSelection, ArgminOfValidationLoss) {
  EXPECT_EQ(select_best_epoch({0.9, 0.5, 0.7}), 1);  // the second epoch
  EXPECT_EQ(select_best_epoch({0.3}), 0);
  // Monotone transforms keep the selection.
  std::vector<double> v{0.9, 0.5, 0.7}, logs;
  for (double x : v) logs.push_back(std::log(x) * 3 + 1);
  EXPECT_EQ(select_best_epoch(logs), 1);
  EXPECT_THROW(select_best_epoch({}), ValidationError);
}

TEST(TrainConfigTest, PresetsAndValidation) {
  const auto v1 = preset("ssmtl++v1");
  EXPECT_EQ(v1.backbone.tasks, (model::TaskSet{Task::T1, Task::T2, Task::T3, Task::T5}));
  EXPECT_EQ(v1.backbone.cvt_placement, model::CvtPlacement::three_d);
  EXPECT_EQ(v1.backbone.token_dim, 64);
  EXPECT_EQ(v1.epochs, 20);
  EXPECT_EQ(v1.adversarial_start_epoch, 5);
  EXPECT_DOUBLE_EQ(v1.learning_rate, 1e-3);
  EXPECT_DOUBLE_EQ(v1.val_fraction, 0.15);
  EXPECT_EQ(preset("ssmtl++v2").backbone.tasks, (model::TaskSet{Task::T1, Task::T2, Task::T3, Task::T6}));
  EXPECT_EQ(preset("ssmtl").backbone.tasks, (model::TaskSet{Task::T1, Task::T2, Task::T3, Task::T4}));
  EXPECT_EQ(preset("ssmtl").backbone.cvt_placement, model::CvtPlacement::none);
  EXPECT_THROW(preset("ssmtl++v9"), ConfigError);

  auto c = v1;
  c.adversarial_start_epoch = 21;
  EXPECT_THROW(c.validate(), ConfigError);
  c = v1;
  c.val_fraction = 0;
  EXPECT_THROW(c.validate(), ConfigError);

  nlohmann::json j = {{"preset", "ssmtl++v1"}, {"epochs", 7}, {"backbone", {{"cvt_blocks", 2}}}};
  const auto parsed = j.get<TrainConfig>();
  EXPECT_EQ(parsed.epochs, 7);
  EXPECT_EQ(parsed.backbone.cvt_blocks, 2);
  EXPECT_EQ(parsed.backbone.tasks, v1.backbone.tasks);
  nlohmann::json round = parsed;
  EXPECT_EQ(round.get<TrainConfig>().backbone.cvt_blocks, 2);
}

TEST(TrainData, ItemsPerTask) {
  const auto data = fixture::toy_data(1, 12, 2, 2);
  auto cfg = fixture::toy_config();
  cfg.backbone.tasks = {Task::T1, Task::T2, Task::T3, Task::T6, Task::T8};
  const auto perms = sequence::build_permutation_set(0);
  sequence::Rng rng(1);
  for (Task t : cfg.backbone.tasks) {
    SCOPED_TRACE(model::to_string(t));
    const auto item = make_item(t, data, data.objects[6], rng, cfg, perms);
    ASSERT_TRUE(item);
    EXPECT_EQ(item->input.sizes(), (torch::IntArrayRef{7, 64, 64, 3}));
    if (t == Task::T1 || t == Task::T2) {
      EXPECT_TRUE(item->label == 0 || item->label == 1);
    }
    if (t == Task::T8) {
      EXPECT_LT(item->label, 100);
    }
    if (t == Task::T3) {
      EXPECT_EQ(item->input[3].abs().sum().item<float>(), 0.0f);
      EXPECT_EQ(item->target.sizes(), (torch::IntArrayRef{64, 64, 3}));
    }
    if (t == Task::T6 || t == Task::T8) {
      EXPECT_TRUE(torch::equal(item->input[0], item->input[6]));
    }
  }
  const auto p = pseudo_item(data.pseudo[0], 7);
  EXPECT_TRUE(p.pseudo_anomaly);
  EXPECT_TRUE(torch::equal(p.target, data.pseudo[0]));
}

TEST(TrainData, PoseHeatmapPeaksAtKeypoint) {
  const auto h = pose_heatmaps({0.25f, 0.75f, 0.5f, 0.5f});
  EXPECT_EQ(h.sizes(), (torch::IntArrayRef{64, 64, 2}));
  const auto flat = h.select(2, 0).flatten().argmax().item<int64_t>();
  EXPECT_NEAR(double(flat % 64), 16.0, 1.0);
  EXPECT_NEAR(double(flat / 64), 48.0, 1.0);
  EXPECT_NEAR(h.max().item<double>(), 1.0, 0.05);
}

TEST(TrainEpoch, OneBatchOverfits) {
  torch::set_num_threads(1);
  const auto data = fixture::toy_data(2, 8, 3, 4);
  auto cfg = fixture::toy_config();
  cfg.backbone.tasks = {Task::T1, Task::T2, Task::T3};
  model::MultiTaskNet net(cfg.backbone, 1);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  const auto perms = sequence::build_permutation_set(0);
  sequence::Rng rng(2);
  std::map<Task, std::vector<TaskBatchItem>> items;
  for (Task t : cfg.backbone.tasks)
    for (int i = 0; i < 8; ++i) items[t].push_back(*make_item(t, data, data.objects[static_cast<size_t>(i * 2)], rng, cfg, perms));
  std::map<Task, TaskTargets> targets;
  for (auto& [t, v] : items) targets[t] = stack_targets(t, v);
  auto step = [&]() {
    std::map<Task, model::HeadOutput> outs;
    for (auto& [t, v] : items) {
      std::vector<torch::Tensor> xs;
      for (auto& i : v) xs.push_back(i.input);
      outs[t] = net->head_forward(net->features(torch::stack(xs)), t);
    }
    auto loss = multi_task_loss(outs, targets, cfg).total;
    opt.zero_grad();
    loss.backward();
    opt.step();
    return loss.item<double>();
  };
  const double initial = step();
  double last = initial;
  for (int s = 1; s < 200; ++s) last = step();
  EXPECT_LT(last, 0.1 * initial) << "initial " << initial;
}

TEST(TrainEpoch, PseudoBatchesFollowTheSchedule) {
  torch::set_num_threads(1);
  const auto data = fixture::toy_data(2, 8, 4, 4);
  auto cfg = fixture::toy_config();
  cfg.epochs = 6;
  model::MultiTaskNet net(cfg.backbone, 1);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  const auto perms = sequence::build_permutation_set(0);
  std::vector<int> train(16);
  std::iota(train.begin(), train.end(), 0);
  const auto e0 = train_epoch(net, opt, data, train, cfg, 0, perms);
  EXPECT_EQ(e0.pseudo_items, 0);
  EXPECT_EQ(e0.train_loss.count(Task::T5), 0u);
  EXPECT_EQ(e0.batches, 2);
  const auto e5 = train_epoch(net, opt, data, train, cfg, 5, perms);
  EXPECT_EQ(e5.pseudo_items, 2 * 2);  // round(0.25 * 8) per batch
  EXPECT_EQ(e5.train_loss.count(Task::T5), 1u);
  auto no_pseudo = data;
  no_pseudo.pseudo.clear();
  EXPECT_THROW(train_epoch(net, opt, no_pseudo, train, cfg, 5, perms), ConfigError);
}

TEST(TrainEpoch, ParametersBeforeStartIgnorePseudoData) {
  const auto r = fixture::schedule_check();
  EXPECT_EQ(r.compared_epochs, 5);
  EXPECT_TRUE(r.identical_before_start);
  EXPECT_EQ(r.pseudo_items_before_start, 0);
  EXPECT_GT(r.pseudo_items_at_start, 0);
  EXPECT_TRUE(r.enabled_run_differs);
}

TEST(TrainEpoch, NonFiniteLossIsReported) {
  torch::set_num_threads(1);
  const auto data = fixture::toy_data(1, 8, 5, 0);
  auto cfg = fixture::toy_config();
  cfg.backbone.tasks = {Task::T1, Task::T3};
  cfg.adversarial_start_epoch = 0;
  model::MultiTaskNet net(cfg.backbone, 1);
  {
    torch::NoGradGuard g;
    net->head(Task::T1)->parameters().back().fill_(std::numeric_limits<float>::quiet_NaN());
  }
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.learning_rate));
  try {
    train_epoch(net, opt, data, {0, 1, 2, 3}, cfg, 0, sequence::build_permutation_set(0));
    FAIL() << "expected NonFiniteLossError";
  } catch (const NonFiniteLossError& e) {
    EXPECT_NE(std::string(e.what()).find("T1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos);
  }
}

TEST(TrainFit, SeededRunsAgreeAndCheckpointRoundTrips) {
  torch::set_num_threads(1);
  const auto data = fixture::toy_data(2, 10, 6, 3);
  auto cfg = fixture::toy_config();
  cfg.epochs = 2;
  cfg.adversarial_start_epoch = 1;
  const auto a = fit(cfg, data), b = fit(cfg, data);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
  EXPECT_EQ(a.norm, b.norm);
  EXPECT_EQ(a.history.size(), 2u);
  EXPECT_EQ(a.history[0].val_loss.count(Task::T5), 0u);
  EXPECT_EQ(a.norm.scale.count(Task::T3), 1u);

  testutil::TempDir dir;
  save_result(dir.path() / "m.ckpt", a, cfg);
  const auto loaded = model::load_checkpoint(dir.path() / "m.ckpt");
  EXPECT_EQ(loaded.meta["best_epoch"], a.best_epoch);
  EXPECT_EQ(loaded.meta["normalization"].get<score::NormalizationStats>(), a.norm);
  write_log_csv(dir.path() / "log.csv", a.history, cfg.backbone.tasks);
  std::ifstream in(dir.path() / "log.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,train_T1,train_T2,train_T3,train_T5,val_T1,val_T2,val_T3,val_total,pseudo_items");

  cfg.epochs = 1;
  cfg.adversarial_start_epoch = 1;
  EXPECT_EQ(fit(cfg, data).best_epoch, 0);
}
