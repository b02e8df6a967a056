#pragma once

// Gradient and attention checks shared by the model unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "ssmtl/model.hpp"
#include "ssmtl/train.hpp"

namespace checks {

using ssmtl::model::Task;

inline torch::Tensor random_sequences(int batch, std::uint64_t seed, torch::Dtype dtype = torch::kFloat32) {
  torch::manual_seed(seed);
  return torch::rand({batch, 7, 64, 64, 3}, torch::TensorOptions().dtype(dtype));
}

inline std::vector<torch::Tensor> grads_of(const std::vector<torch::Tensor>& params) {
  std::vector<torch::Tensor> out;
  for (const auto& p : params) out.push_back(p.grad().defined() ? p.grad().clone() : torch::zeros_like(p));
  return out;
}

struct ReversalResult {
  double max_encoder_deviation = 0;  // max |g_adv + 0.2 g_plain|
  double max_head_deviation = 0;     // T5 decoder grads must not change
  double encoder_grad_norm = 0;
};

// Same T5 loss twice: through the gradient-reversal path and through the plain head.
inline ReversalResult gradient_reversal_check(double scale = 0.2) {
  auto cfg = ssmtl::train::preset("ssmtl++v1").backbone;
  ssmtl::model::MultiTaskNet net(cfg, 3);
  net->to(torch::kFloat64);
  const auto x = random_sequences(2, 4, torch::kFloat64);
  torch::manual_seed(5);
  const auto target = torch::rand({2, 64, 64, 3}, torch::kFloat64);
  const auto enc = net->encoder_parameters();
  const auto head = net->head(Task::T5)->parameters();

  auto run = [&](bool adversarial) {
    net->zero_grad();
    const auto f = net->features(x);
    const auto out = adversarial ? net->adversarial_forward(f, scale) : net->head_forward(f, Task::T5);
    torch::mse_loss(out.image, target).backward();
    return std::make_pair(grads_of(enc), grads_of(head));
  };
  const auto [enc_plain, head_plain] = run(false);
  const auto [enc_adv, head_adv] = run(true);
  ReversalResult r;
  for (size_t i = 0; i < enc.size(); ++i) {
    r.max_encoder_deviation =
        std::max(r.max_encoder_deviation, (enc_adv[i] + scale * enc_plain[i]).abs().max().item<double>());
    r.encoder_grad_norm += enc_plain[i].pow(2).sum().item<double>();
  }
  r.encoder_grad_norm = std::sqrt(r.encoder_grad_norm);
  for (size_t i = 0; i < head.size(); ++i)
    r.max_head_deviation = std::max(r.max_head_deviation, (head_adv[i] - head_plain[i]).abs().max().item<double>());
  return r;
}

inline ssmtl::model::BackboneConfig tiny_backbone() {
  ssmtl::model::BackboneConfig cfg;
  cfg.encoder_widths = {4, 6};
  cfg.token_dim = 8;
  cfg.cvt_blocks = 1;
  cfg.cvt_heads = 2;
  cfg.head_dim = 4;
  cfg.decoder_width = 8;
  cfg.tasks = {Task::T1, Task::T2, Task::T3, Task::T5};
  return cfg;
}

struct FiniteDifferenceResult {
  double max_relative_error = 0;
  int checked = 0;
};

// Central differences of the total multi-task loss against autograd on sampled scalar
// parameters of a tiny double-precision model.
inline FiniteDifferenceResult finite_difference_check(int samples = 20, double eps = 1e-6, std::uint64_t seed = 7) {
  const auto bcfg = tiny_backbone();
  ssmtl::model::MultiTaskNet net(bcfg, 11);
  net->to(torch::kFloat64);
  ssmtl::train::TrainConfig tcfg;
  tcfg.backbone = bcfg;

  const auto x = random_sequences(2, seed, torch::kFloat64);
  torch::manual_seed(seed + 1);
  std::map<Task, ssmtl::train::TaskTargets> targets;
  targets[Task::T1].labels = torch::tensor({0, 1}, torch::kInt64);
  targets[Task::T2].labels = torch::tensor({1, 1}, torch::kInt64);
  targets[Task::T3].images = torch::rand({2, 64, 64, 3}, torch::kFloat64);
  targets[Task::T5].images = torch::rand({2, 64, 64, 3}, torch::kFloat64);

  auto total = [&]() {
    const auto f = net->features(x);
    std::map<Task, ssmtl::model::HeadOutput> outs;
    for (Task t : bcfg.tasks) outs[t] = net->head_forward(f, t);
    return ssmtl::train::multi_task_loss(outs, targets, tcfg).total;
  };

  net->zero_grad();
  total().backward();
  auto params = net->parameters();
  std::vector<std::pair<size_t, int64_t>> all;
  for (size_t p = 0; p < params.size(); ++p)
    for (int64_t i = 0; i < params[p].numel(); ++i) all.emplace_back(p, i);
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);

  FiniteDifferenceResult r;
  torch::NoGradGuard no_grad;
  for (const auto& [p, i] : all) {
    if (r.checked == samples) break;
    auto flat = params[p].view({-1});
    const double analytic = params[p].grad().view({-1})[i].item<double>();
    if (std::abs(analytic) < 1e-6) continue;  // below the central-difference roundoff floor
    const double original = flat[i].item<double>();
    flat[i] = original + eps;
    const double up = total().item<double>();
    flat[i] = original - eps;
    const double down = total().item<double>();
    flat[i] = original;
    const double numeric = (up - down) / (2 * eps);
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
    if (std::getenv("FD_DEBUG")) std::fprintf(stderr, "%zu %ld a=%g n=%g rel=%g\n", p, long(i), analytic, numeric, rel);
    r.max_relative_error = std::max(r.max_relative_error, rel);
    ++r.checked;
  }
  return r;
}

// Token grid, fused feature map and every head of a preset; returns the first violation or "".
inline std::string shape_contract_violation(const std::string& preset) {
  using ssmtl::model::is_classification;
  using ssmtl::model::is_decoder;
  ssmtl::model::MultiTaskNet net(ssmtl::train::preset(preset).backbone, 0);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto& cfg = net->config();
  const auto x = random_sequences(2, 1);
  const auto grid = net->encoder_forward(x);
  if (grid.sizes() != torch::IntArrayRef{2, cfg.token_dim, 7, 8, 8}) return "token grid";
  const auto f = net->features(x);
  if (f.sizes() != torch::IntArrayRef{2, cfg.token_dim, 8, 8}) return "feature map";
  auto normalized = [](const torch::Tensor& p) { return (p.sum(1) - 1).abs().max().item<double>() < 1e-5; };
  for (Task t : cfg.tasks) {
    const auto out = net->head_forward(f, t);
    const std::string name = ssmtl::model::to_string(t);
    if (is_classification(t)) {
      const int classes = t == Task::T8 ? cfg.jigsaw_classes : 2;
      if (out.logits.sizes() != torch::IntArrayRef{2, classes} || !normalized(out.probs)) return name;
    } else if (is_decoder(t)) {
      int channels = 3;
      if (t == Task::T7) channels = cfg.seg_channels;
      if (t == Task::T9) channels = cfg.pose_joints;
      if (out.image.sizes() != torch::IntArrayRef{2, 64, 64, channels}) return name;
    } else if (out.features.sizes() != torch::IntArrayRef{2, cfg.teacher_dim} ||
               out.logits.sizes() != torch::IntArrayRef{2, cfg.num_classes} || !normalized(out.probs)) {
      return name;
    }
  }
  return "";
}

struct AttentionResult {
  double max_row_error = 0;    // max |sum_k attn - 1|
  double max_fused_error = 0;  // fused kernel vs explicit softmax path
  std::vector<int64_t> shape;
};

inline AttentionResult attention_check(const std::string& preset) {
  auto cfg = ssmtl::train::preset(preset).backbone;
  ssmtl::model::MultiTaskNet net(cfg, 1);
  net->eval();
  torch::NoGradGuard no_grad;
  const auto x = random_sequences(2, 9);
  AttentionResult r;
  if (net->blocks().empty()) return r;
  const auto fused = net->features(x);
  for (auto& b : net->blocks()) b->record_attention = true;
  const auto explicit_path = net->features(x);
  for (auto& b : net->blocks()) {
    const auto rows = b->last_attention.sum(-1);
    r.max_row_error = std::max(r.max_row_error, (rows - 1).abs().max().item<double>());
    r.shape = b->last_attention.sizes().vec();
    b->record_attention = false;
  }
  r.max_fused_error = (fused - explicit_path).abs().max().item<double>();
  return r;
}

}  // namespace checks
