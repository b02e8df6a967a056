#include "ssmtl/model.hpp"

#include <cmath>
#include <cstring>

#include "ssmtl/error.hpp"

namespace ssmtl::model {

namespace F = torch::nn::functional;

std::string to_string(Task task) { return "T" + std::to_string(static_cast<int>(task)); }

Task parse_task(const std::string& name) {
  if (name.size() == 2 && (name[0] == 'T' || name[0] == 't') && name[1] >= '1' && name[1] <= '9')
    return static_cast<Task>(name[1] - '0');
  throw ConfigError("unknown task '" + name + "'");
}

TaskSet parse_tasks(const std::vector<std::string>& names) {
  TaskSet out;
  for (const auto& n : names) out.insert(parse_task(n));
  return out;
}

std::vector<std::string> task_names(const TaskSet& tasks) {
  std::vector<std::string> out;
  for (auto t : tasks) out.push_back(to_string(t));
  return out;
}

bool is_classification(Task t) { return t == Task::T1 || t == Task::T2 || t == Task::T8; }
bool is_decoder(Task t) {
  return t == Task::T3 || t == Task::T5 || t == Task::T6 || t == Task::T7 || t == Task::T9;
}
bool uses_middle_crop_only(Task t) { return static_cast<int>(t) >= 5; }

std::string to_string(CvtPlacement p) {
  switch (p) {
    case CvtPlacement::none: return "none";
    case CvtPlacement::two_d: return "2d";
    case CvtPlacement::three_d: return "3d";
  }
  return "none";
}

CvtPlacement parse_placement(const std::string& name) {
  if (name == "none") return CvtPlacement::none;
  if (name == "2d") return CvtPlacement::two_d;
  if (name == "3d") return CvtPlacement::three_d;
  throw ConfigError("unknown cvt placement '" + name + "'");
}

int BackboneConfig::resolved_head_dim() const {
  if (head_dim > 0) return head_dim;
  if (cvt_heads <= 0) throw ConfigError("cvt_heads must be positive");
  if (token_dim % cvt_heads != 0)
    throw ConfigError("cvt_heads (" + std::to_string(cvt_heads) + ") does not divide token_dim (" +
                      std::to_string(token_dim) + ")");
  return token_dim / cvt_heads;
}

void BackboneConfig::validate() const {
  if (encoder_widths.size() != 2 || encoder_widths[0] <= 0 || encoder_widths[1] <= 0)
    throw ConfigError("encoder_widths must list two positive stage widths");
  if (token_dim <= 0) throw ConfigError("token_dim must be positive");
  if (cvt_placement != CvtPlacement::none) {
    if (cvt_blocks < 1) throw ConfigError("cvt_blocks must be >= 1 when a CvT placement is set");
    (void)resolved_head_dim();
    if (kv_stride < 1) throw ConfigError("kv_stride must be >= 1");
    if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
  }
  if (tasks.empty()) throw ConfigError("at least one task must be configured");
  if (input_length < 1 || input_length % 2 == 0) throw ConfigError("input_length must be odd");
  if (decoder_width < 2) throw ConfigError("decoder_width must be >= 2");
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"encoder_widths", c.encoder_widths}, {"token_dim", c.token_dim},
       {"cvt_placement", to_string(c.cvt_placement)}, {"cvt_blocks", c.cvt_blocks},
       {"cvt_heads", c.cvt_heads},           {"head_dim", c.head_dim},
       {"kv_stride", c.kv_stride},           {"mlp_ratio", c.mlp_ratio},
       {"decoder_width", c.decoder_width},   {"tasks", task_names(c.tasks)},
       {"input_length", c.input_length},     {"teacher_dim", c.teacher_dim},
       {"num_classes", c.num_classes},       {"seg_channels", c.seg_channels},
       {"pose_joints", c.pose_joints},       {"jigsaw_classes", c.jigsaw_classes}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  const BackboneConfig d;
  c.encoder_widths = j.value("encoder_widths", d.encoder_widths);
  c.token_dim = j.value("token_dim", d.token_dim);
  c.cvt_placement = parse_placement(j.value("cvt_placement", to_string(d.cvt_placement)));
  c.cvt_blocks = j.value("cvt_blocks", d.cvt_blocks);
  c.cvt_heads = j.value("cvt_heads", d.cvt_heads);
  c.head_dim = j.value("head_dim", d.head_dim);
  c.kv_stride = j.value("kv_stride", d.kv_stride);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.decoder_width = j.value("decoder_width", d.decoder_width);
  if (j.contains("tasks")) c.tasks = parse_tasks(j.at("tasks").get<std::vector<std::string>>());
  c.input_length = j.value("input_length", d.input_length);
  c.teacher_dim = j.value("teacher_dim", d.teacher_dim);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.seg_channels = j.value("seg_channels", d.seg_channels);
  c.pose_joints = j.value("pose_joints", d.pose_joints);
  c.jigsaw_classes = j.value("jigsaw_classes", d.jigsaw_classes);
}

// --- gradient reversal ------------------------------------------------------------------

namespace {

struct GradReverseFn : public torch::autograd::Function<GradReverseFn> {
  static torch::Tensor forward(torch::autograd::AutogradContext* ctx, const torch::Tensor& x, double scale) {
    ctx->saved_data["scale"] = scale;
    return x.clone();
  }
  static torch::autograd::variable_list backward(torch::autograd::AutogradContext* ctx,
                                                 torch::autograd::variable_list grads) {
    const double scale = ctx->saved_data["scale"].toDouble();
    return {grads[0] * (-scale), torch::Tensor()};
  }
};

}  // namespace

torch::Tensor grad_reverse(const torch::Tensor& x, double scale) { return GradReverseFn::apply(x, scale); }

// --- CvT block -----------------------------------------------------------------------------

namespace {

torch::nn::Conv3d depthwise(int dim, bool volumetric, int stride) {
  const std::vector<int64_t> k = volumetric ? std::vector<int64_t>{3, 3, 3} : std::vector<int64_t>{1, 3, 3};
  const std::vector<int64_t> p = volumetric ? std::vector<int64_t>{1, 1, 1} : std::vector<int64_t>{0, 1, 1};
  const std::vector<int64_t> s{1, stride, stride};
  return torch::nn::Conv3d(torch::nn::Conv3dOptions(dim, dim, k).padding(p).stride(s).groups(dim));
}

// [B, C, T, H, W] -> [B, T*H*W, C]
torch::Tensor to_tokens(const torch::Tensor& grid) { return grid.flatten(2).transpose(1, 2); }

torch::Tensor to_grid(const torch::Tensor& tokens, const torch::IntArrayRef shape) {
  return tokens.transpose(1, 2).reshape(shape);
}

}  // namespace

CvtBlockImpl::CvtBlockImpl(int dim, int heads, int head_dim, bool volumetric, int kv_stride, int mlp_ratio)
    : heads_(heads), head_dim_(head_dim) {
  const int inner = heads * head_dim;
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  dw_q = register_module("dw_q", depthwise(dim, volumetric, 1));
  dw_k = register_module("dw_k", depthwise(dim, volumetric, kv_stride));
  dw_v = register_module("dw_v", depthwise(dim, volumetric, kv_stride));
  proj_q = register_module("proj_q", torch::nn::Linear(dim, inner));
  proj_k = register_module("proj_k", torch::nn::Linear(dim, inner));
  proj_v = register_module("proj_v", torch::nn::Linear(dim, inner));
  proj_out = register_module("proj_out", torch::nn::Linear(inner, dim));
  mlp_in = register_module("mlp_in", torch::nn::Linear(dim, dim * mlp_ratio));
  mlp_out = register_module("mlp_out", torch::nn::Linear(dim * mlp_ratio, dim));
}

torch::Tensor CvtBlockImpl::forward(const torch::Tensor& grid) {
  const auto shape = grid.sizes().vec();
  const int64_t batch = shape[0];
  torch::Tensor x = to_tokens(grid);  // [B, N, C]
  const torch::Tensor normed = to_grid(norm1(x), shape);

  auto split_heads = [&](const torch::Tensor& t) {  // [B, N, H*d] -> [B, H, N, d]
    return t.view({batch, t.size(1), heads_, head_dim_}).transpose(1, 2);
  };
  const torch::Tensor q = split_heads(proj_q(to_tokens(dw_q(normed))));
  const torch::Tensor k = split_heads(proj_k(to_tokens(dw_k(normed))));
  const torch::Tensor v = split_heads(proj_v(to_tokens(dw_v(normed))));

  torch::Tensor mixed;
  if (force_uniform_attention || record_attention) {
    torch::Tensor attn;
    if (force_uniform_attention) {
      attn = torch::full({batch, heads_, q.size(2), k.size(2)}, 1.0 / double(k.size(2)), q.options());
    } else {
      attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(double(head_dim_)), -1);
    }
    if (record_attention) last_attention = attn.detach();
    mixed = torch::matmul(attn, v);
  } else {
    // Fused kernel; never materializes the attention matrix.
    mixed = at::scaled_dot_product_attention(q, k, v);
  }
  torch::Tensor out = mixed.transpose(1, 2).reshape({batch, q.size(2), heads_ * head_dim_});
  x = x + proj_out(out);
  x = x + mlp_out(F::gelu(mlp_in(norm2(x))));
  return to_grid(x, shape);
}

// --- heads ----------------------------------------------------------------------------------

HeadImpl::HeadImpl(Task task, const BackboneConfig& cfg) : task_(task) {
  const int c = cfg.token_dim;
  body_ = torch::nn::Sequential();
  if (is_classification(task)) {
    const int classes = task == Task::T8 ? cfg.jigsaw_classes : 2;
    body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).padding(1)));
    body_->push_back(torch::nn::ReLU());
    linear_ = register_module("linear", torch::nn::Linear(c, classes));
  } else if (is_decoder(task)) {
    int out_channels = 3;
    if (task == Task::T7) out_channels = cfg.seg_channels;
    if (task == Task::T9) out_channels = cfg.pose_joints;
    const int w = cfg.decoder_width;
    const std::vector<int> widths{c, w, w / 2, w / 2};
    for (size_t s = 0; s + 1 < widths.size(); ++s) {
      body_->push_back(torch::nn::Upsample(
          torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
      body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[s], widths[s + 1], 3).padding(1)));
      body_->push_back(torch::nn::ReLU());
    }
    body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(widths.back(), out_channels, 3).padding(1)));
    body_->push_back(torch::nn::Sigmoid());
  } else {  // T4
    linear_ = register_module("linear", torch::nn::Linear(c, cfg.teacher_dim));
    class_linear_ = register_module("class_linear", torch::nn::Linear(c, cfg.num_classes));
  }
  register_module("body", body_);
}

torch::Tensor HeadImpl::forward(const torch::Tensor& features) {
  if (is_classification(task_)) {
    return linear_(body_->forward(features).mean({2, 3}));
  }
  if (is_decoder(task_)) {
    return body_->forward(features).permute({0, 2, 3, 1});
  }
  const torch::Tensor pooled = features.mean({2, 3});
  return torch::cat({linear_(pooled), class_linear_(pooled)}, 1);
}

// --- network ----------------------------------------------------------------------------------

torch::Tensor temporal_pool(const torch::Tensor& grid) {
  if (grid.dim() != 5) throw ValidationError("temporal pooling expects a [B, C, T, H, W] grid");
  return grid.mean(2);
}

MultiTaskNetImpl::MultiTaskNetImpl(BackboneConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  torch::manual_seed(init_seed);
  encoder_ = torch::nn::Sequential();
  const std::vector<int> widths{3, cfg_.encoder_widths[0], cfg_.encoder_widths[1], cfg_.token_dim};
  for (size_t s = 0; s + 1 < widths.size(); ++s) {
    // 3x3x3 convolution with spatial stride 2 (temporal stride 1), then activation: 64 -> 32 -> 16 -> 8.
    encoder_->push_back(torch::nn::Conv3d(
        torch::nn::Conv3dOptions(widths[s], widths[s + 1], 3).padding(1).stride({1, 2, 2})));
    encoder_->push_back(torch::nn::ReLU());
  }
  register_module("encoder", encoder_);

  if (cfg_.cvt_placement != CvtPlacement::none) {
    const bool volumetric = cfg_.cvt_placement == CvtPlacement::three_d;
    for (int b = 0; b < cfg_.cvt_blocks; ++b) {
      torch::manual_seed(init_seed + 1000 + static_cast<std::uint64_t>(b));
      blocks_.push_back(register_module(
          "cvt" + std::to_string(b), CvtBlock(cfg_.token_dim, cfg_.cvt_heads, cfg_.resolved_head_dim(), volumetric,
                                              cfg_.kv_stride, cfg_.mlp_ratio)));
    }
  }
  for (Task t : cfg_.tasks) {
    torch::manual_seed(init_seed + 2000 + static_cast<std::uint64_t>(t));
    heads_.emplace(t, register_module("head_" + to_string(t), Head(t, cfg_)));
  }
}

torch::Tensor MultiTaskNetImpl::encoder_forward(const torch::Tensor& sequences) {
  if (sequences.dim() != 5 || sequences.size(1) != cfg_.input_length || sequences.size(2) != 64 ||
      sequences.size(3) != 64 || sequences.size(4) != 3)
    throw ValidationError("encoder expects [B, " + std::to_string(cfg_.input_length) + ", 64, 64, 3] input");
  // Fixed standardization of [0, 1] pixels; without centring the encoder stalls at chance.
  return encoder_->forward(((sequences - 0.5) * 4.0).permute({0, 4, 1, 2, 3}));
}

torch::Tensor MultiTaskNetImpl::cvt_forward(const torch::Tensor& tokens) {
  if (cfg_.cvt_placement == CvtPlacement::none) return tokens;
  if (cfg_.cvt_placement == CvtPlacement::two_d) {
    if (tokens.dim() != 4) throw ValidationError("2D CvT expects a [B, C, H, W] grid");
    torch::Tensor x = tokens.unsqueeze(2);
    for (auto& b : blocks_) x = b->forward(x);
    return x.squeeze(2);
  }
  if (tokens.dim() != 5) throw ValidationError("3D CvT expects a [B, C, T, H, W] grid");
  torch::Tensor x = tokens;
  for (auto& b : blocks_) x = b->forward(x);
  return x;
}

torch::Tensor MultiTaskNetImpl::features(const torch::Tensor& sequences) {
  const torch::Tensor grid = encoder_forward(sequences);
  if (cfg_.cvt_placement == CvtPlacement::two_d) return cvt_forward(temporal_pool(grid));
  return temporal_pool(cvt_forward(grid));
}

Head MultiTaskNetImpl::head(Task task) const {
  auto it = heads_.find(task);
  if (it == heads_.end()) throw ConfigError("task " + to_string(task) + " is not configured in this model");
  return it->second;
}

HeadOutput MultiTaskNetImpl::head_forward(const torch::Tensor& features, Task task) {
  HeadOutput out;
  out.task = task;
  const torch::Tensor y = head(task)->forward(features);
  if (is_classification(task)) {
    out.logits = y;
    out.probs = torch::softmax(y, 1);
  } else if (is_decoder(task)) {
    out.image = y;
  } else {
    out.features = y.narrow(1, 0, cfg_.teacher_dim);
    out.logits = y.narrow(1, cfg_.teacher_dim, cfg_.num_classes);
    out.probs = torch::softmax(out.logits, 1);
  }
  return out;
}

HeadOutput MultiTaskNetImpl::adversarial_forward(const torch::Tensor& features, double reverse_scale) {
  return head_forward(grad_reverse(features, reverse_scale), Task::T5);
}

std::vector<torch::Tensor> MultiTaskNetImpl::encoder_parameters() const {
  std::vector<torch::Tensor> params = encoder_->parameters();
  for (const auto& b : blocks_) {
    auto p = b->parameters();
    params.insert(params.end(), p.begin(), p.end());
  }
  return params;
}

// --- checkpoints ----------------------------------------------------------------------------------

namespace {

torch::Tensor string_tensor(const std::string& s) {
  torch::Tensor t = torch::empty({static_cast<int64_t>(s.size())}, torch::kInt8);
  if (!s.empty()) std::memcpy(t.data_ptr<int8_t>(), s.data(), s.size());
  return t;
}

std::string tensor_string(const torch::Tensor& t) {
  std::string s(static_cast<size_t>(t.numel()), '\0');
  if (!s.empty()) std::memcpy(s.data(), t.contiguous().data_ptr<int8_t>(), s.size());
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, MultiTaskNet& net, const nlohmann::json& meta) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  nlohmann::json full = meta;
  full["backbone"] = net->config();
  torch::serialize::OutputArchive archive;
  net->save(archive);
  archive.write("meta/json", string_tensor(full.dump()));
  archive.save_to(file.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw ConfigError("checkpoint not found: " + file.string());
  torch::serialize::InputArchive archive;
  archive.load_from(file.string());
  torch::Tensor meta_tensor;
  if (!archive.try_read("meta/json", meta_tensor)) throw ConfigError("checkpoint lacks metadata: " + file.string());
  LoadedCheckpoint out;
  out.meta = nlohmann::json::parse(tensor_string(meta_tensor));
  const BackboneConfig cfg = out.meta.at("backbone").get<BackboneConfig>();
  out.net = MultiTaskNet(cfg, 0);
  out.net->load(archive);
  out.net->eval();
  return out;
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& module) {
  std::vector<torch::Tensor> out;
  for (const auto& p : module.parameters()) out.push_back(p.detach().clone());
  return out;
}

void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& values) {
  torch::NoGradGuard guard;
  auto params = module.parameters();
  if (params.size() != values.size()) throw ValidationError("snapshot does not match module parameters");
  for (size_t i = 0; i < params.size(); ++i) params[i].copy_(values[i]);
}

}  // namespace ssmtl::model
