#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace ssmtl::model {

// Proxy tasks.
//   T1 arrow of time, T2 motion irregularity, T3 middle-crop prediction, T4 distillation
//   (teacher features + detector class probabilities), T5 adversarial pseudo-anomaly
//   reconstruction, T6 patch inpainting, T7 segmentation distillation, T8 jigsaw,
//   T9 pose-heatmap distillation.
enum class Task : int { T1 = 1, T2, T3, T4, T5, T6, T7, T8, T9 };

using TaskSet = std::set<Task>;

std::string to_string(Task task);
Task parse_task(const std::string& name);
TaskSet parse_tasks(const std::vector<std::string>& names);
std::vector<std::string> task_names(const TaskSet& tasks);

bool is_classification(Task task);  // T1, T2, T8
bool is_decoder(Task task);         // T3, T5, T6, T7, T9
bool uses_middle_crop_only(Task task);  // single-image tasks: T5..T9

enum class CvtPlacement { none, two_d, three_d };

std::string to_string(CvtPlacement placement);
CvtPlacement parse_placement(const std::string& name);

struct BackboneConfig {
  // Channels of the first two encoder stages; the third stage emits token_dim channels.
  std::vector<int> encoder_widths{16, 32};
  int token_dim = 64;
  CvtPlacement cvt_placement = CvtPlacement::three_d;
  int cvt_blocks = 3;
  int cvt_heads = 12;
  // Per-head width. 0 means token_dim / cvt_heads, which then must divide exactly.
  int head_dim = 8;
  // Spatial stride of the key/value depthwise projections (1 keeps every token).
  int kv_stride = 2;
  int mlp_ratio = 4;
  int decoder_width = 32;
  TaskSet tasks{Task::T1, Task::T2, Task::T3};

  int input_length = 7;
  int teacher_dim = 32;      // T4 feature width
  int num_classes = 4;       // T4 detector class count
  int seg_channels = 1;      // T7
  int pose_joints = 17;      // T9
  int jigsaw_classes = 100;  // T8

  void validate() const;
  int resolved_head_dim() const;
  int attention_dim() const { return cvt_heads * resolved_head_dim(); }
  bool has(Task t) const { return tasks.count(t) != 0; }
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

// Identity forward; backward multiplies the incoming gradient by -scale.
torch::Tensor grad_reverse(const torch::Tensor& x, double scale = 0.2);

// Pre-norm transformer block whose q/k/v projections are depthwise convolutions over the
// token grid. Operates on [B, C, T, H, W]; the 2D placement passes T = 1 and uses 1x3x3 kernels.
class CvtBlockImpl : public torch::nn::Module {
 public:
  CvtBlockImpl(int dim, int heads, int head_dim, bool volumetric, int kv_stride, int mlp_ratio);

  torch::Tensor forward(const torch::Tensor& grid);

  // Test hooks.
  bool force_uniform_attention = false;
  bool record_attention = false;
  torch::Tensor last_attention;  // [B, heads, queries, keys] when record_attention

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv3d dw_q{nullptr}, dw_k{nullptr}, dw_v{nullptr};
  torch::nn::Linear proj_q{nullptr}, proj_k{nullptr}, proj_v{nullptr}, proj_out{nullptr};
  torch::nn::Linear mlp_in{nullptr}, mlp_out{nullptr};

 private:
  int heads_;
  int head_dim_;
};
TORCH_MODULE(CvtBlock);

// Per-task prediction head on the pooled [B, C, 8, 8] feature map.
class HeadImpl : public torch::nn::Module {
 public:
  HeadImpl(Task task, const BackboneConfig& cfg);

  // Classification: logits [B, n]. Decoders: sigmoid image [B, 64, 64, C] (channels last).
  // T4: concatenated [features | class logits].
  torch::Tensor forward(const torch::Tensor& features);

  Task task() const { return task_; }

 private:
  Task task_;
  torch::nn::Sequential body_{nullptr};
  torch::nn::Linear linear_{nullptr};
  torch::nn::Linear class_linear_{nullptr};
};
TORCH_MODULE(Head);

struct HeadOutput {
  Task task = Task::T1;
  torch::Tensor logits;    // T1, T2, T8, T4 (class logits)
  torch::Tensor probs;     // softmax of logits
  torch::Tensor image;     // T3, T5, T6 [B,64,64,3]; T7 [B,64,64,seg]; T9 [B,64,64,joints]
  torch::Tensor features;  // T4 teacher-feature prediction
};

class MultiTaskNetImpl : public torch::nn::Module {
 public:
  // Each component is initialized from its own seed so adding or removing heads leaves
  // the initial weights of everything else unchanged.
  explicit MultiTaskNetImpl(BackboneConfig cfg, std::uint64_t init_seed = 0);

  // [B, T, 64, 64, 3] -> token grid [B, C, T, 8, 8] (pre-pool, pre-transformer).
  torch::Tensor encoder_forward(const torch::Tensor& sequences);
  // [B, C, T, H, W] (3D) or [B, C, H, W] (2D) -> same shape.
  torch::Tensor cvt_forward(const torch::Tensor& tokens);
  // Full shared backbone: [B, T, 64, 64, 3] -> [B, C, 8, 8].
  torch::Tensor features(const torch::Tensor& sequences);
  HeadOutput head_forward(const torch::Tensor& features, Task task);
  // T5 path: features -> gradient reversal -> T5 decoder.
  HeadOutput adversarial_forward(const torch::Tensor& features, double reverse_scale = 0.2);

  const BackboneConfig& config() const { return cfg_; }
  std::vector<CvtBlock>& blocks() { return blocks_; }
  Head head(Task task) const;
  std::vector<torch::Tensor> encoder_parameters() const;

 private:
  BackboneConfig cfg_;
  torch::nn::Sequential encoder_{nullptr};
  std::vector<CvtBlock> blocks_;
  std::map<Task, Head> heads_;
};
TORCH_MODULE(MultiTaskNet);

// Mean over the temporal axis: [B, C, T, H, W] -> [B, C, H, W].
torch::Tensor temporal_pool(const torch::Tensor& grid);

// Single-file archive: parameters plus a JSON metadata blob (config, permutation set,
// normalization statistics, ...). The backbone config travels under meta["backbone"].
void save_checkpoint(const std::filesystem::path& file, MultiTaskNet& net, const nlohmann::json& meta);

struct LoadedCheckpoint {
  MultiTaskNet net{nullptr};
  nlohmann::json meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

// Deep copy of all parameter values (for best-epoch bookkeeping).
std::vector<torch::Tensor> snapshot(const torch::nn::Module& module);
void restore(torch::nn::Module& module, const std::vector<torch::Tensor>& values);

}  // namespace ssmtl::model
