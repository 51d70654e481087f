#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pvit6d/geometry.hpp"
#include "pvit6d/nn/ops.hpp"
#include "pvit6d/nn/optim.hpp"
#include "pvit6d/pose.hpp"
#include "pvit6d/rng.hpp"

namespace pvit6d {

enum class TokenMode { POOL, SINGLE_TOKEN, DUAL_TOKEN };
enum class SccaMode { NONE, CONV, ATTN };
enum class SccaTargets { Q_ONLY, QKV };

struct ModelConfig {
  int img_size = 64;
  int patch_size = 8;
  int embed_dim = 96;
  std::vector<int> stage_depths = {2, 2};
  std::vector<int> stage_heads = {2, 4};
  // Key/value pooling stride per stage (applied in every block of the
  // stage); query pooling is always stride 2 at the first block of each
  // stage after the first.
  std::vector<int> kv_strides = {2, 1};
  int mlp_ratio = 2;
  TokenMode token_mode = TokenMode::DUAL_TOKEN;
  SccaMode scca_mode = SccaMode::NONE;
  SccaTargets scca_targets = SccaTargets::Q_ONLY;
  TransVariant trans_variant = TransVariant::SITP;
  bool use_bbox_embedding = true;
  int n_classes = 3;

  int n_stages() const { return int(stage_depths.size()); }
  int stage_width(int s) const { return embed_dim << s; }
  int final_width() const { return stage_width(n_stages() - 1); }
  int grid_size() const { return img_size / patch_size; }

  // Token layout. DUAL_TOKEN: rot, trans, scit, class. SINGLE_TOKEN:
  // pose, scit, class. POOL: none.
  int n_tokens() const;
  int scit_index() const;  // -1 in POOL mode

  void validate() const;  // throws ConfigInvalid
};

ModelConfig preset_tiny();
ModelConfig preset_small();
ModelConfig preset_base();
ModelConfig preset_large();
ModelConfig preset_by_name(const std::string& name);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

std::string trans_variant_name(TransVariant v);
TransVariant trans_variant_from_name(const std::string& s);

enum class ParamInit { Normal, Zero, One, PoolKernel };

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  ParamInit init = ParamInit::Normal;
};

// Parameter inventory as a pure function of the config; ordering is the
// construction order and is part of the checkpoint contract.
std::vector<ParamSpec> param_specs(const ModelConfig& cfg);
std::int64_t count_params(const ModelConfig& cfg);

struct ForwardInput {
  nn::Tensor roi;                              // [B, s, s, 3]
  std::vector<int> class_ids;                  // detector class per instance
  std::vector<std::array<double, 4>> bboxes;   // (ox, oy, w, h) / img dims
};

struct StageAttention {
  nn::Tensor weights;  // [B, heads, Tq, Tk], rows sum to 1
  int n_tokens = 0;      // query-side tokens
  int n_key_tokens = 0;  // key side excludes the complexity token
  int q_h = 0, q_w = 0;
  int k_h = 0, k_w = 0;
};

struct ForwardResult {
  nn::Var r6d;          // [B, 6], allocentric rotation code
  nn::Var tcode;        // [B, 3]
  nn::Var class_logits; // [B, n_classes]
  nn::Tensor class_scores;  // sigmoid(logits)
  nn::Var fused;        // POOL-mode readout vector, null otherwise
  TransVariant trans_variant = TransVariant::SITP;
  std::vector<StageAttention> attn;  // last block of each stage
};

// Pooling of a spatial map, optionally conditioned on the complexity token.
// x: [B, H, W, C]; scit: [B, C] (unused for NONE); kernel: learned [3, 3, C]
// depthwise kernel (unused for CONV, whose kernel comes from the
// conditioner); cond_w/cond_b: conditioner linear (unused for NONE).
// Output spatial dims are (H - 1) / stride + 1 with 3x3 kernels and pad 1.
nn::Var scca_pool(const nn::Var& x, const nn::Var& scit, SccaMode mode,
                  int stride, const nn::Var& kernel, const nn::Var& cond_w,
                  const nn::Var& cond_b);

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<nn::Var>& parameters() const { return params_; }
  nn::Var param(const std::string& name) const;
  std::int64_t n_params() const;

  ForwardResult forward(const ForwardInput& in) const;

  // FNV-1a over raw parameter bytes, for mutation checks.
  std::uint64_t param_hash() const;

 private:
  ModelConfig cfg_;
  std::vector<nn::Var> params_;
  std::map<std::string, int> index_;
};

struct Prediction {
  Pose pose;
  int class_id = 0;       // detector class used for conditioning
  int class_refined = 0;  // argmax of class scores, lowest index on ties
  double confidence = 0;  // score of the refined class
  std::vector<double> class_scores;
};

int refine_class(const std::vector<double>& scores);

// Decodes sample `i` of a forward result into a metric pose. `bbox` is in
// pixels of the full image, `s_inp` the network input resolution.
Prediction decode_prediction(const ForwardResult& out, int i, int class_id,
                             const BBox& bbox, double s_inp,
                             const CameraIntrinsics& k,
                             const std::vector<ObjectModel>& models);

// Single-file checkpoint: config echo, named parameter tensors, optimizer
// moments, epoch counter.
void save_checkpoint(const std::string& path, const Model& model,
                     const nn::AdamW* opt, int epoch);

struct LoadedCheckpoint {
  Model model;
  int epoch = 0;
  nlohmann::json opt_state;  // empty if the file has none
};

LoadedCheckpoint load_checkpoint(const std::string& path,
                                 std::uint64_t seed = 0);
// Restores moments and step count saved by save_checkpoint.
void restore_optimizer(nn::AdamW& opt, const nlohmann::json& state);

}  // namespace pvit6d
