#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pvit6d/data.hpp"
#include "pvit6d/losses.hpp"
#include "pvit6d/model.hpp"

namespace pvit6d {

struct TrainConfig {
  double lr = 1.2e-4;
  double weight_decay = 1e-4;
  int batch_size = 32;
  int warmup_epochs = 2;
  int max_epochs = 30;
  int early_stop_patience = 15;
  double grad_clip_norm = 0.1;
  LossWeights loss_weights;
  double p_flip = 0.1;
  double p_remove = 0.1;
  double score_box_scale = 1.0;  // box scaling inside the 3D-IoU score
  bool augment_train = true;
  AugmentConfig augment;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigInvalid
};

// Differentiable Gram-Schmidt decode of a [B, 6] code into row-major
// [B, 9] rotation matrices.
nn::Var rotation_from_r6d(const nn::Var& r6d);

// Per-instance data assembled for one optimizer step.
struct Batch {
  ForwardInput input;
  std::vector<RoISample> samples;
};

Batch make_batch(const std::vector<RoISample>& samples);

struct BatchLoss {
  nn::Var total;         // scalar, weighted
  LossBreakdown values;  // unweighted per-term means
};

// Builds the training loss on top of a forward result. Score targets are
// the 3D-IoU of the currently predicted pose against gt (treated as a
// constant); injected negatives get all-zero score targets; removed
// objects additionally mask the pose terms.
BatchLoss batch_loss(const ForwardResult& out,
                     const std::vector<RoISample>& samples,
                     const std::vector<ObjectModel>& models,
                     const LossWeights& w, double score_box_scale,
                     int s_inp);

struct PredictionRecord {
  int scene_index = -1;
  int gt_index = -1;
  int class_gt = -1;
  int class_input = -1;
  int class_refined = -1;
  Pose pose_pred, pose_gt;
  double confidence = 0;
  double gt_iou3d = 0;
  double add_err = 0;
  double adds_err = 0;
  double diameter = 0;
  bool symmetric = false;  // headline error uses the symmetric variant
  bool injected = false;
  bool pose_valid = true;  // false for removed-object injections
};

std::vector<PredictionRecord> evaluate(
    const Model& model, const std::vector<RoISample>& data,
    const std::vector<ObjectModel>& models, int batch_size = 64);

struct MetricReport {
  struct PerClass {
    int class_id = 0;
    int count = 0;
    double recall = 0;     // ADD(-S) recall@0.1d
    double auc = 0;        // ADD(-S) AUC over [0, 10cm]
    double mean_conf = 0;
  };
  std::vector<PerClass> per_class;
  int count = 0;
  double mean_recall = 0;  // averaged over classes
  double mean_auc = 0;
  double mean_conf = 0;
  double spearman = 0;     // rho(confidence, gt_iou3d); NaN if degenerate
};

MetricReport metric_report(const std::vector<PredictionRecord>& records);

void save_records(const std::string& path,
                  const std::vector<PredictionRecord>& records);
std::vector<PredictionRecord> load_records(const std::string& path);

nlohmann::json report_to_json(const MetricReport& r);
std::string report_to_text(const MetricReport& r);

struct SweepEntry {
  double tau = 0;
  double coverage = 0;  // retained fraction
  std::optional<double> recall;  // absent when nothing is retained
};

struct ThresholdSweep {
  std::vector<SweepEntry> mean;
  std::map<int, std::vector<SweepEntry>> per_class;
};

ThresholdSweep confidence_threshold_sweep(
    const std::vector<PredictionRecord>& records,
    const std::vector<double>& thresholds);

struct EpochStats {
  int epoch = 0;
  double lr = 0;
  LossBreakdown loss;    // means over the epoch
  double total = 0;
  double grad_norm = 0;  // mean pre-clip norm
  double val_recall = 0;
  bool improved = false;
};

struct TrainResult {
  int best_epoch = -1;
  double best_val = 0;
  std::vector<EpochStats> history;
  std::string checkpoint_path;
  std::string history_path;
};

// Full training loop: shuffled minibatches with augmentation and denoising
// injection, AdamW with linear warmup/decay, per-step global grad-norm
// clipping, early stopping on val ADD(-S) recall@0.1d. The best checkpoint
// and a JSONL history land in out_dir. Throws NaNLoss naming the batch.
TrainResult train(Model& model, const std::vector<SceneSample>& train_scenes,
                  const std::vector<SceneSample>& val_scenes,
                  const std::vector<ObjectSpec>& library,
                  const RoiConfig& rcfg, const TrainConfig& tcfg,
                  const std::string& out_dir);

}  // namespace pvit6d
