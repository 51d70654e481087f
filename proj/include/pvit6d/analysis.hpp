#pragma once

#include <string>
#include <vector>

#include "pvit6d/train.hpp"

namespace pvit6d {

// Attention of each pose-reading token over spatial positions, one pair of
// images (raw heatmap + overlay on the roi) per (token, stage). File names
// encode both: attn_stage{S}_{token}.png / attn_stage{S}_{token}_overlay.png.
// Maps are head-averaged and normalized per map. Returns the written paths.
std::vector<std::string> export_attention_maps(const Model& model,
                                               const RoISample& sample,
                                               const std::string& out_dir);

// Least-squares polynomial fit computed on standardized x for conditioning.
struct PolyFit {
  int degree = 0;
  double x_mean = 0.0, x_std = 1.0;
  std::vector<double> coeffs;  // in powers of (x - x_mean) / x_std

  double eval(double x) const;
};

PolyFit polyfit(const std::vector<double>& xs, const std::vector<double>& ys,
                int degree);

struct ConfidenceReport {
  double spearman = 0.0;  // over (confidence, gt_iou3d), confidence > 0.5
  int n_high_conf = 0;    // pairs entering the rank correlation
  PolyFit fit;            // confidence as a function of add error
  std::vector<std::string> files;
};

// Calibration artifacts: scatter CSVs and plots for confidence vs ground
// truth 3D-IoU (with rank correlation over the >0.5 region) and confidence
// vs pose error (with a polynomial trend fit), plus per-class threshold
// sweep curves. Needs at least two records and non-constant columns.
ConfidenceReport confidence_report(const std::vector<PredictionRecord>& records,
                                   const std::string& out_dir,
                                   int fit_degree = 10);

// Mean absolute gradient of the pose loss w.r.t. the fused readout vector,
// averaged over the batch. Rows: pooled features, then the bbox embedding,
// then the class embedding. Requires a fused-readout model with the bbox
// embedding enabled; read-only on parameters.
nn::Tensor saliency_late_fusion(const Model& model,
                                const std::vector<RoISample>& samples,
                                const std::vector<ObjectModel>& models,
                                const LossWeights& weights);

}  // namespace pvit6d
