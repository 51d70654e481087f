#pragma once

#include <vector>

#include "pvit6d/geometry.hpp"
#include "pvit6d/pose.hpp"

namespace pvit6d {

struct LossWeights {
  double lambda_c = 1.0;
  double lambda_z = 1.0;
  double lambda_r = 1.0;
  double lambda_cls = 1.0;
};

struct LossBreakdown {
  double center = 0, z = 0, rot = 0, cls = 0;
  double total(const LossWeights& w) const {
    return w.lambda_c * center + w.lambda_z * z + w.lambda_r * rot +
           w.lambda_cls * cls;
  }
};

double loss_center(const TranslationCode& pred, const TranslationCode& gt);
double loss_z(double pred_gz, double gt_gz);

// Mean L1 norm of the rotation-only point displacement.
double loss_rot(const Mat3& pred_r, const Mat3& gt_r,
                const std::vector<Vec3>& points);
double loss_rot_sym(const Mat3& pred_r, const Mat3& gt_r,
                    const std::vector<Vec3>& points,
                    const std::vector<Mat3>& symmetries);

// Varifocal-style cross-entropy against a scaled one-hot target; predictions
// are per-class sigmoid scores, clamped at 1e-12 before the log.
double loss_cls(const Eigen::VectorXd& pred_scores, const GTScore& gt);

LossBreakdown loss_total(const TranslationCode& pred_t,
                         const TranslationCode& gt_t, const Mat3& pred_r,
                         const Mat3& gt_r, const Eigen::VectorXd& pred_scores,
                         const GTScore& gt_score,
                         const std::vector<Vec3>& points,
                         const std::vector<Mat3>& symmetries);

}  // namespace pvit6d
