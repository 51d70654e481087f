#include "pvit6d/losses.hpp"

#include <cmath>

namespace pvit6d {

double loss_center(const TranslationCode& pred, const TranslationCode& gt) {
  if (pred.variant != gt.variant)
    throw VariantMismatch("loss_center: translation variants differ");
  return std::abs(pred.gx - gt.gx) + std::abs(pred.gy - gt.gy);
}

double loss_z(double pred_gz, double gt_gz) { return std::abs(pred_gz - gt_gz); }

double loss_rot(const Mat3& pred_r, const Mat3& gt_r,
                const std::vector<Vec3>& points) {
  double sum = 0;
  for (const auto& x : points) sum += (pred_r * x - gt_r * x).lpNorm<1>();
  return sum / double(points.size());
}

double loss_rot_sym(const Mat3& pred_r, const Mat3& gt_r,
                    const std::vector<Vec3>& points,
                    const std::vector<Mat3>& symmetries) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : symmetries)
    best = std::min(best, loss_rot(pred_r, gt_r * s, points));
  return best;
}

double loss_cls(const Eigen::VectorXd& pred_scores, const GTScore& gt) {
  double sum = 0;
  for (int i = 0; i < pred_scores.size(); ++i) {
    if (gt.scores[i] == 0.0) continue;
    sum -= gt.scores[i] * std::log(std::max(pred_scores[i], 1e-12));
  }
  return sum;
}

LossBreakdown loss_total(const TranslationCode& pred_t,
                         const TranslationCode& gt_t, const Mat3& pred_r,
                         const Mat3& gt_r, const Eigen::VectorXd& pred_scores,
                         const GTScore& gt_score,
                         const std::vector<Vec3>& points,
                         const std::vector<Mat3>& symmetries) {
  LossBreakdown b;
  b.center = loss_center(pred_t, gt_t);
  b.z = loss_z(pred_t.gz, gt_t.gz);
  b.rot = loss_rot_sym(pred_r, gt_r, points, symmetries);
  b.cls = loss_cls(pred_scores, gt_score);
  return b;
}

}  // namespace pvit6d
