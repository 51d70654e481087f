#pragma once

#include <array>
#include <vector>

#include "pvit6d/pose.hpp"

namespace pvit6d {

// Sampled surface points plus box extents and the discrete symmetry set.
// `extents` are half-sizes; symmetries always contain the identity.
struct ObjectModel {
  int class_id = 0;
  std::vector<Vec3> points;
  double diameter = 0;
  Vec3 extents = Vec3::Zero();
  std::vector<Mat3> symmetries{Mat3::Identity()};
};

struct GTScore {
  Eigen::VectorXd scores;  // at most one nonzero entry (the scaled 3D-IoU)
};

// Max pairwise distance over the sampled points.
double model_diameter(const std::vector<Vec3>& points);

std::array<Vec3, 8> box_corners(const Pose& pose, const Vec3& extents,
                                double scale);

// Exact oriented-box IoU via half-space clipping of one box's polyhedron
// against the other's six planes.
double iou3d(const Pose& pose_gt, const Pose& pose_pred, const Vec3& extents,
             double scale = 1.0);

GTScore gt_score(int class_id, const Pose& pose_gt, const Pose& pose_pred,
                 const ObjectModel& model, double scale, int n_classes);

double add_error(const ObjectModel& model, const Pose& pose_gt,
                 const Pose& pose_pred);
double adds_error(const ObjectModel& model, const Pose& pose_gt,
                  const Pose& pose_pred);

double recall_add(const std::vector<double>& errors,
                  const std::vector<double>& diameters,
                  double threshold_frac = 0.1);

// Area under the recall-vs-threshold curve over [0, max_threshold],
// normalized to [0, 1]; exact for the piecewise-constant recall curve.
double auc_add(const std::vector<double>& errors, double max_threshold = 0.10);

// Rank correlation with average-rank tie handling.
double spearman_rho(const std::vector<double>& a, const std::vector<double>& b);

// Convex polyhedron as a list of planar polygon faces; used by the IoU
// clipping routine and exposed for tests.
struct ConvexPoly {
  std::vector<std::vector<Vec3>> faces;
  bool empty() const { return faces.empty(); }
};

ConvexPoly box_polyhedron(const Pose& pose, const Vec3& extents, double scale);
// Keeps the part with n.dot(x) <= d, rebuilding the cap face.
ConvexPoly clip_by_plane(const ConvexPoly& poly, const Vec3& n, double d);
double polyhedron_volume(const ConvexPoly& poly);

}  // namespace pvit6d
