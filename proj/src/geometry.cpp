#include "pvit6d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pvit6d {

namespace {
constexpr double kPlaneEps = 1e-12;

Vec3 newell_normal(const std::vector<Vec3>& poly) {
  Vec3 n = Vec3::Zero();
  for (size_t i = 0; i < poly.size(); ++i) {
    const Vec3& a = poly[i];
    const Vec3& b = poly[(i + 1) % poly.size()];
    n.x() += (a.y() - b.y()) * (a.z() + b.z());
    n.y() += (a.z() - b.z()) * (a.x() + b.x());
    n.z() += (a.x() - b.x()) * (a.y() + b.y());
  }
  return n;
}
}  // namespace

double model_diameter(const std::vector<Vec3>& points) {
  double d2 = 0;
  for (size_t i = 0; i < points.size(); ++i)
    for (size_t j = i + 1; j < points.size(); ++j)
      d2 = std::max(d2, (points[i] - points[j]).squaredNorm());
  return std::sqrt(d2);
}

std::array<Vec3, 8> box_corners(const Pose& pose, const Vec3& extents,
                                double scale) {
  std::array<Vec3, 8> out;
  int idx = 0;
  for (int sx : {-1, 1})
    for (int sy : {-1, 1})
      for (int sz : {-1, 1}) {
        const Vec3 local(sx * extents.x(), sy * extents.y(), sz * extents.z());
        out[idx++] = pose.R * (scale * local) + pose.t;
      }
  return out;
}

ConvexPoly box_polyhedron(const Pose& pose, const Vec3& extents, double scale) {
  const auto c = box_corners(pose, extents, scale);
  // Corner index bit layout from box_corners: x-sign*4 + y-sign*2 + z-sign.
  static const int faces[6][4] = {{0, 1, 3, 2}, {4, 6, 7, 5}, {0, 4, 5, 1},
                                  {2, 3, 7, 6}, {0, 2, 6, 4}, {1, 5, 7, 3}};
  ConvexPoly poly;
  for (const auto& f : faces)
    poly.faces.push_back({c[f[0]], c[f[1]], c[f[2]], c[f[3]]});
  return poly;
}

ConvexPoly clip_by_plane(const ConvexPoly& poly, const Vec3& n, double d) {
  ConvexPoly out;
  std::vector<Vec3> boundary;
  for (const auto& face : poly.faces) {
    std::vector<Vec3> kept;
    const size_t m = face.size();
    for (size_t i = 0; i < m; ++i) {
      const Vec3& a = face[i];
      const Vec3& b = face[(i + 1) % m];
      const double da = n.dot(a) - d;
      const double db = n.dot(b) - d;
      if (da <= kPlaneEps) kept.push_back(a);
      if ((da < -kPlaneEps && db > kPlaneEps) ||
          (da > kPlaneEps && db < -kPlaneEps)) {
        const Vec3 p = a + (da / (da - db)) * (b - a);
        kept.push_back(p);
        boundary.push_back(p);
      }
    }
    if (kept.size() >= 3) out.faces.push_back(std::move(kept));
  }
  // Rebuild the cap polygon from the collected crossing points.
  if (boundary.size() >= 3) {
    std::vector<Vec3> cap;
    for (const auto& p : boundary) {
      bool dup = false;
      for (const auto& q : cap)
        if ((p - q).squaredNorm() < 1e-18) dup = true;
      if (!dup) cap.push_back(p);
    }
    if (cap.size() >= 3) {
      Vec3 centroid = Vec3::Zero();
      for (const auto& p : cap) centroid += p;
      centroid /= double(cap.size());
      const Vec3 u = (cap[0] - centroid).normalized();
      const Vec3 v = n.normalized().cross(u);
      std::sort(cap.begin(), cap.end(), [&](const Vec3& a, const Vec3& b) {
        return std::atan2(v.dot(a - centroid), u.dot(a - centroid)) <
               std::atan2(v.dot(b - centroid), u.dot(b - centroid));
      });
      out.faces.push_back(std::move(cap));
    }
  }
  return out;
}

double polyhedron_volume(const ConvexPoly& poly) {
  if (poly.empty()) return 0;
  Vec3 centroid = Vec3::Zero();
  int n = 0;
  for (const auto& f : poly.faces)
    for (const auto& p : f) {
      centroid += p;
      ++n;
    }
  centroid /= double(n);

  double vol = 0;
  for (const auto& f : poly.faces) {
    Vec3 fc = Vec3::Zero();
    for (const auto& p : f) fc += p;
    fc /= double(f.size());
    const bool outward = newell_normal(f).dot(fc - centroid) >= 0;
    for (size_t i = 1; i + 1 < f.size(); ++i) {
      double v6 = f[0].dot(f[i].cross(f[i + 1]));
      vol += outward ? v6 : -v6;
    }
  }
  return std::abs(vol) / 6.0;
}

double iou3d(const Pose& pose_gt, const Pose& pose_pred, const Vec3& extents,
             double scale) {
  const double vol_box = 8.0 * std::pow(scale, 3) * extents.prod();
  ConvexPoly inter = box_polyhedron(pose_pred, extents, scale);
  for (int axis = 0; axis < 3 && !inter.empty(); ++axis) {
    const Vec3 u = pose_gt.R.col(axis);
    const double c = u.dot(pose_gt.t);
    const double e = scale * extents[axis];
    inter = clip_by_plane(inter, u, c + e);
    if (!inter.empty()) inter = clip_by_plane(inter, -u, -(c - e));
  }
  const double vi = std::min(polyhedron_volume(inter), vol_box);
  const double vu = 2.0 * vol_box - vi;
  return vu > 0 ? vi / vu : 0.0;
}

GTScore gt_score(int class_id, const Pose& pose_gt, const Pose& pose_pred,
                 const ObjectModel& model, double scale, int n_classes) {
  GTScore out;
  out.scores = Eigen::VectorXd::Zero(n_classes);
  out.scores[class_id] = iou3d(pose_gt, pose_pred, model.extents, scale);
  return out;
}

double add_error(const ObjectModel& model, const Pose& pose_gt,
                 const Pose& pose_pred) {
  double sum = 0;
  for (const auto& x : model.points)
    sum += ((pose_pred.R * x + pose_pred.t) - (pose_gt.R * x + pose_gt.t))
               .norm();
  return sum / double(model.points.size());
}

double adds_error(const ObjectModel& model, const Pose& pose_gt,
                  const Pose& pose_pred) {
  const size_t n = model.points.size();
  std::vector<Vec3> gtp(n), prp(n);
  for (size_t i = 0; i < n; ++i) {
    gtp[i] = pose_gt.R * model.points[i] + pose_gt.t;
    prp[i] = pose_pred.R * model.points[i] + pose_pred.t;
  }
  double sum = 0;
  for (size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < n; ++j)
      best = std::min(best, (prp[i] - gtp[j]).squaredNorm());
    sum += std::sqrt(best);
  }
  return sum / double(n);
}

double recall_add(const std::vector<double>& errors,
                  const std::vector<double>& diameters,
                  double threshold_frac) {
  if (errors.empty() || errors.size() != diameters.size())
    throw EmptyInput("recall_add: empty or mismatched inputs");
  int hits = 0;
  for (size_t i = 0; i < errors.size(); ++i)
    if (errors[i] < threshold_frac * diameters[i]) ++hits;
  return double(hits) / double(errors.size());
}

double auc_add(const std::vector<double>& errors, double max_threshold) {
  if (errors.empty()) throw EmptyInput("auc_add: empty input");
  // recall(t) is a step function; its exact integral over [0, T] is
  // sum_i max(0, T - e_i) / (N * T).
  double area = 0;
  for (double e : errors) area += std::max(0.0, max_threshold - e);
  return area / (double(errors.size()) * max_threshold);
}

namespace {
std::vector<double> average_ranks(const std::vector<double>& v) {
  const size_t n = v.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * double(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

double spearman_rho(const std::vector<double>& a,
                    const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw EmptyInput("spearman_rho: need two equal-length lists, size >= 2");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va <= 0 || vb <= 0)
    throw DegenerateInput("spearman_rho: constant input list");
  return cov / std::sqrt(va * vb);
}

}  // namespace pvit6d
