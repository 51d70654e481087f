#include "pvit6d/pose.hpp"

#include <cmath>

namespace pvit6d {

Mat3 r6d_to_matrix(const Rotation6D& code) {
  const double n1 = code.r1.norm();
  if (n1 <= kDegenEps)
    throw DegenerateRotation("r6d_to_matrix: |r1| below epsilon");
  const Vec3 e1 = code.r1 / n1;
  const Vec3 w = code.r2 - e1.dot(code.r2) * e1;
  const double n2 = w.norm();
  if (n2 <= kDegenEps)
    throw DegenerateRotation("r6d_to_matrix: r1 and r2 are parallel");
  const Vec3 e2 = w / n2;
  const Vec3 e3 = e1.cross(e2);
  Mat3 r;
  r.col(0) = e1;
  r.col(1) = e2;
  r.col(2) = e3;
  return r;
}

Rotation6D matrix_to_r6d(const Mat3& r) { return {r.col(0), r.col(1)}; }

Mat3 ray_correction(const Vec3& t) {
  const double n = t.norm();
  if (n <= kDegenEps) throw DegenerateRay("ray_correction: zero translation");
  const Vec3 u = t / n;
  const Vec3 z(0, 0, 1);
  const Vec3 axis = z.cross(u);
  const double s = axis.norm();
  const double c = z.dot(u);
  if (c < -1.0 + kDegenEps)
    throw DegenerateRay("ray_correction: ray antiparallel to optical axis");
  if (s <= kDegenEps) return Mat3::Identity();
  // Rodrigues with angle from atan2 for numerical stability near 0.
  const Vec3 a = axis / s;
  const double ang = std::atan2(s, c);
  return Eigen::AngleAxisd(ang, a).toRotationMatrix();
}

Mat3 ego_to_allo(const Mat3& r_ego, const Vec3& t) {
  return ray_correction(t).transpose() * r_ego;
}

Mat3 allo_to_ego(const Mat3& r_allo, const Vec3& t) {
  return ray_correction(t) * r_allo;
}

Vec3 backproject(double cx_img, double cy_img, double tz,
                 const CameraIntrinsics& k) {
  return {tz * (cx_img - k.cx) / k.fx, tz * (cy_img - k.cy) / k.fy, tz};
}

Eigen::Vector2d project(const Vec3& p, const CameraIntrinsics& k) {
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

double focal_along_s(const BBox& bbox, const CameraIntrinsics& k) {
  return bbox.w >= bbox.h ? k.fx : k.fy;
}

TranslationCode encode_translation(const Eigen::Vector2d& centroid, double tz,
                                   const BBox& bbox, double s_inp,
                                   const CameraIntrinsics& k, double diameter,
                                   TransVariant variant) {
  const double s = bbox.size();
  TranslationCode code;
  code.variant = variant;
  code.gx = (centroid.x() - bbox.ox) / s;
  code.gy = (centroid.y() - bbox.oy) / s;
  switch (variant) {
    case TransVariant::ABS_Z:
      code.gz = tz;
      break;
    case TransVariant::SITP:
      code.gz = tz * s / s_inp;  // t_z / r with r = s_inp / s
      break;
    case TransVariant::SIZP:
      if (diameter <= 0.0)
        throw MissingDiameter("encode_translation: SIZP needs class diameter");
      code.gz = tz * s / (focal_along_s(bbox, k) * diameter);
      break;
  }
  return code;
}

Vec3 decode_translation(const TranslationCode& code, const BBox& bbox,
                        double s_inp, const CameraIntrinsics& k,
                        double diameter) {
  const double s = bbox.size();
  const double cx = bbox.ox + code.gx * s;
  const double cy = bbox.oy + code.gy * s;
  double tz = 0;
  switch (code.variant) {
    case TransVariant::ABS_Z:
      tz = code.gz;
      break;
    case TransVariant::SITP:
      tz = code.gz * s_inp / s;
      break;
    case TransVariant::SIZP:
      if (diameter <= 0.0)
        throw MissingDiameter("decode_translation: SIZP needs class diameter");
      tz = code.gz * focal_along_s(bbox, k) * diameter / s;
      break;
  }
  return backproject(cx, cy, tz, k);
}

bool is_rotation_matrix(const Mat3& r, double tol) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
         std::abs(r.determinant() - 1.0) < tol;
}

}  // namespace pvit6d
