#pragma once

#include <Eigen/Dense>

#include "pvit6d/errors.hpp"

namespace pvit6d {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
};

// First two columns of a rotation matrix; decodable whenever r1 is nonzero
// and r1, r2 are not parallel.
struct Rotation6D {
  Vec3 r1, r2;
};

struct BBox {
  double ox = 0, oy = 0;  // center, px
  double w = 0, h = 0;
  double size() const { return std::max(w, h); }
};

enum class TransVariant { ABS_Z, SITP, SIZP };

struct TranslationCode {
  double gx = 0, gy = 0, gz = 0;
  TransVariant variant = TransVariant::SITP;
};

// Egocentric rigid transform in camera coordinates, +z forward, meters.
struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3(0, 0, 1);
};

constexpr double kDegenEps = 1e-8;

// Gram-Schmidt decode of the 6D rotation representation.
Mat3 r6d_to_matrix(const Rotation6D& code);
Rotation6D matrix_to_r6d(const Mat3& r);

// Allocentric rotation relative to the camera-to-object ray. The correction
// is the minimal rotation taking (0,0,1) onto t/|t|, applied as
// R_allo = R_corr^T * R_ego.
Mat3 ego_to_allo(const Mat3& r_ego, const Vec3& t);
Mat3 allo_to_ego(const Mat3& r_allo, const Vec3& t);
Mat3 ray_correction(const Vec3& t);  // R_corr above

Vec3 backproject(double cx_img, double cy_img, double tz,
                 const CameraIntrinsics& k);
// Perspective projection of a camera-frame point to pixel coordinates.
Eigen::Vector2d project(const Vec3& p, const CameraIntrinsics& k);

// Focal length along the s = max(w, h) direction, used by SIZP.
double focal_along_s(const BBox& bbox, const CameraIntrinsics& k);

TranslationCode encode_translation(const Eigen::Vector2d& centroid, double tz,
                                   const BBox& bbox, double s_inp,
                                   const CameraIntrinsics& k, double diameter,
                                   TransVariant variant);
Vec3 decode_translation(const TranslationCode& code, const BBox& bbox,
                        double s_inp, const CameraIntrinsics& k,
                        double diameter);

bool is_rotation_matrix(const Mat3& r, double tol = 1e-6);

}  // namespace pvit6d
