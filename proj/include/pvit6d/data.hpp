#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pvit6d/geometry.hpp"
#include "pvit6d/image.hpp"
#include "pvit6d/pose.hpp"
#include "pvit6d/rng.hpp"

namespace pvit6d {

struct Detection {
  BBox bbox;           // pixels, full image
  int class_id = 0;
  double det_score = 1.0;
};

struct GtObject {
  int class_id = 0;
  Pose pose;
};

struct SceneSample {
  Image image;
  std::vector<Detection> detections;  // detections[i] matches gt[i]
  std::vector<GtObject> gt;
  CameraIntrinsics K;
};

// Renderable object: metric box plus appearance. `two_fold_symmetric`
// classes get the 180-degree-about-z symmetry and an appearance that
// respects it; other classes get distinct per-face colors.
struct ObjectSpec {
  ObjectModel model;
  Vec3 base_color = Vec3(0.8, 0.2, 0.2);
  bool two_fold_symmetric = false;
};

// Uniform grid of surface points on a box with the given half-sizes.
std::vector<Vec3> box_surface_points(const Vec3& extents, int per_edge = 8);

std::vector<ObjectSpec> make_default_library(int n_classes);

struct GenConfig {
  int image_size = 128;
  int n_scenes = 50;
  int n_objects_min = 1, n_objects_max = 3;
  double z_min = 0.35, z_max = 0.70;
  double center_margin = 0.22;  // frustum margin, fraction of image side
  int min_visible_px = 24;
  CameraIntrinsics K{140.0, 140.0, 64.0, 64.0};
};

// Per-pixel raycast against oriented boxes, nearest hit wins.
Image render_scene(const std::vector<ObjectSpec>& library,
                   const std::vector<GtObject>& objects,
                   const CameraIntrinsics& k, int h, int w,
                   std::vector<int>* hit_index = nullptr);

// Deterministic given (cfg, seed); scene i uses substream fork(i). Objects
// with fewer than min_visible_px visible pixels are dropped from gt and
// detections. Detection boxes are tight boxes of the visible pixels.
std::vector<SceneSample> generate_synthetic_dataset(
    const GenConfig& cfg, const std::vector<ObjectSpec>& library,
    std::uint64_t seed);

enum class RoiMode { SQUARE_CROP, CROP_AND_PAD };

struct RoiConfig {
  int s_inp = 64;
  RoiMode mode = RoiMode::SQUARE_CROP;
  double scale_factor = 1.2;
  TransVariant variant = TransVariant::SITP;
};

struct RoISample {
  Image roi;              // s_inp x s_inp, values [0, 1]
  BBox bbox_used;         // pixels, full image
  int class_input = 0;    // conditioning class (flipped for injections)
  int class_gt = -1;      // matched gt class, -1 if unmatched
  bool has_target = false;
  bool pose_loss_masked = false;   // removed-object injections
  bool is_injected_negative = false;
  Rotation6D target_r6d{Vec3::UnitX(), Vec3::UnitY()};  // allocentric
  TranslationCode target_tcode;
  Pose gt_pose;           // metric, egocentric
  CameraIntrinsics K;
  int img_w = 0, img_h = 0;  // full-image dims, for bbox normalization
  int scene_index = -1;
  int gt_index = -1;
};

// Crop per `mode` around `bbox`, zero outside the image, resized to s_inp.
Image crop_roi(const Image& img, const BBox& bbox, const RoiConfig& cfg);

// gt_index < 0 auto-matches the detection to a gt object of the same class
// by projected-center distance; no match leaves the target absent.
RoISample extract_roi(const SceneSample& scene, const Detection& det,
                      const RoiConfig& cfg,
                      const std::vector<ObjectModel>& models,
                      int gt_index = -1);

struct AugmentConfig {
  double scale_jitter = 0.10;  // per-axis, on (w, h)
  double shift_jitter = 0.35;  // of s = max(w, h), per axis
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  double hue = 0.05;           // fraction of a full hue turn
  double noise = 0.02;         // per-pixel jitter sigma
  double dropout_prob = 0.3;   // coarse dropout: chance of any patches
  int dropout_max_patches = 3;
  double dropout_max_frac = 0.25;  // patch side, fraction of roi side

  static AugmentConfig off() {
    AugmentConfig c;
    c.scale_jitter = c.shift_jitter = c.brightness = c.contrast = 0;
    c.saturation = c.hue = c.noise = c.dropout_prob = 0;
    return c;
  }
};

void photometric_jitter(Image& img, Rng& rng, const AugmentConfig& cfg);

// Bbox jitter before the crop (targets re-encoded against the jittered
// box), then photometric jitter on the crop.
RoISample augment(const SceneSample& scene, int gt_index, Rng& rng,
                  const AugmentConfig& acfg, const RoiConfig& rcfg,
                  const std::vector<ObjectModel>& models);

// Training-time false positives: with p_flip the conditioning class is
// replaced by a different one (score target becomes all-zero, pose targets
// kept); with p_remove the roi is re-rendered without the object and pose
// losses are masked.
void inject_denoising(std::vector<RoISample>& batch,
                      const std::vector<SceneSample>& scenes,
                      const std::vector<ObjectSpec>& library, Rng& rng,
                      double p_flip, double p_remove, const RoiConfig& cfg);

// One RoISample per (scene, detection) pair, detections[i] matched gt[i].
std::vector<RoISample> make_roi_dataset(const std::vector<SceneSample>& scenes,
                                        const RoiConfig& cfg,
                                        const std::vector<ObjectModel>& models);

void save_dataset(const std::string& dir,
                  const std::vector<SceneSample>& scenes);
std::vector<SceneSample> load_dataset(const std::string& dir);

// BOP-style ingestion: root holds models_info.json plus one directory per
// scene with scene_gt.json, scene_camera.json and rgb/*.png. Lengths are
// converted mm -> m; continuous symmetries are discretized in 36 steps.
std::vector<ObjectModel> load_bop_models_info(const std::string& path);
std::vector<SceneSample> load_bop_annotations(const std::string& root_dir);

const ObjectModel& model_for_class(const std::vector<ObjectModel>& models,
                                   int class_id);

}  // namespace pvit6d
