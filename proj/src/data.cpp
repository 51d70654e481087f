#include "pvit6d/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace pvit6d {

std::vector<Vec3> box_surface_points(const Vec3& extents, int per_edge) {
  std::vector<Vec3> pts;
  pts.reserve(size_t(per_edge) * per_edge * 6);
  for (int axis = 0; axis < 3; ++axis)
    for (int sign = -1; sign <= 1; sign += 2)
      for (int i = 0; i < per_edge; ++i)
        for (int j = 0; j < per_edge; ++j) {
          const double u = (i + 0.5) / per_edge * 2.0 - 1.0;
          const double v = (j + 0.5) / per_edge * 2.0 - 1.0;
          Vec3 p;
          p[axis] = sign * extents[axis];
          p[(axis + 1) % 3] = u * extents[(axis + 1) % 3];
          p[(axis + 2) % 3] = v * extents[(axis + 2) % 3];
          pts.push_back(p);
        }
  return pts;
}

std::vector<ObjectSpec> make_default_library(int n_classes) {
  if (n_classes < 1) throw ConfigInvalid("library needs at least one class");
  const Vec3 palette[6] = {{0.85, 0.25, 0.20}, {0.20, 0.65, 0.85},
                           {0.30, 0.80, 0.30}, {0.85, 0.75, 0.20},
                           {0.70, 0.30, 0.80}, {0.90, 0.55, 0.25}};
  std::vector<ObjectSpec> lib;
  for (int c = 0; c < n_classes; ++c) {
    ObjectSpec s;
    // Distinct, non-degenerate extents per class; x != y keeps the
    // two-fold class geometrically (not four-fold) symmetric.
    const double k = 1.0 + 0.12 * (c % 5);
    s.model.extents = Vec3(0.050 * k, 0.034 * k, 0.022 * k);
    s.model.class_id = c;
    s.model.points = box_surface_points(s.model.extents);
    s.model.diameter = 2.0 * s.model.extents.norm();
    s.base_color = palette[c % 6];
    s.two_fold_symmetric = (c % 3 == 1);
    if (s.two_fold_symmetric) {
      Mat3 rz = Mat3::Identity();
      rz(0, 0) = rz(1, 1) = -1.0;  // 180 degrees about local z
      s.model.symmetries.push_back(rz);
    }
    lib.push_back(std::move(s));
  }
  return lib;
}

namespace {

// Entry face of a ray into an axis-aligned box in the object frame.
// Returns the hit distance or a negative value on miss.
double ray_box(const Vec3& o, const Vec3& d, const Vec3& e, int* face) {
  double tmin = -1e30, tmax = 1e30;
  int axis = 0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-12) {
      if (std::abs(o[a]) > e[a]) return -1.0;
      continue;
    }
    double t0 = (-e[a] - o[a]) / d[a];
    double t1 = (e[a] - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > tmin) {
      tmin = t0;
      axis = a;
    }
    tmax = std::min(tmax, t1);
  }
  if (tmax < std::max(tmin, 0.0)) return -1.0;
  if (tmin < 0.0) return -1.0;  // camera inside the box: treat as miss
  *face = axis * 2 + (d[axis] < 0.0 ? 0 : 1);  // 0: +axis side, 1: -axis
  return tmin;
}

Vec3 face_tint(const ObjectSpec& spec, int face) {
  // Six clearly separated tints; the symmetric class shares tints across
  // the +-x and +-y face pairs so a 180-degree z-turn is invisible.
  static const Vec3 tints[6] = {{1.0, 0.9, 0.3}, {0.3, 0.9, 1.0},
                                {0.9, 0.3, 1.0}, {0.4, 1.0, 0.4},
                                {1.0, 0.45, 0.45}, {0.5, 0.5, 1.0}};
  int idx = face;
  if (spec.two_fold_symmetric && face < 4) idx = (face / 2) * 2;
  return tints[idx];
}

Vec3 shade_hit(const ObjectSpec& spec, const Mat3& r, const Vec3& local,
               int face) {
  Vec3 color = 0.45 * spec.base_color + 0.55 * face_tint(spec, face);
  if (!spec.two_fold_symmetric) {
    // Checker on the face plane breaks residual pose ambiguities.
    const int axis = face / 2;
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    const double u = local[a1] / spec.model.extents[a1];
    const double v = local[a2] / spec.model.extents[a2];
    const int cu = int(std::floor((u + 1.0) * 1.5));
    const int cv = int(std::floor((v + 1.0) * 1.5));
    if ((cu + cv) % 2 == 0) color *= 0.55;
  }
  Vec3 n_local = Vec3::Zero();
  n_local[face / 2] = (face % 2 == 0) ? 1.0 : -1.0;
  const Vec3 n_cam = r * n_local;
  const Vec3 light = Vec3(0.3, -0.5, -0.8).normalized();
  const double lambert = std::max(0.0, -n_cam.dot(light));
  return color * (0.55 + 0.45 * lambert);
}

}  // namespace

Image render_scene(const std::vector<ObjectSpec>& library,
                   const std::vector<GtObject>& objects,
                   const CameraIntrinsics& k, int h, int w,
                   std::vector<int>* hit_index) {
  Image img(h, w);
  if (hit_index) hit_index->assign(size_t(h) * w, -1);
  struct Prepared {
    Mat3 rt;
    Vec3 o_local;
    const ObjectSpec* spec;
    const Mat3* r;
  };
  std::vector<Prepared> prep;
  for (const auto& obj : objects) {
    if (obj.class_id < 0 || obj.class_id >= int(library.size()))
      throw UnknownClass("render_scene: class " +
                         std::to_string(obj.class_id));
    Prepared p;
    p.spec = &library[size_t(obj.class_id)];
    p.r = &obj.pose.R;
    p.rt = obj.pose.R.transpose();
    p.o_local = -(p.rt * obj.pose.t);
    prep.push_back(p);
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Vec3 dir((x + 0.5 - k.cx) / k.fx, (y + 0.5 - k.cy) / k.fy, 1.0);
      double best_t = 1e30;
      int best_obj = -1, best_face = 0;
      Vec3 best_local = Vec3::Zero();
      for (size_t oi = 0; oi < prep.size(); ++oi) {
        const Vec3 d_local = prep[oi].rt * dir;
        int face = 0;
        const double t =
            ray_box(prep[oi].o_local, d_local, prep[oi].spec->model.extents,
                    &face);
        if (t > 0.0 && t < best_t) {
          best_t = t;
          best_obj = int(oi);
          best_face = face;
          best_local = prep[oi].o_local + t * d_local;
        }
      }
      if (best_obj >= 0) {
        const Vec3 c = shade_hit(*prep[size_t(best_obj)].spec,
                                 *prep[size_t(best_obj)].r, best_local,
                                 best_face);
        img.set(y, x, c[0], c[1], c[2]);
        if (hit_index) (*hit_index)[size_t(y) * w + x] = best_obj;
      } else {
        // Mild deterministic gradient so the background is not flat zero.
        const double g = 0.07 + 0.06 * double(y) / h + 0.03 * double(x) / w;
        img.set(y, x, g, g, g * 1.15);
      }
    }
  return img;
}

std::vector<SceneSample> generate_synthetic_dataset(
    const GenConfig& cfg, const std::vector<ObjectSpec>& library,
    std::uint64_t seed) {
  if (library.empty()) throw ConfigInvalid("empty object library");
  if (cfg.n_objects_min < 1 || cfg.n_objects_max < cfg.n_objects_min)
    throw ConfigInvalid("bad n_objects range");
  std::vector<SceneSample> scenes;
  const Rng base(seed);
  const int sz = cfg.image_size;
  for (int si = 0; si < cfg.n_scenes; ++si) {
    Rng rng = base.fork(uint64_t(si));
    const int n_obj =
        cfg.n_objects_min +
        rng.uniform_int(cfg.n_objects_max - cfg.n_objects_min + 1);
    std::vector<GtObject> objs;
    for (int i = 0; i < n_obj; ++i) {
      GtObject o;
      o.class_id = rng.uniform_int(int(library.size()));
      o.pose.R = rng.haar_rotation();
      const double px = rng.uniform(cfg.center_margin * sz,
                                    (1.0 - cfg.center_margin) * sz);
      const double py = rng.uniform(cfg.center_margin * sz,
                                    (1.0 - cfg.center_margin) * sz);
      const double tz = rng.uniform(cfg.z_min, cfg.z_max);
      o.pose.t = backproject(px, py, tz, cfg.K);
      objs.push_back(o);
    }
    // Render far-to-near so identical hits are impossible to misorder; the
    // raycaster resolves depth exactly anyway, ordering is only for ties.
    std::vector<int> hits;
    SceneSample scene;
    scene.K = cfg.K;
    scene.image = render_scene(library, objs, cfg.K, sz, sz, &hits);
    std::vector<int> count(objs.size(), 0);
    std::vector<int> x0(objs.size(), sz), x1(objs.size(), -1);
    std::vector<int> y0(objs.size(), sz), y1(objs.size(), -1);
    for (int y = 0; y < sz; ++y)
      for (int x = 0; x < sz; ++x) {
        const int o = hits[size_t(y) * sz + x];
        if (o < 0) continue;
        ++count[size_t(o)];
        x0[size_t(o)] = std::min(x0[size_t(o)], x);
        x1[size_t(o)] = std::max(x1[size_t(o)], x);
        y0[size_t(o)] = std::min(y0[size_t(o)], y);
        y1[size_t(o)] = std::max(y1[size_t(o)], y);
      }
    for (size_t oi = 0; oi < objs.size(); ++oi) {
      if (count[oi] < cfg.min_visible_px) continue;
      Detection det;
      det.bbox.w = x1[oi] - x0[oi] + 1;
      det.bbox.h = y1[oi] - y0[oi] + 1;
      det.bbox.ox = 0.5 * (x0[oi] + x1[oi] + 1);
      det.bbox.oy = 0.5 * (y0[oi] + y1[oi] + 1);
      det.class_id = objs[oi].class_id;
      det.det_score =
          std::min(1.0, count[oi] / std::max(1.0, det.bbox.w * det.bbox.h));
      scene.detections.push_back(det);
      scene.gt.push_back(objs[oi]);
    }
    scenes.push_back(std::move(scene));
  }
  return scenes;
}

Image crop_roi(const Image& img, const BBox& bbox, const RoiConfig& cfg) {
  if (bbox.w < 2.0 || bbox.h < 2.0)
    throw DegenerateBBox("crop_roi: bbox smaller than 2 px");
  const double side = cfg.scale_factor * bbox.size();
  const int s = cfg.s_inp;
  if (cfg.mode == RoiMode::SQUARE_CROP)
    return resize_region(img, bbox.oy - side / 2, bbox.ox - side / 2,
                         bbox.oy + side / 2, bbox.ox + side / 2, s, s);
  // CROP_AND_PAD: the scaled rectangle lands centered in the square
  // output; the remainder stays zero.
  Image out(s, s);
  const int iw = std::max(1, int(std::lround(s * bbox.w / bbox.size())));
  const int ih = std::max(1, int(std::lround(s * bbox.h / bbox.size())));
  Image inner = resize_region(
      img, bbox.oy - cfg.scale_factor * bbox.h / 2,
      bbox.ox - cfg.scale_factor * bbox.w / 2,
      bbox.oy + cfg.scale_factor * bbox.h / 2,
      bbox.ox + cfg.scale_factor * bbox.w / 2, ih, iw);
  const int yoff = (s - ih) / 2, xoff = (s - iw) / 2;
  for (int y = 0; y < ih; ++y)
    for (int x = 0; x < iw; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(y + yoff, x + xoff, c) = inner.at(y, x, c);
  return out;
}

const ObjectModel& model_for_class(const std::vector<ObjectModel>& models,
                                   int class_id) {
  for (const auto& m : models)
    if (m.class_id == class_id) return m;
  throw UnknownClass("no model for class " + std::to_string(class_id));
}

RoISample extract_roi(const SceneSample& scene, const Detection& det,
                      const RoiConfig& cfg,
                      const std::vector<ObjectModel>& models, int gt_index) {
  RoISample s;
  s.roi = crop_roi(scene.image, det.bbox, cfg);
  s.bbox_used = det.bbox;
  s.class_input = det.class_id;
  s.K = scene.K;
  s.img_w = scene.image.w;
  s.img_h = scene.image.h;
  if (gt_index < 0) {
    double best = 1e30;
    for (size_t i = 0; i < scene.gt.size(); ++i) {
      if (scene.gt[i].class_id != det.class_id) continue;
      const Eigen::Vector2d c = project(scene.gt[i].pose.t, scene.K);
      const double d2 = (c - Eigen::Vector2d(det.bbox.ox, det.bbox.oy))
                            .squaredNorm();
      if (d2 < best) {
        best = d2;
        gt_index = int(i);
      }
    }
  }
  if (gt_index < 0 || gt_index >= int(scene.gt.size())) return s;
  const GtObject& gt = scene.gt[size_t(gt_index)];
  s.gt_index = gt_index;
  s.class_gt = gt.class_id;
  s.gt_pose = gt.pose;
  s.has_target = true;
  const double diameter = model_for_class(models, gt.class_id).diameter;
  const Eigen::Vector2d centroid = project(gt.pose.t, scene.K);
  s.target_tcode =
      encode_translation(centroid, gt.pose.t.z(), det.bbox, cfg.s_inp,
                         scene.K, diameter, cfg.variant);
  s.target_r6d = matrix_to_r6d(ego_to_allo(gt.pose.R, gt.pose.t));
  return s;
}

namespace {

void rgb_to_hsv(double r, double g, double b, double* h, double* s,
                double* v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  *v = mx;
  const double d = mx - mn;
  *s = mx > 0 ? d / mx : 0.0;
  if (d <= 0) {
    *h = 0;
    return;
  }
  if (mx == r)
    *h = std::fmod((g - b) / d, 6.0);
  else if (mx == g)
    *h = (b - r) / d + 2.0;
  else
    *h = (r - g) / d + 4.0;
  *h /= 6.0;
  if (*h < 0) *h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double* r, double* g,
                double* b) {
  const double hh = std::fmod(h, 1.0) * 6.0;
  const int i = int(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: *r = v; *g = t; *b = p; break;
    case 1: *r = q; *g = v; *b = p; break;
    case 2: *r = p; *g = v; *b = t; break;
    case 3: *r = p; *g = q; *b = v; break;
    case 4: *r = t; *g = p; *b = v; break;
    default: *r = v; *g = p; *b = q; break;
  }
}

}  // namespace

void photometric_jitter(Image& img, Rng& rng, const AugmentConfig& cfg) {
  const double bright = rng.uniform(-cfg.brightness, cfg.brightness);
  const double contrast = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast);
  const double sat = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation);
  const double hue = rng.uniform(-cfg.hue, cfg.hue);
  for (auto& v : img.px) v = (v - 0.5) * contrast + 0.5 + bright;
  if (cfg.saturation > 0 || cfg.hue > 0) {
    for (size_t i = 0; i < img.px.size(); i += 3) {
      double h, s, v;
      rgb_to_hsv(std::clamp(img.px[i], 0.0, 1.0),
                 std::clamp(img.px[i + 1], 0.0, 1.0),
                 std::clamp(img.px[i + 2], 0.0, 1.0), &h, &s, &v);
      h = std::fmod(h + hue + 1.0, 1.0);
      s = std::clamp(s * sat, 0.0, 1.0);
      hsv_to_rgb(h, s, v, &img.px[i], &img.px[i + 1], &img.px[i + 2]);
    }
  }
  if (cfg.noise > 0)
    for (auto& v : img.px) v += rng.normal(0.0, cfg.noise);
  if (cfg.dropout_prob > 0 && rng.uniform() < cfg.dropout_prob) {
    const int n = 1 + rng.uniform_int(std::max(1, cfg.dropout_max_patches));
    for (int i = 0; i < n; ++i) {
      const int side = std::max(
          1, int(rng.uniform(0.05, cfg.dropout_max_frac) * img.w));
      const int px = rng.uniform_int(std::max(1, img.w - side));
      const int py = rng.uniform_int(std::max(1, img.h - side));
      const double fill = rng.uniform();
      for (int y = py; y < py + side; ++y)
        for (int x = px; x < px + side; ++x) img.set(y, x, fill, fill, fill);
    }
  }
  img.clamp01();
}

RoISample augment(const SceneSample& scene, int gt_index, Rng& rng,
                  const AugmentConfig& acfg, const RoiConfig& rcfg,
                  const std::vector<ObjectModel>& models) {
  if (gt_index < 0 || gt_index >= int(scene.gt.size()))
    throw EmptyInput("augment: bad gt index");
  Detection det = scene.detections[size_t(gt_index)];
  const double s = det.bbox.size();
  det.bbox.w *= 1.0 + rng.uniform(-acfg.scale_jitter, acfg.scale_jitter);
  det.bbox.h *= 1.0 + rng.uniform(-acfg.scale_jitter, acfg.scale_jitter);
  det.bbox.ox += rng.uniform(-acfg.shift_jitter, acfg.shift_jitter) * s;
  det.bbox.oy += rng.uniform(-acfg.shift_jitter, acfg.shift_jitter) * s;
  RoISample out = extract_roi(scene, det, rcfg, models, gt_index);
  photometric_jitter(out.roi, rng, acfg);
  return out;
}

void inject_denoising(std::vector<RoISample>& batch,
                      const std::vector<SceneSample>& scenes,
                      const std::vector<ObjectSpec>& library, Rng& rng,
                      double p_flip, double p_remove, const RoiConfig& cfg) {
  if (p_flip < 0 || p_remove < 0 || p_flip + p_remove > 1.0)
    throw ConfigInvalid("inject_denoising: p_flip + p_remove must be <= 1");
  const int n_classes = int(library.size());
  for (auto& s : batch) {
    if (!s.has_target || s.is_injected_negative) continue;
    const double u = rng.uniform();
    if (u < p_flip) {
      if (n_classes < 2) continue;
      int c = rng.uniform_int(n_classes - 1);
      if (c >= s.class_input) ++c;
      s.class_input = c;
      s.is_injected_negative = true;  // wrong class: score target all-zero
    } else if (u < p_flip + p_remove) {
      if (s.scene_index < 0 || s.gt_index < 0) continue;
      const SceneSample& scene = scenes[size_t(s.scene_index)];
      std::vector<GtObject> rest;
      for (size_t i = 0; i < scene.gt.size(); ++i)
        if (int(i) != s.gt_index) rest.push_back(scene.gt[i]);
      const Image bg = render_scene(library, rest, scene.K, scene.image.h,
                                    scene.image.w);
      s.roi = crop_roi(bg, s.bbox_used, cfg);
      s.is_injected_negative = true;
      s.pose_loss_masked = true;
    }
  }
}

std::vector<RoISample> make_roi_dataset(const std::vector<SceneSample>& scenes,
                                        const RoiConfig& cfg,
                                        const std::vector<ObjectModel>& models) {
  std::vector<RoISample> out;
  for (size_t si = 0; si < scenes.size(); ++si)
    for (size_t di = 0; di < scenes[si].detections.size(); ++di) {
      RoISample s = extract_roi(scenes[si], scenes[si].detections[di], cfg,
                                models, int(di));
      s.scene_index = int(si);
      out.push_back(std::move(s));
    }
  return out;
}

namespace {

std::string scene_image_name(size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%06zu.png", i);
  return buf;
}

}  // namespace

void save_dataset(const std::string& dir,
                  const std::vector<SceneSample>& scenes) {
  fs::create_directories(dir);
  std::ofstream ann(fs::path(dir) / "annotations.jsonl");
  if (!ann) throw FormatError("save_dataset: cannot write " + dir);
  std::uint64_t hash = 1469598103934665603ULL;
  for (size_t i = 0; i < scenes.size(); ++i) {
    const auto& sc = scenes[i];
    write_png((fs::path(dir) / scene_image_name(i)).string(), sc.image);
    json objs = json::array();
    for (size_t j = 0; j < sc.gt.size(); ++j) {
      const auto& g = sc.gt[j];
      const auto& d = sc.detections[j];
      std::vector<double> r(9);
      Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(r.data()) =
          g.pose.R;
      objs.push_back(json{
          {"class", g.class_id},
          {"R", r},
          {"t", {g.pose.t.x(), g.pose.t.y(), g.pose.t.z()}},
          {"bbox", {d.bbox.ox, d.bbox.oy, d.bbox.w, d.bbox.h}},
          {"det_score", d.det_score}});
    }
    json rec{{"scene", i},
             {"image", scene_image_name(i)},
             {"K", {{"fx", sc.K.fx}, {"fy", sc.K.fy}, {"cx", sc.K.cx},
                    {"cy", sc.K.cy}}},
             {"objects", std::move(objs)}};
    const std::string line = rec.dump();
    for (unsigned char ch : line) {
      hash ^= ch;
      hash *= 1099511628211ULL;
    }
    ann << line << "\n";
  }
  std::ofstream man(fs::path(dir) / "manifest.json");
  char hex[24];
  std::snprintf(hex, sizeof hex, "%016llx",
                static_cast<unsigned long long>(hash));
  man << json{{"n_scenes", scenes.size()}, {"annotations_fnv1a", hex}}.dump(2)
      << "\n";
}

std::vector<SceneSample> load_dataset(const std::string& dir) {
  std::ifstream ann(fs::path(dir) / "annotations.jsonl");
  if (!ann)
    throw FormatError("load_dataset: missing " +
                      (fs::path(dir) / "annotations.jsonl").string());
  std::vector<SceneSample> scenes;
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("load_dataset: bad annotation line: " +
                        std::string(e.what()));
    }
    SceneSample sc;
    sc.K.fx = rec.at("K").at("fx");
    sc.K.fy = rec.at("K").at("fy");
    sc.K.cx = rec.at("K").at("cx");
    sc.K.cy = rec.at("K").at("cy");
    sc.image =
        read_png((fs::path(dir) / rec.at("image").get<std::string>()).string());
    for (const auto& o : rec.at("objects")) {
      GtObject g;
      g.class_id = o.at("class");
      const auto r = o.at("R").get<std::vector<double>>();
      g.pose.R = Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(
          r.data());
      const auto t = o.at("t").get<std::vector<double>>();
      g.pose.t = Vec3(t[0], t[1], t[2]);
      Detection d;
      const auto bb = o.at("bbox").get<std::vector<double>>();
      d.bbox = BBox{bb[0], bb[1], bb[2], bb[3]};
      d.class_id = g.class_id;
      d.det_score = o.value("det_score", 1.0);
      sc.gt.push_back(g);
      sc.detections.push_back(d);
    }
    scenes.push_back(std::move(sc));
  }
  return scenes;
}

namespace {

json load_json_file(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw FormatError("missing file: " + p.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

double field_num(const json& j, const char* field, const fs::path& p) {
  if (!j.contains(field))
    throw FormatError(p.string() + ": missing field " + field);
  return j.at(field).get<double>();
}

}  // namespace

std::vector<ObjectModel> load_bop_models_info(const std::string& path) {
  const fs::path p(path);
  const json info = load_json_file(p);
  std::vector<ObjectModel> models;
  for (const auto& [key, entry] : info.items()) {
    ObjectModel m;
    m.class_id = std::stoi(key) - 1;  // BOP object ids are 1-based
    m.diameter = field_num(entry, "diameter", p) / 1000.0;
    m.extents = Vec3(field_num(entry, "size_x", p), field_num(entry, "size_y", p),
                     field_num(entry, "size_z", p)) /
                2000.0;
    m.points = box_surface_points(m.extents);
    if (entry.contains("symmetries_discrete"))
      for (const auto& sym : entry["symmetries_discrete"]) {
        const auto v = sym.get<std::vector<double>>();
        if (v.size() != 16)
          throw FormatError(p.string() + ": symmetries_discrete not 4x4");
        Mat3 r;
        r << v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10];
        m.symmetries.push_back(r);
      }
    if (entry.contains("symmetries_continuous"))
      for (const auto& sym : entry["symmetries_continuous"]) {
        const auto ax = sym.at("axis").get<std::vector<double>>();
        const Vec3 axis = Vec3(ax[0], ax[1], ax[2]).normalized();
        for (int k = 1; k < 36; ++k)
          m.symmetries.push_back(
              Eigen::AngleAxisd(2.0 * M_PI * k / 36.0, axis)
                  .toRotationMatrix());
      }
    models.push_back(std::move(m));
  }
  std::sort(models.begin(), models.end(),
            [](const ObjectModel& a, const ObjectModel& b) {
              return a.class_id < b.class_id;
            });
  return models;
}

std::vector<SceneSample> load_bop_annotations(const std::string& root_dir) {
  const fs::path root(root_dir);
  const auto models = load_bop_models_info((root / "models_info.json").string());
  std::vector<fs::path> scene_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "scene_gt.json"))
      scene_dirs.push_back(e.path());
  std::sort(scene_dirs.begin(), scene_dirs.end());
  if (scene_dirs.empty())
    throw FormatError("load_bop_annotations: no scene directories under " +
                      root_dir);
  std::vector<SceneSample> out;
  for (const auto& sd : scene_dirs) {
    const json gt = load_json_file(sd / "scene_gt.json");
    const fs::path cam_path = sd / "scene_camera.json";
    const json cams = load_json_file(cam_path);
    std::vector<std::pair<long, const json*>> frames;
    for (const auto& [key, val] : gt.items())
      frames.emplace_back(std::stol(key), &val);
    std::sort(frames.begin(), frames.end());
    for (const auto& [frame, objects] : frames) {
      const std::string key = std::to_string(frame);
      if (!cams.contains(key))
        throw FormatError(cam_path.string() + ": missing frame " + key);
      SceneSample sc;
      const auto kk = cams.at(key).at("cam_K").get<std::vector<double>>();
      if (kk.size() != 9)
        throw FormatError(cam_path.string() + ": cam_K not 3x3");
      sc.K = CameraIntrinsics{kk[0], kk[4], kk[2], kk[5]};
      char img_name[32];
      std::snprintf(img_name, sizeof img_name, "%06ld.png", frame);
      sc.image = read_png((sd / "rgb" / img_name).string());
      for (const auto& o : *objects) {
        GtObject g;
        if (!o.contains("obj_id"))
          throw FormatError((sd / "scene_gt.json").string() +
                            ": missing obj_id");
        g.class_id = o.at("obj_id").get<int>() - 1;
        const auto r = o.at("cam_R_m2c").get<std::vector<double>>();
        g.pose.R = Eigen::Map<const Eigen::Matrix<double, 3, 3,
                                                  Eigen::RowMajor>>(r.data());
        const auto t = o.at("cam_t_m2c").get<std::vector<double>>();
        g.pose.t = Vec3(t[0], t[1], t[2]) / 1000.0;
        // Amodal detection box from the projected corners of the model box.
        const auto& m = model_for_class(models, g.class_id);
        double xmin = 1e30, xmax = -1e30, ymin = 1e30, ymax = -1e30;
        for (const auto& c : box_corners(g.pose, m.extents, 1.0)) {
          const Eigen::Vector2d px = project(c, sc.K);
          xmin = std::min(xmin, px.x());
          xmax = std::max(xmax, px.x());
          ymin = std::min(ymin, px.y());
          ymax = std::max(ymax, px.y());
        }
        Detection d;
        d.bbox = BBox{(xmin + xmax) / 2, (ymin + ymax) / 2, xmax - xmin,
                      ymax - ymin};
        d.class_id = g.class_id;
        sc.gt.push_back(g);
        sc.detections.push_back(d);
      }
      out.push_back(std::move(sc));
    }
  }
  return out;
}

}  // namespace pvit6d
