#include "pvit6d/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

namespace fs = std::filesystem;
using nlohmann::json;

namespace pvit6d {

using nn::Tensor;
using nn::Var;

void TrainConfig::validate() const {
  if (lr <= 0 || weight_decay < 0 || batch_size < 1 || max_epochs < 1 ||
      warmup_epochs < 0 || early_stop_patience < 1 || grad_clip_norm <= 0)
    throw ConfigInvalid("train config: field out of range");
  if (p_flip < 0 || p_remove < 0 || p_flip + p_remove > 1.0)
    throw ConfigInvalid("train config: p_flip + p_remove must be <= 1");
}

Var rotation_from_r6d(const Var& r6d) {
  if (r6d->val.last_dim() != 6)
    throw ShapeMismatch("rotation_from_r6d: want [B, 6]");
  Var r1 = nn::slice_cols(r6d, 0, 3);
  Var r2 = nn::slice_cols(r6d, 3, 6);
  Var b1 = nn::div_bcast_col(r1, nn::row_norm(r1, 1e-12));
  Var u2 = nn::sub(r2, nn::mul_bcast_col(b1, nn::row_dot(b1, r2)));
  Var b2 = nn::div_bcast_col(u2, nn::row_norm(u2, 1e-12));
  Var b3 = nn::cross_rows(b1, b2);
  std::vector<Var> cols;  // row-major: row i is (b1[i], b2[i], b3[i])
  for (int row = 0; row < 3; ++row)
    for (const Var& b : {b1, b2, b3})
      cols.push_back(nn::slice_cols(b, row, row + 1));
  return nn::concat_cols(cols);
}

Batch make_batch(const std::vector<RoISample>& samples) {
  if (samples.empty()) throw EmptyInput("make_batch: no samples");
  const int b = int(samples.size());
  const int s = samples[0].roi.h;
  Batch out;
  out.input.roi = Tensor({b, s, s, 3});
  for (int i = 0; i < b; ++i) {
    const auto& img = samples[size_t(i)].roi;
    if (img.h != s || img.w != s)
      throw ShapeMismatch("make_batch: mixed roi sizes");
    std::copy(img.px.begin(), img.px.end(),
              out.input.roi.data.data() + int64_t(i) * s * s * 3);
  }
  for (const auto& smp : samples) {
    out.input.class_ids.push_back(smp.class_input);
    const double iw = std::max(1, smp.img_w), ih = std::max(1, smp.img_h);
    out.input.bboxes.push_back({smp.bbox_used.ox / iw, smp.bbox_used.oy / ih,
                                smp.bbox_used.w / iw, smp.bbox_used.h / ih});
  }
  out.samples = samples;
  return out;
}

namespace {

Mat3 mat_from_row(const Tensor& t, int i) {
  Mat3 m;
  const double* p = t.data.data() + int64_t(i) * 9;
  m << p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8];
  return m;
}

}  // namespace

BatchLoss batch_loss(const ForwardResult& out,
                     const std::vector<RoISample>& samples,
                     const std::vector<ObjectModel>& models,
                     const LossWeights& w, double score_box_scale,
                     int s_inp) {
  const int b = int(samples.size());
  if (out.r6d->val.dim(0) != b)
    throw ShapeMismatch("batch_loss: batch size mismatch");
  const int nc = out.class_logits->val.last_dim();

  Tensor pose_mask({b});
  int n_valid = 0;
  for (int i = 0; i < b; ++i) {
    const auto& s = samples[size_t(i)];
    const bool valid = s.has_target && !s.pose_loss_masked;
    pose_mask.data[i] = valid ? 1.0 : 0.0;
    if (valid) {
      if (s.target_tcode.variant != out.trans_variant)
        throw VariantMismatch("batch_loss: translation variant mismatch");
      ++n_valid;
    }
  }
  const double inv_valid = 1.0 / std::max(1, n_valid);

  Tensor tgt_xy({b, 2}), tgt_z({b, 1});
  for (int i = 0; i < b; ++i) {
    tgt_xy.data[2 * i] = samples[size_t(i)].target_tcode.gx;
    tgt_xy.data[2 * i + 1] = samples[size_t(i)].target_tcode.gy;
    tgt_z.data[i] = samples[size_t(i)].target_tcode.gz;
  }
  Var l_center = nn::masked_l1(nn::slice_cols(out.tcode, 0, 2), tgt_xy,
                               pose_mask, inv_valid);
  Var l_z = nn::masked_l1(nn::slice_cols(out.tcode, 2, 3), tgt_z, pose_mask,
                          inv_valid);

  // Rotation: symmetry branch chosen per sample at value level, then an L1
  // on point displacements through the differentiable Gram-Schmidt decode.
  Var pred_r9 = rotation_from_r6d(out.r6d);
  Tensor tgt_r9({b, 9});
  for (int i = 0; i < b; ++i) {
    const auto& s = samples[size_t(i)];
    Mat3 target = Mat3::Identity();
    if (pose_mask.data[i] > 0) {
      const auto& m = model_for_class(models, s.class_gt);
      const Mat3 pred = mat_from_row(pred_r9->val, i);
      double best = 1e300;
      for (const auto& sym : m.symmetries) {
        const Mat3 cand = ego_to_allo(s.gt_pose.R * sym, s.gt_pose.t);
        const double l = loss_rot(pred, cand, m.points);
        if (l < best) {
          best = l;
          target = cand;
        }
      }
    }
    Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(
        tgt_r9.data.data() + int64_t(i) * 9) = target;
  }
  Var diff = nn::reshape(nn::sub(pred_r9, nn::constant(tgt_r9)), {3 * b, 3});
  std::map<int, std::vector<int>> rows_by_class;
  for (int i = 0; i < b; ++i)
    if (pose_mask.data[i] > 0)
      for (int r = 0; r < 3; ++r)
        rows_by_class[samples[size_t(i)].class_gt].push_back(3 * i + r);
  std::vector<Var> rot_terms;
  for (const auto& [cls, rows] : rows_by_class) {
    const auto& pts = model_for_class(models, cls).points;
    Tensor pmat({3, int(pts.size())});
    for (size_t j = 0; j < pts.size(); ++j)
      for (int a = 0; a < 3; ++a)
        pmat.data[int64_t(a) * int64_t(pts.size()) + int64_t(j)] = pts[j][a];
    Var prod = nn::matmul(nn::gather_rows(diff, rows), nn::constant(pmat));
    rot_terms.push_back(nn::masked_l1(prod, Tensor(prod->val.shape), Tensor(),
                                      inv_valid / double(pts.size())));
  }
  Var l_rot = rot_terms.empty() ? nn::constant(Tensor::scalar(0.0))
                                : nn::add_n(rot_terms);

  // Score targets: scaled 3D-IoU of the current predicted pose, one-hot at
  // the true class; all-zero for injected negatives.
  Tensor gt_scores({b, nc});
  for (int i = 0; i < b; ++i) {
    const auto& s = samples[size_t(i)];
    if (!s.has_target || s.is_injected_negative) continue;
    const auto& m = model_for_class(models, s.class_gt);
    double iou = 0.0;
    try {
      const double* tc = out.tcode->val.data.data() + int64_t(i) * 3;
      TranslationCode code{tc[0], tc[1], std::max(tc[2], 1e-6),
                           out.trans_variant};
      Pose pred;
      pred.t = decode_translation(code, s.bbox_used, s_inp, s.K, m.diameter);
      pred.R = allo_to_ego(mat_from_row(pred_r9->val, i), pred.t);
      iou = iou3d(s.gt_pose, pred, m.extents, score_box_scale);
    } catch (const std::runtime_error&) {
      iou = 0.0;  // degenerate early prediction scores zero
    }
    gt_scores.data[int64_t(i) * nc + s.class_gt] =
        std::clamp(iou, 0.0, 1.0);
  }
  Var l_cls = nn::varifocal_ce(out.class_logits, gt_scores, 1.0 / b);

  BatchLoss bl;
  bl.values.center = l_center->val.data[0];
  bl.values.z = l_z->val.data[0];
  bl.values.rot = l_rot->val.data[0];
  bl.values.cls = l_cls->val.data[0];
  bl.total = nn::add_n({nn::scale(l_center, w.lambda_c),
                        nn::scale(l_z, w.lambda_z),
                        nn::scale(l_rot, w.lambda_r),
                        nn::scale(l_cls, w.lambda_cls)});
  return bl;
}

std::vector<PredictionRecord> evaluate(const Model& model,
                                       const std::vector<RoISample>& data,
                                       const std::vector<ObjectModel>& models,
                                       int batch_size) {
  if (data.empty()) throw EmptyDataset("evaluate: no samples");
  std::vector<PredictionRecord> records;
  for (size_t at = 0; at < data.size(); at += size_t(batch_size)) {
    const size_t end = std::min(data.size(), at + size_t(batch_size));
    std::vector<RoISample> chunk(data.begin() + long(at),
                                 data.begin() + long(end));
    Batch batch = make_batch(chunk);
    const ForwardResult out = model.forward(batch.input);
    for (size_t j = 0; j < chunk.size(); ++j) {
      const auto& s = chunk[j];
      if (s.class_gt < 0) continue;
      const Prediction pred = decode_prediction(
          out, int(j), s.class_input, s.bbox_used, s.roi.h, s.K, models);
      const auto& m = model_for_class(models, s.class_gt);
      PredictionRecord r;
      r.scene_index = s.scene_index;
      r.gt_index = s.gt_index;
      r.class_gt = s.class_gt;
      r.class_input = s.class_input;
      r.class_refined = pred.class_refined;
      r.pose_pred = pred.pose;
      r.pose_gt = s.gt_pose;
      r.confidence = pred.confidence;
      r.gt_iou3d = iou3d(s.gt_pose, pred.pose, m.extents, 1.0);
      r.add_err = add_error(m, s.gt_pose, pred.pose);
      r.adds_err = adds_error(m, s.gt_pose, pred.pose);
      r.diameter = m.diameter;
      r.symmetric = m.symmetries.size() > 1;
      r.injected = s.is_injected_negative;
      r.pose_valid = !s.pose_loss_masked;
      records.push_back(r);
    }
  }
  return records;
}

namespace {

double headline_err(const PredictionRecord& r) {
  return r.symmetric ? r.adds_err : r.add_err;
}

}  // namespace

MetricReport metric_report(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw EmptyDataset("metric_report: no records");
  MetricReport rep;
  rep.count = int(records.size());
  std::map<int, std::vector<const PredictionRecord*>> by_class;
  for (const auto& r : records) by_class[r.class_gt].push_back(&r);
  for (const auto& [cls, recs] : by_class) {
    MetricReport::PerClass pc;
    pc.class_id = cls;
    pc.count = int(recs.size());
    std::vector<double> errs, diams;
    double conf = 0;
    for (const auto* r : recs) {
      conf += r->confidence;
      if (!r->pose_valid) continue;
      errs.push_back(headline_err(*r));
      diams.push_back(r->diameter);
    }
    pc.mean_conf = conf / recs.size();
    if (!errs.empty()) {
      pc.recall = recall_add(errs, diams);
      pc.auc = auc_add(errs);
    }
    rep.per_class.push_back(pc);
    rep.mean_recall += pc.recall;
    rep.mean_auc += pc.auc;
    rep.mean_conf += pc.mean_conf;
  }
  const double nc = double(rep.per_class.size());
  rep.mean_recall /= nc;
  rep.mean_auc /= nc;
  rep.mean_conf /= nc;
  std::vector<double> conf, iou;
  for (const auto& r : records) {
    conf.push_back(r.confidence);
    iou.push_back(r.gt_iou3d);
  }
  try {
    rep.spearman = spearman_rho(conf, iou);
  } catch (const DegenerateInput&) {
    rep.spearman = std::nan("");
  }
  return rep;
}

void save_records(const std::string& path,
                  const std::vector<PredictionRecord>& records) {
  std::ofstream os(path);
  if (!os) throw FormatError("save_records: cannot write " + path);
  for (const auto& r : records) {
    std::vector<double> rp(9), rg(9);
    Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(rp.data()) =
        r.pose_pred.R;
    Eigen::Map<Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(rg.data()) =
        r.pose_gt.R;
    os << json{{"scene", r.scene_index},
               {"obj", r.gt_index},
               {"class_gt", r.class_gt},
               {"class_input", r.class_input},
               {"class_refined", r.class_refined},
               {"R_pred", rp},
               {"t_pred", {r.pose_pred.t.x(), r.pose_pred.t.y(),
                           r.pose_pred.t.z()}},
               {"R_gt", rg},
               {"t_gt", {r.pose_gt.t.x(), r.pose_gt.t.y(), r.pose_gt.t.z()}},
               {"confidence", r.confidence},
               {"gt_iou3d", r.gt_iou3d},
               {"add_err", r.add_err},
               {"adds_err", r.adds_err},
               {"diameter", r.diameter},
               {"symmetric", r.symmetric},
               {"injected", r.injected},
               {"pose_valid", r.pose_valid}}
              .dump()
       << "\n";
  }
}

std::vector<PredictionRecord> load_records(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("load_records: cannot open " + path);
  std::vector<PredictionRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw FormatError("load_records: " + std::string(e.what()));
    }
    PredictionRecord r;
    r.scene_index = j.at("scene");
    r.gt_index = j.at("obj");
    r.class_gt = j.at("class_gt");
    r.class_input = j.at("class_input");
    r.class_refined = j.at("class_refined");
    const auto rp = j.at("R_pred").get<std::vector<double>>();
    const auto rg = j.at("R_gt").get<std::vector<double>>();
    r.pose_pred.R =
        Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(
            rp.data());
    r.pose_gt.R =
        Eigen::Map<const Eigen::Matrix<double, 3, 3, Eigen::RowMajor>>(
            rg.data());
    const auto tp = j.at("t_pred").get<std::vector<double>>();
    const auto tg = j.at("t_gt").get<std::vector<double>>();
    r.pose_pred.t = Vec3(tp[0], tp[1], tp[2]);
    r.pose_gt.t = Vec3(tg[0], tg[1], tg[2]);
    r.confidence = j.at("confidence");
    r.gt_iou3d = j.at("gt_iou3d");
    r.add_err = j.at("add_err");
    r.adds_err = j.at("adds_err");
    r.diameter = j.at("diameter");
    r.symmetric = j.at("symmetric");
    r.injected = j.at("injected");
    r.pose_valid = j.at("pose_valid");
    out.push_back(r);
  }
  return out;
}

json report_to_json(const MetricReport& r) {
  json per = json::array();
  for (const auto& pc : r.per_class)
    per.push_back(json{{"class", pc.class_id},
                       {"count", pc.count},
                       {"recall", pc.recall},
                       {"auc", pc.auc},
                       {"mean_conf", pc.mean_conf}});
  json j{{"count", r.count},
         {"mean_recall", r.mean_recall},
         {"mean_auc", r.mean_auc},
         {"mean_conf", r.mean_conf},
         {"per_class", std::move(per)}};
  if (std::isnan(r.spearman))
    j["spearman"] = nullptr;
  else
    j["spearman"] = r.spearman;
  return j;
}

std::string report_to_text(const MetricReport& r) {
  char line[128];
  std::string out;
  out += "class   count  recall@0.1d      auc  mean_conf\n";
  for (const auto& pc : r.per_class) {
    std::snprintf(line, sizeof line, "%5d  %6d  %11.4f  %7.4f  %9.4f\n",
                  pc.class_id, pc.count, pc.recall, pc.auc, pc.mean_conf);
    out += line;
  }
  std::snprintf(line, sizeof line, " mean  %6d  %11.4f  %7.4f  %9.4f\n",
                r.count, r.mean_recall, r.mean_auc, r.mean_conf);
  out += line;
  std::snprintf(line, sizeof line, "spearman(conf, iou3d): %.4f\n",
                r.spearman);
  out += line;
  return out;
}

ThresholdSweep confidence_threshold_sweep(
    const std::vector<PredictionRecord>& records,
    const std::vector<double>& thresholds) {
  if (records.empty()) throw EmptyDataset("threshold sweep: no records");
  ThresholdSweep sweep;
  std::map<int, std::vector<const PredictionRecord*>> by_class;
  for (const auto& r : records) by_class[r.class_gt].push_back(&r);
  auto entry_for = [](const std::vector<const PredictionRecord*>& recs,
                      double tau) {
    SweepEntry e;
    e.tau = tau;
    std::vector<double> errs, diams;
    int kept = 0;
    for (const auto* r : recs) {
      if (r->confidence < tau) continue;
      ++kept;
      if (!r->pose_valid) continue;
      errs.push_back(headline_err(*r));
      diams.push_back(r->diameter);
    }
    e.coverage = recs.empty() ? 0.0 : double(kept) / double(recs.size());
    if (!errs.empty()) e.recall = recall_add(errs, diams);
    return e;
  };
  std::vector<const PredictionRecord*> all;
  for (const auto& r : records) all.push_back(&r);
  for (const double tau : thresholds) {
    sweep.mean.push_back(entry_for(all, tau));
    for (const auto& [cls, recs] : by_class)
      sweep.per_class[cls].push_back(entry_for(recs, tau));
  }
  return sweep;
}

TrainResult train(Model& model, const std::vector<SceneSample>& train_scenes,
                  const std::vector<SceneSample>& val_scenes,
                  const std::vector<ObjectSpec>& library,
                  const RoiConfig& rcfg, const TrainConfig& tcfg,
                  const std::string& out_dir) {
  tcfg.validate();
  fs::create_directories(out_dir);
  std::vector<ObjectModel> models;
  for (const auto& s : library) models.push_back(s.model);
  const auto val_rois = make_roi_dataset(val_scenes, rcfg, models);
  if (val_rois.empty()) throw EmptyDataset("train: empty validation set");

  std::vector<std::pair<int, int>> instances;
  for (size_t si = 0; si < train_scenes.size(); ++si)
    for (size_t gi = 0; gi < train_scenes[si].gt.size(); ++gi)
      instances.emplace_back(int(si), int(gi));
  if (instances.empty()) throw EmptyDataset("train: empty training set");

  nn::AdamW opt(std::vector<Var>(model.parameters().begin(),
                                 model.parameters().end()),
                tcfg.lr, tcfg.weight_decay);
  const int steps_per_epoch =
      int((instances.size() + size_t(tcfg.batch_size) - 1) /
          size_t(tcfg.batch_size));

  TrainResult result;
  result.checkpoint_path = (fs::path(out_dir) / "best.ckpt").string();
  result.history_path = (fs::path(out_dir) / "history.jsonl").string();
  std::ofstream hist(result.history_path);
  if (!hist) throw FormatError("train: cannot write " + result.history_path);

  const Rng master(tcfg.seed);
  int stale = 0;
  for (int epoch = 0; epoch < tcfg.max_epochs; ++epoch) {
    Rng rng = master.fork(uint64_t(epoch));
    auto order = instances;
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(rng.uniform_int(int(i)))]);

    EpochStats st;
    st.epoch = epoch;
    int steps = 0;
    for (size_t at = 0; at < order.size(); at += size_t(tcfg.batch_size)) {
      const size_t end =
          std::min(order.size(), at + size_t(tcfg.batch_size));
      std::vector<RoISample> samples;
      for (size_t i = at; i < end; ++i) {
        const auto [si, gi] = order[i];
        RoISample s =
            tcfg.augment_train
                ? augment(train_scenes[size_t(si)], gi, rng, tcfg.augment,
                          rcfg, models)
                : extract_roi(train_scenes[size_t(si)],
                              train_scenes[size_t(si)].detections[size_t(gi)],
                              rcfg, models, gi);
        s.scene_index = si;
        samples.push_back(std::move(s));
      }
      inject_denoising(samples, train_scenes, library, rng, tcfg.p_flip,
                       tcfg.p_remove, rcfg);
      Batch batch = make_batch(samples);
      const ForwardResult out = model.forward(batch.input);
      BatchLoss bl = batch_loss(out, batch.samples, models, tcfg.loss_weights,
                                tcfg.score_box_scale, rcfg.s_inp);
      const double total = bl.total->val.data[0];
      if (!std::isfinite(total)) {
        std::string ids;
        for (const auto& s : batch.samples)
          ids += " (" + std::to_string(s.scene_index) + "," +
                 std::to_string(s.gt_index) + ")";
        throw NaNLoss("non-finite loss at epoch " + std::to_string(epoch) +
                      ", batch instances:" + ids);
      }
      opt.set_lr(nn::linear_warmup_decay(
          tcfg.lr, epoch + double(steps) / steps_per_epoch,
          tcfg.warmup_epochs, tcfg.max_epochs));
      nn::zero_grads(opt.params());
      nn::backward(bl.total);
      st.grad_norm += nn::clip_grad_norm(opt.params(), tcfg.grad_clip_norm);
      opt.step();
      st.loss.center += bl.values.center;
      st.loss.z += bl.values.z;
      st.loss.rot += bl.values.rot;
      st.loss.cls += bl.values.cls;
      st.total += total;
      ++steps;
    }
    st.lr = opt.lr();
    st.grad_norm /= steps;
    st.loss.center /= steps;
    st.loss.z /= steps;
    st.loss.rot /= steps;
    st.loss.cls /= steps;
    st.total /= steps;

    const MetricReport rep =
        metric_report(evaluate(model, val_rois, models, tcfg.batch_size));
    st.val_recall = rep.mean_recall;
    st.improved = result.best_epoch < 0 || st.val_recall > result.best_val;
    if (st.improved) {
      result.best_epoch = epoch;
      result.best_val = st.val_recall;
      save_checkpoint(result.checkpoint_path, model, &opt, epoch);
      stale = 0;
    } else {
      ++stale;
    }
    result.history.push_back(st);
    hist << json{{"epoch", st.epoch},
                 {"lr", st.lr},
                 {"loss_total", st.total},
                 {"loss_center", st.loss.center},
                 {"loss_z", st.loss.z},
                 {"loss_rot", st.loss.rot},
                 {"loss_cls", st.loss.cls},
                 {"grad_norm", st.grad_norm},
                 {"val_recall", st.val_recall},
                 {"improved", st.improved}}
                .dump()
         << "\n";
    hist.flush();
    if (stale >= tcfg.early_stop_patience) break;
  }
  return result;
}

}  // namespace pvit6d
