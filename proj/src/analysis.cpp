#include "pvit6d/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace pvit6d {

using nn::Tensor;
using nn::Var;

namespace {

std::vector<std::pair<int, std::string>> pose_tokens(TokenMode mode) {
  switch (mode) {
    case TokenMode::DUAL_TOKEN:
      return {{0, "rot"}, {1, "trans"}};
    case TokenMode::SINGLE_TOKEN:
      return {{0, "pose"}};
    default:
      throw UnsupportedMode("attention maps need a pose-token model");
  }
}

}  // namespace

std::vector<std::string> export_attention_maps(const Model& model,
                                               const RoISample& sample,
                                               const std::string& out_dir) {
  const auto tokens = pose_tokens(model.config().token_mode);
  fs::create_directories(out_dir);
  Batch batch = make_batch({sample});
  const ForwardResult out = model.forward(batch.input);

  std::vector<std::string> files;
  for (size_t si = 0; si < out.attn.size(); ++si) {
    const StageAttention& sa = out.attn[si];
    const int heads = sa.weights.dim(1);
    const int tk = sa.weights.dim(3);
    const int n_spatial = sa.k_h * sa.k_w;
    for (const auto& [tok, name] : tokens) {
      std::vector<double> map(size_t(n_spatial), 0.0);
      for (int h = 0; h < heads; ++h) {
        const double* row = sa.weights.data.data() +
                            (int64_t(h) * sa.weights.dim(2) + tok) * tk;
        for (int j = 0; j < n_spatial; ++j)
          map[size_t(j)] += row[sa.n_key_tokens + j] / heads;
      }
      const Image heat = to_grayscale_heatmap(map, sa.k_h, sa.k_w);
      const Image up =
          resize_region(heat, 0, 0, sa.k_h, sa.k_w, sample.roi.h,
                        sample.roi.w);
      const Image over = overlay_heatmap(sample.roi, map, sa.k_h, sa.k_w);
      const std::string stem =
          (fs::path(out_dir) /
           ("attn_stage" + std::to_string(si) + "_" + name))
              .string();
      write_png(stem + ".png", up);
      write_png(stem + "_overlay.png", over);
      files.push_back(stem + ".png");
      files.push_back(stem + "_overlay.png");
    }
  }
  return files;
}

double PolyFit::eval(double x) const {
  const double z = (x - x_mean) / x_std;
  double acc = 0.0;
  for (size_t i = coeffs.size(); i-- > 0;) acc = acc * z + coeffs[i];
  return acc;
}

PolyFit polyfit(const std::vector<double>& xs, const std::vector<double>& ys,
                int degree) {
  if (xs.size() != ys.size() || xs.empty())
    throw ShapeMismatch("polyfit: mismatched or empty inputs");
  if (degree < 0) throw ConfigInvalid("polyfit: negative degree");
  const int n = int(xs.size());
  PolyFit fit;
  fit.degree = degree;
  for (double x : xs) fit.x_mean += x / n;
  double var = 0.0;
  for (double x : xs) var += (x - fit.x_mean) * (x - fit.x_mean) / n;
  if (var <= 0.0) throw DegenerateInput("polyfit: constant x column");
  fit.x_std = std::sqrt(var);

  Eigen::MatrixXd a(n, degree + 1);
  Eigen::VectorXd b(n);
  for (int i = 0; i < n; ++i) {
    const double z = (xs[size_t(i)] - fit.x_mean) / fit.x_std;
    double p = 1.0;
    for (int j = 0; j <= degree; ++j) {
      a(i, j) = p;
      p *= z;
    }
    b(i) = ys[size_t(i)];
  }
  const Eigen::VectorXd c = a.colPivHouseholderQr().solve(b);
  fit.coeffs.assign(c.data(), c.data() + c.size());
  return fit;
}

namespace {

void write_csv(const std::string& path, const std::string& header,
               const std::vector<double>& xs, const std::vector<double>& ys) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path);
  os << header << "\n";
  os.precision(17);
  for (size_t i = 0; i < xs.size(); ++i) os << xs[i] << "," << ys[i] << "\n";
}

// Scatter plot; a fitted trend line is drawn when fit != nullptr.
void scatter_png(const std::string& path, const std::vector<double>& xs,
                 const std::vector<double>& ys, const PolyFit* fit) {
  const int size = 320, margin = 12;
  double xlo = xs[0], xhi = xs[0], ylo = ys[0], yhi = ys[0];
  for (double x : xs) xlo = std::min(xlo, x), xhi = std::max(xhi, x);
  for (double y : ys) ylo = std::min(ylo, y), yhi = std::max(yhi, y);
  if (xhi <= xlo) xhi = xlo + 1.0;
  if (yhi <= ylo) yhi = ylo + 1.0;
  Image img(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) img.set(y, x, 1.0, 1.0, 1.0);
  auto px = [&](double x) {
    return margin +
           int((x - xlo) / (xhi - xlo) * (size - 2 * margin - 1) + 0.5);
  };
  auto py = [&](double y) {
    return size - 1 - margin -
           int((y - ylo) / (yhi - ylo) * (size - 2 * margin - 1) + 0.5);
  };
  auto dot = [&](int cy, int cx, double r, double g, double b) {
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int yy = std::clamp(cy + dy, 0, size - 1);
        const int xx = std::clamp(cx + dx, 0, size - 1);
        img.set(yy, xx, r, g, b);
      }
  };
  for (size_t i = 0; i < xs.size(); ++i)
    dot(py(ys[i]), px(xs[i]), 0.1, 0.25, 0.7);
  if (fit)
    for (int i = 0; i < 400; ++i) {
      const double x = xlo + (xhi - xlo) * i / 399.0;
      const double y = std::clamp(fit->eval(x), ylo, yhi);
      dot(py(y), px(x), 0.85, 0.15, 0.1);
    }
  write_png(path, img);
}

}  // namespace

ConfidenceReport confidence_report(
    const std::vector<PredictionRecord>& records, const std::string& out_dir,
    int fit_degree) {
  if (records.size() < 2)
    throw EmptyDataset("confidence report needs at least 2 records");
  fs::create_directories(out_dir);
  ConfidenceReport rep;

  std::vector<double> conf, iou, add, hi_conf, hi_iou;
  for (const auto& r : records) {
    conf.push_back(r.confidence);
    iou.push_back(r.gt_iou3d);
    add.push_back(r.add_err);
    if (r.confidence > 0.5) {
      hi_conf.push_back(r.confidence);
      hi_iou.push_back(r.gt_iou3d);
    }
  }
  if (hi_conf.size() < 2)
    throw DegenerateInput("confidence report: <2 records above 0.5");
  rep.spearman = spearman_rho(hi_conf, hi_iou);
  rep.n_high_conf = int(hi_conf.size());
  rep.fit = polyfit(add, conf, fit_degree);

  const fs::path dir(out_dir);
  auto emit = [&](const std::string& name) {
    rep.files.push_back((dir / name).string());
    return rep.files.back();
  };
  write_csv(emit("confidence_vs_iou3d.csv"), "confidence,gt_iou3d", conf,
            iou);
  scatter_png(emit("confidence_vs_iou3d.png"), conf, iou, nullptr);
  write_csv(emit("confidence_vs_add.csv"), "add_err,confidence", add, conf);
  scatter_png(emit("confidence_vs_add_fit.png"), add, conf, &rep.fit);

  const std::vector<double> taus = {0.0,  0.1, 0.2, 0.3, 0.4,
                                    0.5,  0.6, 0.7, 0.8, 0.9};
  const ThresholdSweep sweep = confidence_threshold_sweep(records, taus);
  {
    std::ofstream os(emit("threshold_sweep.csv"));
    os << "class,tau,coverage,recall\n";
    os.precision(17);
    auto row = [&](const std::string& cls, const SweepEntry& e) {
      os << cls << "," << e.tau << "," << e.coverage << ",";
      if (e.recall) os << *e.recall;
      os << "\n";
    };
    for (const auto& e : sweep.mean) row("mean", e);
    for (const auto& [cls, entries] : sweep.per_class)
      for (const auto& e : entries) row(std::to_string(cls), e);
  }
  {
    std::ofstream os(emit("report.json"));
    os << json{{"spearman", rep.spearman},
               {"n_high_conf", rep.n_high_conf},
               {"fit_degree", rep.fit.degree},
               {"fit_x_mean", rep.fit.x_mean},
               {"fit_x_std", rep.fit.x_std},
               {"fit_coeffs", rep.fit.coeffs}}
              .dump(2)
       << "\n";
  }
  return rep;
}

Tensor saliency_late_fusion(const Model& model,
                            const std::vector<RoISample>& samples,
                            const std::vector<ObjectModel>& models,
                            const LossWeights& weights) {
  const ModelConfig& cfg = model.config();
  if (cfg.token_mode != TokenMode::POOL || !cfg.use_bbox_embedding)
    throw UnsupportedMode(
        "late-fusion saliency needs a fused readout with bbox embedding");
  if (samples.empty()) throw EmptyInput("saliency: no samples");

  Batch batch = make_batch(samples);
  const ForwardResult out = model.forward(batch.input);
  LossWeights pose_only = weights;
  pose_only.lambda_cls = 0.0;  // gradient of the pose terms only
  BatchLoss bl = batch_loss(out, batch.samples, models, pose_only, 1.0,
                            samples[0].roi.h);
  nn::zero_grads(model.parameters());
  nn::backward(bl.total);

  const int b = int(samples.size());
  const int d = cfg.embed_dim;
  const int df = cfg.final_width();
  const Tensor& g = out.fused->g();  // [B, df + 2d]: pooled, class, bbox
  std::vector<double> mean_abs(size_t(df + 2 * d), 0.0);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < df + 2 * d; ++j)
      mean_abs[size_t(j)] +=
          std::abs(g.data[int64_t(i) * (df + 2 * d) + j]) / b;
  nn::zero_grads(model.parameters());

  // Row layout: pooled feature rows, then the bbox row, then the class row.
  const int pooled_rows = df / d;
  Tensor sal({pooled_rows + 2, d});
  for (int j = 0; j < df; ++j) sal.data[j] = mean_abs[size_t(j)];
  for (int j = 0; j < d; ++j) {
    sal.data[int64_t(pooled_rows) * d + j] = mean_abs[size_t(df + d + j)];
    sal.data[int64_t(pooled_rows + 1) * d + j] = mean_abs[size_t(df + j)];
  }
  return sal;
}

}  // namespace pvit6d
