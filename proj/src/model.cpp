#include "pvit6d/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace pvit6d {

using nn::Tensor;
using nn::Var;
using nlohmann::json;

int ModelConfig::n_tokens() const {
  switch (token_mode) {
    case TokenMode::POOL: return 0;
    case TokenMode::SINGLE_TOKEN: return 3;  // pose, scit, class
    case TokenMode::DUAL_TOKEN: return 4;    // rot, trans, scit, class
  }
  return 0;
}

int ModelConfig::scit_index() const {
  switch (token_mode) {
    case TokenMode::POOL: return -1;
    case TokenMode::SINGLE_TOKEN: return 1;
    case TokenMode::DUAL_TOKEN: return 2;
  }
  return -1;
}

void ModelConfig::validate() const {
  if (img_size <= 0 || patch_size <= 0 || img_size % patch_size != 0)
    throw ConfigInvalid("img_size must be a positive multiple of patch_size");
  if (embed_dim <= 0) throw ConfigInvalid("embed_dim must be positive");
  if (stage_depths.empty() || stage_depths.size() != stage_heads.size() ||
      stage_depths.size() != kv_strides.size())
    throw ConfigInvalid(
        "stage_depths, stage_heads and kv_strides must be nonempty and of "
        "equal length");
  for (int s = 0; s < n_stages(); ++s) {
    if (stage_depths[s] <= 0) throw ConfigInvalid("stage depth must be >= 1");
    if (stage_heads[s] <= 0 || stage_width(s) % stage_heads[s] != 0)
      throw ConfigInvalid("stage width must be divisible by its head count");
    if (kv_strides[s] <= 0) throw ConfigInvalid("kv stride must be >= 1");
  }
  if (mlp_ratio < 1) throw ConfigInvalid("mlp_ratio must be >= 1");
  if (n_classes < 1) throw ConfigInvalid("n_classes must be >= 1");
  if (token_mode == TokenMode::POOL && scca_mode != SccaMode::NONE)
    throw ConfigInvalid("POOL mode has no complexity token to condition on");
}

ModelConfig preset_tiny() { return ModelConfig{}; }

ModelConfig preset_small() {
  ModelConfig c;
  c.img_size = 224;
  c.patch_size = 4;
  c.embed_dim = 96;
  c.stage_depths = {1, 2, 11, 2};
  c.stage_heads = {1, 2, 4, 8};
  c.kv_strides = {4, 2, 1, 1};
  c.mlp_ratio = 4;
  return c;
}

ModelConfig preset_base() {
  ModelConfig c = preset_small();
  c.stage_depths = {2, 3, 16, 3};
  return c;
}

ModelConfig preset_large() {
  ModelConfig c = preset_small();
  c.embed_dim = 144;
  c.stage_depths = {2, 6, 36, 4};
  c.stage_heads = {2, 4, 8, 16};
  return c;
}

ModelConfig preset_by_name(const std::string& name) {
  if (name == "TINY") return preset_tiny();
  if (name == "S") return preset_small();
  if (name == "B") return preset_base();
  if (name == "L") return preset_large();
  throw ConfigInvalid("unknown preset: " + name);
}

namespace {

template <typename E>
std::string enum_str(E v, const std::vector<std::pair<E, const char*>>& tab) {
  for (const auto& [e, s] : tab)
    if (e == v) return s;
  throw ConfigInvalid("unserializable enum value");
}

template <typename E>
E enum_val(const std::string& s,
           const std::vector<std::pair<E, const char*>>& tab) {
  for (const auto& [e, n] : tab)
    if (s == n) return e;
  throw ConfigInvalid("unknown enum value: " + s);
}

const std::vector<std::pair<TokenMode, const char*>> kTokenModes = {
    {TokenMode::POOL, "POOL"},
    {TokenMode::SINGLE_TOKEN, "SINGLE_TOKEN"},
    {TokenMode::DUAL_TOKEN, "DUAL_TOKEN"}};
const std::vector<std::pair<SccaMode, const char*>> kSccaModes = {
    {SccaMode::NONE, "NONE"}, {SccaMode::CONV, "CONV"},
    {SccaMode::ATTN, "ATTN"}};
const std::vector<std::pair<SccaTargets, const char*>> kSccaTargets = {
    {SccaTargets::Q_ONLY, "Q_ONLY"}, {SccaTargets::QKV, "QKV"}};
const std::vector<std::pair<TransVariant, const char*>> kTransVariants = {
    {TransVariant::ABS_Z, "ABS_Z"}, {TransVariant::SITP, "SITP"},
    {TransVariant::SIZP, "SIZP"}};

}  // namespace

std::string trans_variant_name(TransVariant v) {
  return enum_str(v, kTransVariants);
}

TransVariant trans_variant_from_name(const std::string& s) {
  return enum_val<TransVariant>(s, kTransVariants);
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"img_size", c.img_size},
           {"patch_size", c.patch_size},
           {"embed_dim", c.embed_dim},
           {"stage_depths", c.stage_depths},
           {"stage_heads", c.stage_heads},
           {"kv_strides", c.kv_strides},
           {"mlp_ratio", c.mlp_ratio},
           {"token_mode", enum_str(c.token_mode, kTokenModes)},
           {"scca_mode", enum_str(c.scca_mode, kSccaModes)},
           {"scca_targets", enum_str(c.scca_targets, kSccaTargets)},
           {"trans_variant", enum_str(c.trans_variant, kTransVariants)},
           {"use_bbox_embedding", c.use_bbox_embedding},
           {"n_classes", c.n_classes}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.img_size = j.value("img_size", d.img_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.stage_depths = j.value("stage_depths", d.stage_depths);
  c.stage_heads = j.value("stage_heads", d.stage_heads);
  c.kv_strides = j.value("kv_strides", d.kv_strides);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.token_mode = enum_val<TokenMode>(
      j.value("token_mode", std::string("DUAL_TOKEN")), kTokenModes);
  c.scca_mode = enum_val<SccaMode>(j.value("scca_mode", std::string("NONE")),
                                   kSccaModes);
  c.scca_targets = enum_val<SccaTargets>(
      j.value("scca_targets", std::string("Q_ONLY")), kSccaTargets);
  c.trans_variant = enum_val<TransVariant>(
      j.value("trans_variant", std::string("SITP")), kTransVariants);
  c.use_bbox_embedding = j.value("use_bbox_embedding", d.use_bbox_embedding);
  c.n_classes = j.value("n_classes", d.n_classes);
}

namespace {

// Pooling sites follow the downsampling schedule: queries pool (stride 2)
// at the first block of every stage after the first, keys/values pool at
// the per-stage kv stride in every block. Conditioning exists only where a
// pooling convolution exists.
struct BlockLayout {
  int d_in = 0, d_out = 0;
  int q_stride = 1, kv_stride = 1;
  bool cond_q = false, cond_kv = false;
};

BlockLayout block_layout(const ModelConfig& cfg, int s, int i) {
  BlockLayout b;
  b.d_out = cfg.stage_width(s);
  b.d_in = (i == 0 && s > 0) ? cfg.stage_width(s - 1) : b.d_out;
  b.q_stride = (i == 0 && s > 0) ? 2 : 1;
  b.kv_stride = cfg.kv_strides[s];
  const bool scca = cfg.scca_mode != SccaMode::NONE;
  b.cond_q = scca && b.q_stride > 1;
  b.cond_kv = scca && cfg.scca_targets == SccaTargets::QKV && b.kv_stride > 1;
  return b;
}

void pool_specs(std::vector<ParamSpec>& out, const std::string& prefix,
                int c, bool conditioned, SccaMode mode) {
  if (conditioned && mode == SccaMode::CONV) {
    out.push_back({prefix + ".cond.w", {c, 9 * c}, ParamInit::Normal});
    out.push_back({prefix + ".cond.b", {9 * c}, ParamInit::PoolKernel});
    return;
  }
  out.push_back({prefix + ".kernel", {3, 3, c}, ParamInit::PoolKernel});
  if (conditioned && mode == SccaMode::ATTN) {
    out.push_back({prefix + ".gate.w", {c, c}, ParamInit::Normal});
    out.push_back({prefix + ".gate.b", {c}, ParamInit::Zero});
  }
}

void head_specs(std::vector<ParamSpec>& out, const std::string& prefix,
                int d_in, int hidden, int d_out) {
  out.push_back({prefix + ".w0", {d_in, hidden}});
  out.push_back({prefix + ".b0", {hidden}, ParamInit::Zero});
  out.push_back({prefix + ".w1", {hidden, hidden}});
  out.push_back({prefix + ".b1", {hidden}, ParamInit::Zero});
  out.push_back({prefix + ".w2", {hidden, d_out}});
  out.push_back({prefix + ".b2", {d_out}, ParamInit::Zero});
}

}  // namespace

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  const int d = cfg.embed_dim;
  const int n = cfg.grid_size() * cfg.grid_size();
  out.push_back({"patch_embed.w", {cfg.patch_size * cfg.patch_size * 3, d}});
  out.push_back({"patch_embed.b", {d}, ParamInit::Zero});
  out.push_back({"pos_embed", {n, d}});
  if (cfg.token_mode == TokenMode::DUAL_TOKEN) {
    out.push_back({"token.rot", {1, d}});
    out.push_back({"token.trans", {1, d}});
    out.push_back({"token.scit", {1, d}});
  } else if (cfg.token_mode == TokenMode::SINGLE_TOKEN) {
    out.push_back({"token.pose", {1, d}});
    out.push_back({"token.scit", {1, d}});
  }
  out.push_back({"class_embed", {cfg.n_classes, d}});
  if (cfg.use_bbox_embedding) {
    out.push_back({"bbox_embed.w", {4, d}});
    out.push_back({"bbox_embed.b", {d}, ParamInit::Zero});
  }
  for (int s = 0; s < cfg.n_stages(); ++s) {
    for (int i = 0; i < cfg.stage_depths[s]; ++i) {
      const BlockLayout b = block_layout(cfg, s, i);
      const std::string p =
          "s" + std::to_string(s) + ".b" + std::to_string(i) + ".";
      out.push_back({p + "ln1.g", {b.d_in}, ParamInit::One});
      out.push_back({p + "ln1.b", {b.d_in}, ParamInit::Zero});
      for (const char* r : {"q", "k", "v"}) {
        out.push_back({p + "w" + r, {b.d_in, b.d_out}});
        out.push_back({p + "b" + r, {b.d_out}, ParamInit::Zero});
      }
      if (b.q_stride > 1)
        pool_specs(out, p + "pool_q", b.d_out, b.cond_q, cfg.scca_mode);
      if (b.kv_stride > 1) {
        pool_specs(out, p + "pool_k", b.d_out, b.cond_kv, cfg.scca_mode);
        pool_specs(out, p + "pool_v", b.d_out, b.cond_kv, cfg.scca_mode);
      }
      out.push_back({p + "proj.w", {b.d_out, b.d_out}});
      out.push_back({p + "proj.b", {b.d_out}, ParamInit::Zero});
      out.push_back({p + "ln2.g", {b.d_out}, ParamInit::One});
      out.push_back({p + "ln2.b", {b.d_out}, ParamInit::Zero});
      out.push_back({p + "mlp.w1", {b.d_out, cfg.mlp_ratio * b.d_out}});
      out.push_back({p + "mlp.b1", {cfg.mlp_ratio * b.d_out}, ParamInit::Zero});
      out.push_back({p + "mlp.w2", {cfg.mlp_ratio * b.d_out, b.d_out}});
      out.push_back({p + "mlp.b2", {b.d_out}, ParamInit::Zero});
    }
  }
  const int df = cfg.final_width();
  out.push_back({"norm.g", {df}, ParamInit::One});
  out.push_back({"norm.b", {df}, ParamInit::Zero});
  int head_in = df;
  if (cfg.token_mode == TokenMode::POOL)
    head_in = df + d + (cfg.use_bbox_embedding ? d : 0);
  head_specs(out, "head_rot", head_in, d, 6);
  head_specs(out, "head_trans", head_in, d, 3);
  head_specs(out, "head_cls", head_in, d, cfg.n_classes);
  return out;
}

std::int64_t count_params(const ModelConfig& cfg) {
  std::int64_t total = 0;
  for (const auto& sp : param_specs(cfg)) total += Tensor::count(sp.shape);
  return total;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng rng(seed);
  for (const auto& sp : param_specs(cfg_)) {
    Tensor t(sp.shape);
    switch (sp.init) {
      case ParamInit::Zero:
        break;
      case ParamInit::One:
        t.data.setOnes();
        break;
      case ParamInit::Normal:
        for (int64_t i = 0; i < t.numel(); ++i)
          t.data[i] = rng.trunc_normal(0.02);
        break;
      case ParamInit::PoolKernel: {
        // Averaging-free start: identity tap at the kernel center plus a
        // little noise, so pooling preserves the signal at init.
        for (int64_t i = 0; i < t.numel(); ++i)
          t.data[i] = rng.trunc_normal(0.02);
        const int64_t c = t.numel() / 9;
        for (int64_t i = 0; i < c; ++i) t.data[4 * c + i] += 1.0;
        break;
      }
    }
    index_[sp.name] = int(params_.size());
    params_.push_back(nn::leaf(std::move(t), true));
  }
}

Var Model::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigInvalid("no such parameter: " + name);
  return params_[size_t(it->second)];
}

std::int64_t Model::n_params() const {
  std::int64_t total = 0;
  for (const auto& p : params_) total += p->val.numel();
  return total;
}

std::uint64_t Model::param_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params_) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->val.data.data());
    for (int64_t i = 0; i < p->val.numel() * 8; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

Var scca_pool(const Var& x, const Var& scit, SccaMode mode, int stride,
              const Var& kernel, const Var& cond_w, const Var& cond_b) {
  if (!x || x->val.shape.size() != 4)
    throw ShapeMismatch("scca_pool: x must be [B, H, W, C]");
  const int b = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2),
            c = x->val.dim(3);
  if (mode != SccaMode::NONE) {
    if (!scit || scit->val.shape != std::vector<int>{b, c})
      throw ShapeMismatch("scca_pool: scit must be [B, C]");
  }
  switch (mode) {
    case SccaMode::NONE:
      return nn::depthwise_conv2d(x, kernel, stride, 1);
    case SccaMode::CONV: {
      Var kern = nn::reshape(nn::linear(scit, cond_w, cond_b), {b, 3, 3, c});
      return nn::depthwise_conv2d(x, kern, stride, 1);
    }
    case SccaMode::ATTN: {
      Var gate = nn::linear(scit, cond_w, cond_b);  // [B, C]
      Var flat = nn::reshape(x, {b, h * w, c});
      Var logits =
          nn::scale(nn::batched_rowdot(flat, gate), 1.0 / std::sqrt(double(c)));
      // Scaled by the position count so a uniform attention (zero scit at
      // init) leaves the map unchanged.
      Var attn = nn::scale(nn::softmax_rows(logits), double(h * w));
      Var gated = nn::reshape(nn::mul_bcast_lastdim(flat, attn), {b, h, w, c});
      return nn::depthwise_conv2d(gated, kernel, stride, 1);
    }
  }
  throw ConfigInvalid("scca_pool: bad mode");
}

namespace {

// [B, 1] column of ones, for broadcasting learned [1, D] rows over a batch.
Var ones_col(int b) {
  Tensor t({b, 1});
  t.data.setOnes();
  return nn::constant(std::move(t));
}

Var broadcast_token(const Var& tok, int b) {
  const int d = tok->val.last_dim();
  return nn::reshape(nn::matmul(ones_col(b), tok), {b, 1, d});
}

Var head_forward(const Model& m, const std::string& prefix, const Var& x) {
  Var h = nn::gelu(nn::linear(x, m.param(prefix + ".w0"), m.param(prefix + ".b0")));
  h = nn::gelu(nn::linear(h, m.param(prefix + ".w1"), m.param(prefix + ".b1")));
  return nn::linear(h, m.param(prefix + ".w2"), m.param(prefix + ".b2"));
}

// Drops the complexity-token row so nothing can attend to it; its only
// influence on other rows is through the conditioned pooling path.
Var drop_scit(const Var& x, int scit_idx) {
  const int t = x->val.dim(1);
  if (scit_idx == 0) return nn::slice_seq(x, 1, t);
  return nn::concat_seq(nn::slice_seq(x, 0, scit_idx),
                        nn::slice_seq(x, scit_idx + 1, t));
}

}  // namespace

ForwardResult Model::forward(const ForwardInput& in) const {
  const auto& cfg = cfg_;
  if (in.roi.shape.size() != 4 || in.roi.dim(1) != cfg.img_size ||
      in.roi.dim(2) != cfg.img_size || in.roi.dim(3) != 3)
    throw ShapeMismatch("forward: roi must be [B, img, img, 3]");
  const int b = in.roi.dim(0);
  if (int(in.class_ids.size()) != b)
    throw ShapeMismatch("forward: class_ids size mismatch");
  if (cfg.use_bbox_embedding && int(in.bboxes.size()) != b)
    throw ShapeMismatch("forward: bboxes size mismatch");
  for (int id : in.class_ids)
    if (id < 0 || id >= cfg.n_classes)
      throw UnknownClass("forward: class id " + std::to_string(id));

  const int p = cfg.patch_size, g = cfg.grid_size(), n = g * g;
  const int pc = p * p * 3;
  Tensor patches({b, n, pc});
  for (int bi = 0; bi < b; ++bi)
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        double* dst =
            patches.data.data() + (int64_t(bi) * n + gy * g + gx) * pc;
        for (int py = 0; py < p; ++py) {
          const int64_t src = ((int64_t(bi) * cfg.img_size + gy * p + py) *
                                   cfg.img_size +
                               gx * p) *
                              3;
          std::memcpy(dst + py * p * 3, in.roi.data.data() + src,
                      sizeof(double) * size_t(p) * 3);
        }
      }

  Var x = nn::linear(nn::constant(std::move(patches)),
                     param("patch_embed.w"), param("patch_embed.b"));
  x = nn::reshape(x, {b, n, cfg.embed_dim});
  {
    Var pos = param("pos_embed");
    Var pos_b = nn::reshape(
        nn::matmul(ones_col(b), nn::reshape(pos, {1, n * cfg.embed_dim})),
        {b, n, cfg.embed_dim});
    x = nn::add(x, pos_b);
  }

  Var class_vec = nn::gather_rows(param("class_embed"), in.class_ids);
  Var bbox_vec;
  if (cfg.use_bbox_embedding) {
    Tensor bb({b, 4});
    for (int bi = 0; bi < b; ++bi)
      for (int j = 0; j < 4; ++j) bb.data[bi * 4 + j] = in.bboxes[bi][j];
    bbox_vec = nn::linear(nn::constant(std::move(bb)), param("bbox_embed.w"),
                          param("bbox_embed.b"));
  }

  const int n_tok = cfg.n_tokens();
  const int scit_idx = cfg.scit_index();
  if (n_tok > 0) {
    Var class_tok = class_vec;
    if (bbox_vec) class_tok = nn::add(class_tok, bbox_vec);
    class_tok = nn::reshape(class_tok, {b, 1, cfg.embed_dim});
    Var toks;
    if (cfg.token_mode == TokenMode::DUAL_TOKEN)
      toks = nn::concat_seq(
          nn::concat_seq(broadcast_token(param("token.rot"), b),
                         broadcast_token(param("token.trans"), b)),
          broadcast_token(param("token.scit"), b));
    else
      toks = nn::concat_seq(broadcast_token(param("token.pose"), b),
                            broadcast_token(param("token.scit"), b));
    x = nn::concat_seq(nn::concat_seq(toks, class_tok), x);
  }

  ForwardResult out;
  out.trans_variant = cfg.trans_variant;

  // One pooling application: split tokens from the spatial grid, pool the
  // grid, stitch back. Returns the new sequence and grid side lengths.
  auto pooled = [&](const Var& v, const std::string& prefix, int stride,
                    bool conditioned, int hh, int ww, int* oh, int* ow) -> Var {
    if (stride <= 1 && !conditioned) {
      *oh = hh;
      *ow = ww;
      return v;
    }
    *oh = (hh - 1) / stride + 1;
    *ow = (ww - 1) / stride + 1;
    const int c = v->val.last_dim();
    const int t = v->val.dim(1);
    Var spatial = nn::reshape(nn::slice_seq(v, n_tok, t), {b, hh, ww, c});
    Var scit;
    if (conditioned)
      scit = nn::reshape(nn::slice_seq(v, scit_idx, scit_idx + 1), {b, c});
    Var kernel, cw, cb;
    const SccaMode mode = conditioned ? cfg.scca_mode : SccaMode::NONE;
    if (mode == SccaMode::CONV) {
      cw = param(prefix + ".cond.w");
      cb = param(prefix + ".cond.b");
    } else {
      kernel = param(prefix + ".kernel");
      if (mode == SccaMode::ATTN) {
        cw = param(prefix + ".gate.w");
        cb = param(prefix + ".gate.b");
      }
    }
    Var sp = scca_pool(spatial, scit, mode, stride, kernel, cw, cb);
    Var flat = nn::reshape(sp, {b, *oh * *ow, c});
    if (n_tok == 0) return flat;
    return nn::concat_seq(nn::slice_seq(v, 0, n_tok), flat);
  };

  int h = g, w = g;
  for (int s = 0; s < cfg.n_stages(); ++s) {
    const int heads = cfg.stage_heads[s];
    for (int i = 0; i < cfg.stage_depths[s]; ++i) {
      const BlockLayout bl = block_layout(cfg, s, i);
      const std::string pre =
          "s" + std::to_string(s) + ".b" + std::to_string(i) + ".";
      Var y = nn::layer_norm(x, param(pre + "ln1.g"), param(pre + "ln1.b"));
      Var q = nn::linear(y, param(pre + "wq"), param(pre + "bq"));
      Var k = nn::linear(y, param(pre + "wk"), param(pre + "bk"));
      Var v = nn::linear(y, param(pre + "wv"), param(pre + "bv"));
      int qh = h, qw = w, kh = h, kw = w;
      q = pooled(q, pre + "pool_q", bl.q_stride, bl.cond_q, h, w, &qh, &qw);
      k = pooled(k, pre + "pool_k", bl.kv_stride, bl.cond_kv, h, w, &kh, &kw);
      v = pooled(v, pre + "pool_v", bl.kv_stride, bl.cond_kv, h, w, &kh, &kw);
      if (scit_idx >= 0) {
        k = drop_scit(k, scit_idx);
        v = drop_scit(v, scit_idx);
      }
      const bool last = i == cfg.stage_depths[s] - 1;
      Tensor attn;
      Var z = nn::multihead_attention(q, k, v, heads, last ? &attn : nullptr);
      x = nn::add(q, nn::linear(z, param(pre + "proj.w"), param(pre + "proj.b")));
      Var y2 = nn::layer_norm(x, param(pre + "ln2.g"), param(pre + "ln2.b"));
      Var m = nn::gelu(nn::linear(y2, param(pre + "mlp.w1"), param(pre + "mlp.b1")));
      m = nn::linear(m, param(pre + "mlp.w2"), param(pre + "mlp.b2"));
      x = nn::add(x, m);
      h = qh;
      w = qw;
      if (last) {
        StageAttention sa;
        sa.weights = std::move(attn);
        sa.n_tokens = n_tok;
        sa.n_key_tokens = n_tok > 0 ? n_tok - 1 : 0;
        sa.q_h = qh;
        sa.q_w = qw;
        sa.k_h = kh;
        sa.k_w = kw;
        out.attn.push_back(std::move(sa));
      }
    }
  }

  x = nn::layer_norm(x, param("norm.g"), param("norm.b"));
  const int df = cfg.final_width();

  Var rot_in, trans_in, cls_in;
  if (cfg.token_mode == TokenMode::POOL) {
    Var parts = nn::concat_cols(
        bbox_vec ? std::vector<Var>{nn::seq_mean(x), class_vec, bbox_vec}
                 : std::vector<Var>{nn::seq_mean(x), class_vec});
    out.fused = parts;
    rot_in = trans_in = cls_in = parts;
  } else if (cfg.token_mode == TokenMode::SINGLE_TOKEN) {
    rot_in = trans_in = nn::reshape(nn::slice_seq(x, 0, 1), {b, df});
    cls_in = nn::reshape(nn::slice_seq(x, 1, 2), {b, df});
  } else {
    rot_in = nn::reshape(nn::slice_seq(x, 0, 1), {b, df});
    trans_in = nn::reshape(nn::slice_seq(x, 1, 2), {b, df});
    cls_in = nn::reshape(nn::slice_seq(x, 2, 3), {b, df});
  }

  out.r6d = head_forward(*this, "head_rot", rot_in);
  out.tcode = head_forward(*this, "head_trans", trans_in);
  out.class_logits = head_forward(*this, "head_cls", cls_in);
  out.class_scores = nn::sigmoid(out.class_logits)->val;
  return out;
}

int refine_class(const std::vector<double>& scores) {
  if (scores.empty()) throw EmptyInput("refine_class: empty scores");
  int best = 0;
  for (int i = 1; i < int(scores.size()); ++i)
    if (scores[size_t(i)] > scores[size_t(best)]) best = i;
  return best;
}

Prediction decode_prediction(const ForwardResult& out, int i, int class_id,
                             const BBox& bbox, double s_inp,
                             const CameraIntrinsics& k,
                             const std::vector<ObjectModel>& models) {
  const ObjectModel* model = nullptr;
  for (const auto& m : models)
    if (m.class_id == class_id) model = &m;
  if (!model)
    throw UnknownClass("decode_prediction: class " + std::to_string(class_id));

  Prediction pred;
  pred.class_id = class_id;
  const int nc = out.class_scores.last_dim();
  pred.class_scores.resize(size_t(nc));
  for (int c = 0; c < nc; ++c)
    pred.class_scores[size_t(c)] = out.class_scores.data[int64_t(i) * nc + c];
  pred.class_refined = refine_class(pred.class_scores);
  pred.confidence = pred.class_scores[size_t(pred.class_refined)];

  const double* r = out.r6d->val.data.data() + int64_t(i) * 6;
  Rotation6D code{Vec3(r[0], r[1], r[2]), Vec3(r[3], r[4], r[5])};
  const double* tc = out.tcode->val.data.data() + int64_t(i) * 3;
  TranslationCode t{tc[0], tc[1], std::max(tc[2], 1e-6), out.trans_variant};
  pred.pose.t = decode_translation(t, bbox, s_inp, k, model->diameter);
  pred.pose.R = allo_to_ego(r6d_to_matrix(code), pred.pose.t);
  return pred;
}

namespace {

json tensor_bin(const Tensor& t) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.data.data());
  return json::binary(std::vector<std::uint8_t>(p, p + t.numel() * 8));
}

void bin_into(const json& j, Tensor& t, const std::string& what) {
  if (!j.is_binary()) throw FormatError("checkpoint: " + what + " not binary");
  const auto& b = j.get_binary();
  if (int64_t(b.size()) != t.numel() * 8)
    throw FormatError("checkpoint: size mismatch for " + what);
  std::memcpy(t.data.data(), b.data(), b.size());
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     const nn::AdamW* opt, int epoch) {
  json j;
  j["format"] = "pvit6d.ckpt";
  j["version"] = 1;
  j["config"] = model.config();
  j["epoch"] = epoch;
  json params = json::object();
  const auto specs = param_specs(model.config());
  for (size_t i = 0; i < specs.size(); ++i)
    params[specs[i].name] = json{{"shape", specs[i].shape},
                                 {"data", tensor_bin(model.parameters()[i]->val)}};
  j["params"] = std::move(params);
  if (opt) {
    json m = json::array(), v = json::array();
    for (const auto& t : opt->m()) m.push_back(tensor_bin(t));
    for (const auto& t : opt->v()) v.push_back(tensor_bin(t));
    j["opt"] = json{{"step", opt->step_count()},
                    {"m", std::move(m)},
                    {"v", std::move(v)}};
  }
  const auto bytes = json::to_cbor(j);
  std::ofstream os(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(bytes.data()),
           std::streamsize(bytes.size()));
  if (!os) throw FormatError("checkpoint: cannot write " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path, std::uint64_t seed) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  json j;
  try {
    j = json::from_cbor(bytes);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint: " + path + ": " + e.what());
  }
  if (j.value("format", std::string()) != "pvit6d.ckpt")
    throw FormatError("checkpoint: " + path + ": unrecognized format");
  ModelConfig cfg = j.at("config").get<ModelConfig>();
  LoadedCheckpoint lc{Model(cfg, seed), j.value("epoch", 0), json()};
  const auto& params = j.at("params");
  const auto specs = param_specs(cfg);
  for (size_t i = 0; i < specs.size(); ++i) {
    auto it = params.find(specs[i].name);
    if (it == params.end())
      throw FormatError("checkpoint: missing parameter " + specs[i].name);
    bin_into(it->at("data"), lc.model.parameters()[i]->val, specs[i].name);
  }
  if (j.contains("opt")) lc.opt_state = j["opt"];
  return lc;
}

void restore_optimizer(nn::AdamW& opt, const json& state) {
  if (state.is_null() || state.empty()) return;
  const auto& m = state.at("m");
  const auto& v = state.at("v");
  if (m.size() != opt.m().size() || v.size() != opt.v().size())
    throw FormatError("checkpoint: optimizer state size mismatch");
  for (size_t i = 0; i < opt.m().size(); ++i) {
    bin_into(m[i], opt.m()[i], "opt.m");
    bin_into(v[i], opt.v()[i], "opt.v");
  }
  opt.set_step(state.at("step").get<std::int64_t>());
}

}  // namespace pvit6d
