#include "pvit6d/nn/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace pvit6d::nn {

namespace {
std::atomic<int64_t> g_next_id{1};

Var new_node(Tensor val) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->id = g_next_id.fetch_add(1);
  return n;
}
}  // namespace

Var leaf(Tensor t, bool requires_grad) {
  auto n = new_node(std::move(t));
  n->requires_grad = requires_grad;
  return n;
}

Var constant(Tensor t) { return leaf(std::move(t), false); }

Var make_op(Tensor val, std::vector<Var> parents,
            std::function<void(Node&)> backprop) {
  auto n = new_node(std::move(val));
  for (const auto& p : parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

void backward(const Var& root) {
  if (root->val.numel() != 1)
    throw ShapeMismatch("backward: root must be scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](Node* a, Node* b) { return a->id > b->id; });
  root->g().data[0] += 1.0;
  for (Node* n : order)
    if (n->backprop && n->grad_alloc) n->backprop(*n);
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw ShapeMismatch("add: shape mismatch");
  Tensor out = a->val;
  out.data += b->val.data;
  return make_op(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->g().data += self.grad.data;
  });
}

Var sub(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw ShapeMismatch("sub: shape mismatch");
  Tensor out = a->val;
  out.data -= b->val.data;
  return make_op(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad)
      self.parents[0]->g().data += self.grad.data;
    if (self.parents[1]->requires_grad)
      self.parents[1]->g().data -= self.grad.data;
  });
}

Var mul(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw ShapeMismatch("mul: shape mismatch");
  Tensor out = a->val;
  out.data.array() *= b->val.data.array();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad)
      a->g().data.array() += self.grad.data.array() * b->val.data.array();
    if (b->requires_grad)
      b->g().data.array() += self.grad.data.array() * a->val.data.array();
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a->val;
  out.data *= s;
  return make_op(std::move(out), {a}, [s](Node& self) {
    self.parents[0]->g().data += s * self.grad.data;
  });
}

Var add_n(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeMismatch("add_n: empty");
  Tensor out = xs[0]->val;
  for (size_t i = 1; i < xs.size(); ++i) out.data += xs[i]->val.data;
  return make_op(std::move(out), xs, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->g().data += self.grad.data;
  });
}

Var add_bias(const Var& x, const Var& b) {
  if (b->val.numel() != x->val.last_dim())
    throw ShapeMismatch("add_bias: bias size mismatch");
  Tensor out = x->val;
  out.mat().rowwise() += b->val.data.transpose();
  return make_op(std::move(out), {x, b}, [](Node& self) {
    if (self.parents[0]->requires_grad)
      self.parents[0]->g().data += self.grad.data;
    if (self.parents[1]->requires_grad)
      self.parents[1]->g().data += self.grad.mat().colwise().sum().transpose();
  });
}

Var mul_bcast_col(const Var& x, const Var& s) {
  if (s->val.numel() != x->val.rows())
    throw ShapeMismatch("mul_bcast_col: scale size mismatch");
  Tensor out = x->val;
  out.mat().array().colwise() *= s->val.data.array();
  return make_op(std::move(out), {x, s}, [](Node& self) {
    auto& x = self.parents[0];
    auto& s = self.parents[1];
    if (x->requires_grad)
      x->g().mat().array() +=
          self.grad.mat().array().colwise() * s->val.data.array();
    if (s->requires_grad)
      s->g().data.array() += (self.grad.mat().array() * x->val.mat().array())
                                 .rowwise()
                                 .sum();
  });
}

Var div_bcast_col(const Var& x, const Var& s) {
  if (s->val.numel() != x->val.rows())
    throw ShapeMismatch("div_bcast_col: scale size mismatch");
  Tensor out = x->val;
  out.mat().array().colwise() /= s->val.data.array();
  return make_op(std::move(out), {x, s}, [](Node& self) {
    auto& x = self.parents[0];
    auto& s = self.parents[1];
    if (x->requires_grad)
      x->g().mat().array() +=
          self.grad.mat().array().colwise() / s->val.data.array();
    if (s->requires_grad)
      s->g().data.array() -=
          (self.grad.mat().array() * self.val.mat().array()).rowwise().sum() /
          s->val.data.array();
  });
}

Var mul_bcast_lastdim(const Var& x, const Var& a) { return mul_bcast_col(x, a); }

Var relu(const Var& x) {
  Tensor out = x->val;
  out.data = out.data.cwiseMax(0.0);
  return make_op(std::move(out), {x}, [](Node& self) {
    self.parents[0]->g().data.array() +=
        self.grad.data.array() *
        (self.parents[0]->val.data.array() > 0.0).cast<double>();
  });
}

Var gelu(const Var& x) {
  Tensor out = x->val;
  out.data = x->val.data.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865476));
  });
  return make_op(std::move(out), {x}, [](Node& self) {
    self.parents[0]->g().data.array() +=
        self.grad.data.array() *
        self.parents[0]->val.data.unaryExpr([](double v) {
          return 0.5 * (1.0 + std::erf(v * 0.7071067811865476)) +
                 v * 0.3989422804014327 * std::exp(-0.5 * v * v);
        }).array();
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x->val;
  out.data = 1.0 / (1.0 + (-x->val.data.array()).exp());
  return make_op(std::move(out), {x}, [](Node& self) {
    const auto y = self.val.data.array();
    self.parents[0]->g().data.array() += self.grad.data.array() * y * (1 - y);
  });
}

// --------------------------------------------------------------------- shape

Var reshape(const Var& x, std::vector<int> shape) {
  if (Tensor::count(shape) != x->val.numel())
    throw ShapeMismatch("reshape: element count mismatch");
  Tensor out = x->val;
  out.shape = std::move(shape);
  return make_op(std::move(out), {x}, [](Node& self) {
    self.parents[0]->g().data += self.grad.data;
  });
}

Var slice_rows(const Var& x, int64_t r0, int64_t r1) {
  const int c = x->val.last_dim();
  Tensor out({int(r1 - r0), c});
  out.mat() = x->val.mat().middleRows(r0, r1 - r0);
  return make_op(std::move(out), {x}, [r0, r1](Node& self) {
    self.parents[0]->g().mat().middleRows(r0, r1 - r0) += self.grad.mat();
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  const int c = xs[0]->val.last_dim();
  int64_t r = 0;
  for (const auto& x : xs) {
    if (x->val.last_dim() != c) throw ShapeMismatch("concat_rows: width");
    r += x->val.rows();
  }
  Tensor out({int(r), c});
  int64_t at = 0;
  for (const auto& x : xs) {
    out.mat().middleRows(at, x->val.rows()) = x->val.mat();
    at += x->val.rows();
  }
  return make_op(std::move(out), xs, [](Node& self) {
    int64_t at = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad)
        p->g().mat() += self.grad.mat().middleRows(at, p->val.rows());
      at += p->val.rows();
    }
  });
}

Var slice_cols(const Var& x, int c0, int c1) {
  Tensor out({int(x->val.rows()), c1 - c0});
  out.mat() = x->val.mat().middleCols(c0, c1 - c0);
  return make_op(std::move(out), {x}, [c0, c1](Node& self) {
    self.parents[0]->g().mat().middleCols(c0, c1 - c0) += self.grad.mat();
  });
}

Var concat_cols(const std::vector<Var>& xs) {
  const int64_t r = xs[0]->val.rows();
  int c = 0;
  for (const auto& x : xs) {
    if (x->val.rows() != r) throw ShapeMismatch("concat_cols: rows");
    c += x->val.last_dim();
  }
  Tensor out({int(r), c});
  int at = 0;
  for (const auto& x : xs) {
    out.mat().middleCols(at, x->val.last_dim()) = x->val.mat();
    at += x->val.last_dim();
  }
  return make_op(std::move(out), xs, [](Node& self) {
    int at = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad)
        p->g().mat() += self.grad.mat().middleCols(at, p->val.last_dim());
      at += p->val.last_dim();
    }
  });
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b) {
  if (a->val.last_dim() != int(b->val.rows()))
    throw ShapeMismatch("matmul: inner dims");
  Tensor out({int(a->val.rows()), b->val.last_dim()});
  out.mat().noalias() = a->val.mat() * b->val.mat();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad)
      a->g().mat().noalias() += self.grad.mat() * b->val.mat().transpose();
    if (b->requires_grad)
      b->g().mat().noalias() += a->val.mat().transpose() * self.grad.mat();
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a->val.last_dim() != b->val.last_dim())
    throw ShapeMismatch("matmul_nt: inner dims");
  Tensor out({int(a->val.rows()), int(b->val.rows())});
  out.mat().noalias() = a->val.mat() * b->val.mat().transpose();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad)
      a->g().mat().noalias() += self.grad.mat() * b->val.mat();
    if (b->requires_grad)
      b->g().mat().noalias() += self.grad.mat().transpose() * a->val.mat();
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x->val.last_dim() != int(w->val.rows()) ||
      b->val.numel() != w->val.last_dim())
    throw ShapeMismatch("linear: dims");
  std::vector<int> shape = x->val.shape;
  shape.back() = w->val.last_dim();
  Tensor out(std::move(shape));
  out.mat().noalias() = x->val.mat() * w->val.mat();
  out.mat().rowwise() += b->val.data.transpose();
  return make_op(std::move(out), {x, w, b}, [](Node& self) {
    auto& x = self.parents[0];
    auto& w = self.parents[1];
    auto& b = self.parents[2];
    if (x->requires_grad)
      x->g().mat().noalias() += self.grad.mat() * w->val.mat().transpose();
    if (w->requires_grad)
      w->g().mat().noalias() += x->val.mat().transpose() * self.grad.mat();
    if (b->requires_grad)
      b->g().data += self.grad.mat().colwise().sum().transpose();
  });
}

Var gather_rows(const Var& table, const std::vector<int>& idx) {
  const int c = table->val.last_dim();
  Tensor out({int(idx.size()), c});
  for (size_t i = 0; i < idx.size(); ++i)
    out.mat().row(int64_t(i)) = table->val.mat().row(idx[i]);
  return make_op(std::move(out), {table}, [idx](Node& self) {
    for (size_t i = 0; i < idx.size(); ++i)
      self.parents[0]->g().mat().row(idx[i]) += self.grad.mat().row(int64_t(i));
  });
}

// ------------------------------------------------------ reductions and norms

Var sum(const Var& x) {
  Tensor out = Tensor::scalar(x->val.data.sum());
  return make_op(std::move(out), {x}, [](Node& self) {
    self.parents[0]->g().data.array() += self.grad.data[0];
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / double(x->val.numel())); }

Var row_sum(const Var& x) {
  Tensor out({int(x->val.rows()), 1});
  out.data = x->val.mat().rowwise().sum();
  return make_op(std::move(out), {x}, [](Node& self) {
    self.parents[0]->g().mat().array().colwise() += self.grad.data.array();
  });
}

Var row_norm(const Var& x, double eps) {
  Tensor out({int(x->val.rows()), 1});
  out.data = (x->val.mat().rowwise().squaredNorm().array() + eps).sqrt();
  return make_op(std::move(out), {x}, [](Node& self) {
    // d|x|/dx = x / |x| per row
    self.parents[0]->g().mat().array() +=
        self.parents[0]->val.mat().array().colwise() *
        (self.grad.data.array() / self.val.data.array());
  });
}

Var row_dot(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw ShapeMismatch("row_dot: shapes");
  Tensor out({int(a->val.rows()), 1});
  out.data = (a->val.mat().array() * b->val.mat().array()).rowwise().sum();
  return make_op(std::move(out), {a, b}, [](Node& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    if (a->requires_grad)
      a->g().mat().array() +=
          b->val.mat().array().colwise() * self.grad.data.array();
    if (b->requires_grad)
      b->g().mat().array() +=
          a->val.mat().array().colwise() * self.grad.data.array();
  });
}

Var cross_rows(const Var& a, const Var& b) {
  if (a->val.last_dim() != 3 || !a->val.same_shape(b->val))
    throw ShapeMismatch("cross_rows: need [*, 3]");
  Tensor out(a->val.shape);
  auto am = a->val.mat(), bm = b->val.mat();
  auto om = out.mat();
  om.col(0) = am.col(1).cwiseProduct(bm.col(2)) -
              am.col(2).cwiseProduct(bm.col(1));
  om.col(1) = am.col(2).cwiseProduct(bm.col(0)) -
              am.col(0).cwiseProduct(bm.col(2));
  om.col(2) = am.col(0).cwiseProduct(bm.col(1)) -
              am.col(1).cwiseProduct(bm.col(0));
  return make_op(std::move(out), {a, b}, [](Node& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    auto am = a->val.mat(), bm = b->val.mat(), gm = self.grad.mat();
    // c = a x b: da += b x dc, db += dc x a (rowwise)
    if (a->requires_grad) {
      auto ag = a->g().mat();
      ag.col(0) += bm.col(1).cwiseProduct(gm.col(2)) -
                   bm.col(2).cwiseProduct(gm.col(1));
      ag.col(1) += bm.col(2).cwiseProduct(gm.col(0)) -
                   bm.col(0).cwiseProduct(gm.col(2));
      ag.col(2) += bm.col(0).cwiseProduct(gm.col(1)) -
                   bm.col(1).cwiseProduct(gm.col(0));
    }
    if (b->requires_grad) {
      auto bg = b->g().mat();
      bg.col(0) += gm.col(1).cwiseProduct(am.col(2)) -
                   gm.col(2).cwiseProduct(am.col(1));
      bg.col(1) += gm.col(2).cwiseProduct(am.col(0)) -
                   gm.col(0).cwiseProduct(am.col(2));
      bg.col(2) += gm.col(0).cwiseProduct(am.col(1)) -
                   gm.col(1).cwiseProduct(am.col(0));
    }
  });
}

Var softmax_rows(const Var& x) {
  Tensor out = x->val;
  auto m = out.mat();
  for (int64_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r).array();
    row -= row.maxCoeff();
    row = row.exp();
    row /= row.sum();
  }
  return make_op(std::move(out), {x}, [](Node& self) {
    auto y = self.val.mat().array();
    auto g = self.grad.mat().array();
    self.parents[0]->g().mat().array() +=
        y * (g.colwise() - (g * y).rowwise().sum());
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int c = x->val.last_dim();
  if (gamma->val.numel() != c || beta->val.numel() != c)
    throw ShapeMismatch("layer_norm: param size");
  auto xhat = std::make_shared<Tensor>(x->val.shape);
  auto inv_std = std::make_shared<Eigen::VectorXd>();  // inverse std per row
  auto xm = x->val.mat();
  Eigen::VectorXd mu = xm.rowwise().mean();
  Eigen::VectorXd var =
      (xm.colwise() - mu).array().square().rowwise().mean();
  *inv_std = (var.array() + eps).rsqrt();
  xhat->mat() = ((xm.colwise() - mu).array().colwise() * inv_std->array());
  Tensor out(x->val.shape);
  out.mat() = (xhat->mat().array().rowwise() *
               gamma->val.data.transpose().array())
                  .rowwise() +
              beta->val.data.transpose().array();
  return make_op(std::move(out), {x, gamma, beta},
                 [xhat, inv_std, c](Node& self) {
                   auto& x = self.parents[0];
                   auto& gamma = self.parents[1];
                   auto& beta = self.parents[2];
                   auto g = self.grad.mat().array();
                   auto xh = xhat->mat().array();
                   if (gamma->requires_grad)
                     gamma->g().data += (g * xh).colwise().sum().matrix()
                                            .transpose();
                   if (beta->requires_grad)
                     beta->g().data += g.colwise().sum().matrix().transpose();
                   if (x->requires_grad) {
                     Eigen::ArrayXXd dxh =
                         g.rowwise() * gamma->val.data.transpose().array();
                     Eigen::VectorXd m1 = dxh.rowwise().mean();
                     Eigen::VectorXd m2 = (dxh * xh).rowwise().mean();
                     x->g().mat().array() +=
                         ((dxh.colwise() - m1.array()) -
                          (xh.colwise() * m2.array()))
                             .colwise() *
                         inv_std->array();
                   }
                 });
}

Var masked_l1(const Var& x, const Tensor& target, const Tensor& row_mask,
              double factor) {
  if (!x->val.same_shape(target)) throw ShapeMismatch("masked_l1: target");
  const bool masked = row_mask.numel() > 0;
  if (masked && row_mask.numel() != x->val.rows())
    throw ShapeMismatch("masked_l1: mask rows");
  Eigen::ArrayXXd diff = x->val.mat().array() - target.mat().array();
  double v = 0;
  if (masked)
    v = (diff.abs().rowwise().sum() * row_mask.data.array()).sum();
  else
    v = diff.abs().sum();
  auto t = std::make_shared<Tensor>(target);
  auto m = std::make_shared<Tensor>(row_mask);
  return make_op(Tensor::scalar(factor * v), {x},
                 [t, m, factor, masked](Node& self) {
                   const double s = factor * self.grad.data[0];
                   Eigen::ArrayXXd sg = (self.parents[0]->val.mat().array() -
                                         t->mat().array())
                                            .sign();
                   if (masked) sg.colwise() *= m->data.array();
                   self.parents[0]->g().mat().array() += s * sg;
                 });
}

Var varifocal_ce(const Var& logits, const Tensor& gt, double factor) {
  if (!logits->val.same_shape(gt)) throw ShapeMismatch("varifocal_ce: gt");
  Eigen::ArrayXd s = 1.0 / (1.0 + (-logits->val.data.array()).exp());
  const double v =
      -(gt.data.array() * s.max(1e-12).log()).sum() * factor;
  auto target = std::make_shared<Tensor>(gt);
  return make_op(Tensor::scalar(v), {logits}, [target, factor](Node& self) {
    Eigen::ArrayXd s =
        1.0 / (1.0 + (-self.parents[0]->val.data.array()).exp());
    // d/dl of -gt*log(s) = -gt*(1-s); clamped region contributes zero grad
    Eigen::ArrayXd dl = -target->data.array() * (1.0 - s) *
                        (s > 1e-12).cast<double>();
    self.parents[0]->g().data.array() += factor * self.grad.data[0] * dl;
  });
}

// ---------------------------------------------------------- attention / conv

Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads,
                        Tensor* attn_out) {
  if (q->val.shape.size() != 3 || k->val.shape.size() != 3 ||
      v->val.shape.size() != 3)
    throw ShapeMismatch("multihead_attention: need [B, T, D]");
  const int b = q->val.dim(0), tq = q->val.dim(1), d = q->val.dim(2);
  const int tk = k->val.dim(1);
  if (k->val.dim(0) != b || v->val.dim(0) != b || v->val.dim(1) != tk ||
      k->val.dim(2) != d || v->val.dim(2) != d || d % heads != 0)
    throw ShapeMismatch("multihead_attention: inconsistent shapes");
  const int dh = d / heads;
  const double sc = 1.0 / std::sqrt(double(dh));

  auto attn = std::make_shared<Tensor>(
      std::vector<int>{b, heads, tq, tk});
  Tensor out({b, tq, d});
  auto qm = q->val.mat(), km = k->val.mat(), vm = v->val.mat();
  auto om = out.mat();
  for (int bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      auto qh = qm.block(int64_t(bi) * tq, h * dh, tq, dh);
      auto kh = km.block(int64_t(bi) * tk, h * dh, tk, dh);
      auto vh = vm.block(int64_t(bi) * tk, h * dh, tk, dh);
      MatMap a(attn->data.data() + ((int64_t(bi) * heads + h) * tq) * tk, tq,
               tk);
      a.noalias() = sc * (qh * kh.transpose());
      for (int r = 0; r < tq; ++r) {
        auto row = a.row(r).array();
        row -= row.maxCoeff();
        row = row.exp();
        row /= row.sum();
      }
      om.block(int64_t(bi) * tq, h * dh, tq, dh).noalias() = a * vh;
    }
  }
  if (attn_out) *attn_out = *attn;
  return make_op(
      std::move(out), {q, k, v}, [attn, heads, sc](Node& self) {
        auto& q = self.parents[0];
        auto& k = self.parents[1];
        auto& v = self.parents[2];
        const int b = q->val.dim(0), tq = q->val.dim(1), d = q->val.dim(2);
        const int tk = k->val.dim(1), dh = d / heads;
        auto qm = q->val.mat(), km = k->val.mat(), vm = v->val.mat();
        auto gm = self.grad.mat();
        for (int bi = 0; bi < b; ++bi) {
          for (int h = 0; h < heads; ++h) {
            CMatMap a(attn->data.data() +
                          ((int64_t(bi) * heads + h) * tq) * tk,
                      tq, tk);
            auto qh = qm.block(int64_t(bi) * tq, h * dh, tq, dh);
            auto kh = km.block(int64_t(bi) * tk, h * dh, tk, dh);
            auto vh = vm.block(int64_t(bi) * tk, h * dh, tk, dh);
            auto go = gm.block(int64_t(bi) * tq, h * dh, tq, dh);
            MatX da = go * vh.transpose();                    // [tq, tk]
            Eigen::VectorXd rs = (da.array() * a.array()).rowwise().sum();
            MatX ds = a.array() * (da.colwise() - rs).array();
            if (q->requires_grad)
              q->g().mat().block(int64_t(bi) * tq, h * dh, tq, dh).noalias() +=
                  sc * (ds * kh);
            if (k->requires_grad)
              k->g().mat().block(int64_t(bi) * tk, h * dh, tk, dh).noalias() +=
                  sc * (ds.transpose() * qh);
            if (v->requires_grad)
              v->g().mat().block(int64_t(bi) * tk, h * dh, tk, dh).noalias() +=
                  a.transpose() * go;
          }
        }
      });
}

Var depthwise_conv2d(const Var& x, const Var& kernel, int stride, int pad) {
  if (x->val.shape.size() != 4)
    throw ShapeMismatch("depthwise_conv2d: need [B, H, W, C]");
  const int b = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2),
            c = x->val.dim(3);
  const bool dynamic = kernel->val.shape.size() == 4;
  const int kh = kernel->val.dim(dynamic ? 1 : 0);
  const int kw = kernel->val.dim(dynamic ? 2 : 1);
  if (kernel->val.last_dim() != c || (dynamic && kernel->val.dim(0) != b))
    throw ShapeMismatch("depthwise_conv2d: kernel shape");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (w + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeMismatch("depthwise_conv2d: output empty");

  Tensor out({b, ho, wo, c});
  auto xm = x->val.mat();
  auto km = kernel->val.mat();  // [(b*)kh*kw, c]
  auto om = out.mat();
  for (int bi = 0; bi < b; ++bi) {
    const int64_t kbase = dynamic ? int64_t(bi) * kh * kw : 0;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        auto orow = om.row((int64_t(bi) * ho + oy) * wo + ox);
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= w) continue;
            orow.array() +=
                xm.row((int64_t(bi) * h + iy) * w + ix).array() *
                km.row(kbase + ky * kw + kx).array();
          }
        }
      }
  }
  return make_op(
      std::move(out), {x, kernel},
      [stride, pad, dynamic, kh, kw](Node& self) {
        auto& x = self.parents[0];
        auto& kernel = self.parents[1];
        const int b = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
        const int ho = self.val.dim(1), wo = self.val.dim(2);
        auto xm = x->val.mat();
        auto km = kernel->val.mat();
        auto gm = self.grad.mat();
        for (int bi = 0; bi < b; ++bi) {
          const int64_t kbase = dynamic ? int64_t(bi) * kh * kw : 0;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              auto grow = gm.row((int64_t(bi) * ho + oy) * wo + ox);
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride + kx - pad;
                  if (ix < 0 || ix >= w) continue;
                  const int64_t xrow = (int64_t(bi) * h + iy) * w + ix;
                  if (x->requires_grad)
                    x->g().mat().row(xrow).array() +=
                        grow.array() * km.row(kbase + ky * kw + kx).array();
                  if (kernel->requires_grad)
                    kernel->g().mat().row(kbase + ky * kw + kx).array() +=
                        grow.array() * xm.row(xrow).array();
                }
              }
            }
        }
      });
}

Var batched_rowdot(const Var& x, const Var& w) {
  if (x->val.shape.size() != 3 || w->val.shape.size() != 2 ||
      x->val.dim(0) != w->val.dim(0) || x->val.dim(2) != w->val.dim(1))
    throw ShapeMismatch("batched_rowdot: shapes");
  const int b = x->val.dim(0), t = x->val.dim(1);
  Tensor out({b, t});
  auto xm = x->val.mat();
  auto wm = w->val.mat();
  for (int bi = 0; bi < b; ++bi)
    out.mat().row(bi) =
        (xm.middleRows(int64_t(bi) * t, t) * wm.row(bi).transpose())
            .transpose();
  return make_op(std::move(out), {x, w}, [](Node& self) {
    auto& x = self.parents[0];
    auto& w = self.parents[1];
    const int b = x->val.dim(0), t = x->val.dim(1);
    auto xm = x->val.mat();
    auto wm = w->val.mat();
    auto gm = self.grad.mat();
    for (int bi = 0; bi < b; ++bi) {
      if (x->requires_grad)
        x->g().mat().middleRows(int64_t(bi) * t, t).noalias() +=
            gm.row(bi).transpose() * wm.row(bi);
      if (w->requires_grad)
        w->g().mat().row(bi).noalias() +=
            gm.row(bi) * xm.middleRows(int64_t(bi) * t, t);
    }
  });
}

Var slice_seq(const Var& x, int t0, int t1) {
  if (x->val.shape.size() != 3 || t0 < 0 || t1 > x->val.dim(1) || t0 >= t1)
    throw ShapeMismatch("slice_seq: range");
  const int b = x->val.dim(0), t = x->val.dim(1), d = x->val.dim(2);
  const int n = t1 - t0;
  Tensor out({b, n, d});
  for (int bi = 0; bi < b; ++bi)
    out.mat().middleRows(int64_t(bi) * n, n) =
        x->val.mat().middleRows(int64_t(bi) * t + t0, n);
  return make_op(std::move(out), {x}, [t0, n](Node& self) {
    auto& x = self.parents[0];
    if (!x->requires_grad) return;
    const int b = x->val.dim(0), t = x->val.dim(1);
    for (int bi = 0; bi < b; ++bi)
      x->g().mat().middleRows(int64_t(bi) * t + t0, n) +=
          self.grad.mat().middleRows(int64_t(bi) * n, n);
  });
}

Var concat_seq(const Var& a, const Var& b) {
  if (a->val.shape.size() != 3 || b->val.shape.size() != 3 ||
      a->val.dim(0) != b->val.dim(0) || a->val.dim(2) != b->val.dim(2))
    throw ShapeMismatch("concat_seq: shapes");
  const int bs = a->val.dim(0), ta = a->val.dim(1), tb = b->val.dim(1);
  const int d = a->val.dim(2);
  Tensor out({bs, ta + tb, d});
  for (int bi = 0; bi < bs; ++bi) {
    out.mat().middleRows(int64_t(bi) * (ta + tb), ta) =
        a->val.mat().middleRows(int64_t(bi) * ta, ta);
    out.mat().middleRows(int64_t(bi) * (ta + tb) + ta, tb) =
        b->val.mat().middleRows(int64_t(bi) * tb, tb);
  }
  return make_op(std::move(out), {a, b}, [ta, tb](Node& self) {
    auto& a = self.parents[0];
    auto& b = self.parents[1];
    const int bs = a->val.dim(0);
    for (int bi = 0; bi < bs; ++bi) {
      if (a->requires_grad)
        a->g().mat().middleRows(int64_t(bi) * ta, ta) +=
            self.grad.mat().middleRows(int64_t(bi) * (ta + tb), ta);
      if (b->requires_grad)
        b->g().mat().middleRows(int64_t(bi) * tb, tb) +=
            self.grad.mat().middleRows(int64_t(bi) * (ta + tb) + ta, tb);
    }
  });
}

Var seq_mean(const Var& x) {
  if (x->val.shape.size() != 3) throw ShapeMismatch("seq_mean: rank");
  const int b = x->val.dim(0), t = x->val.dim(1), d = x->val.dim(2);
  Tensor out({b, d});
  for (int bi = 0; bi < b; ++bi)
    out.mat().row(bi) =
        x->val.mat().middleRows(int64_t(bi) * t, t).colwise().mean();
  return make_op(std::move(out), {x}, [t](Node& self) {
    auto& x = self.parents[0];
    if (!x->requires_grad) return;
    const int b = x->val.dim(0);
    for (int bi = 0; bi < b; ++bi)
      x->g().mat().middleRows(int64_t(bi) * t, t).rowwise() +=
          self.grad.mat().row(bi) / double(t);
  });
}

}  // namespace pvit6d::nn
