#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pvit6d/nn/tensor.hpp"

namespace pvit6d::nn {

struct Node;
using Var = std::shared_ptr<Node>;

// Reverse-mode tape node. Nodes are created in topological order, so the
// creation id doubles as the traversal key for backward().
struct Node {
  Tensor val;
  Tensor grad;
  bool requires_grad = false;
  bool grad_alloc = false;
  int64_t id = 0;
  std::vector<Var> parents;
  std::function<void(Node&)> backprop;

  Tensor& g() {
    if (!grad_alloc) {
      grad = Tensor::zeros(val.shape);
      grad_alloc = true;
    }
    return grad;
  }
};

Var leaf(Tensor t, bool requires_grad = false);
Var constant(Tensor t);
Var make_op(Tensor val, std::vector<Var> parents,
            std::function<void(Node&)> backprop);

// Accumulates gradients of `root` (a scalar) into every reachable node with
// requires_grad. Grad buffers are not cleared here.
void backward(const Var& root);

// ---- elementwise / broadcast ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_n(const std::vector<Var>& xs);
Var add_bias(const Var& x, const Var& b);        // b broadcast over rows
Var mul_bcast_col(const Var& x, const Var& s);   // s: [rows, 1]
Var div_bcast_col(const Var& x, const Var& s);
Var mul_bcast_lastdim(const Var& x, const Var& a);  // a: [rows], scales rows

Var relu(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);

// ---- shape ----
Var reshape(const Var& x, std::vector<int> shape);
Var slice_rows(const Var& x, int64_t r0, int64_t r1);
Var concat_rows(const std::vector<Var>& xs);
Var slice_cols(const Var& x, int c0, int c1);
Var concat_cols(const std::vector<Var>& xs);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);          // (m,k) x (k,n)
Var matmul_nt(const Var& a, const Var& b);       // a * b^T
Var linear(const Var& x, const Var& w, const Var& b);  // x*w + b
Var gather_rows(const Var& table, const std::vector<int>& idx);

// ---- reductions / norms ----
Var sum(const Var& x);
Var mean(const Var& x);
Var row_sum(const Var& x);                        // [rows, 1]
Var row_norm(const Var& x, double eps = 0.0);     // [rows, 1], L2
Var row_dot(const Var& a, const Var& b);          // [rows, 1]
Var cross_rows(const Var& a, const Var& b);       // rowwise 3-d cross product

Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
               double eps = 1e-6);

// Sum of |x - target| over elements where mask is 1, times `factor`.
// mask must have one entry per row of x (or be empty for all-ones).
Var masked_l1(const Var& x, const Tensor& target, const Tensor& row_mask,
              double factor);

// -sum_i gt_i * log(max(sigmoid(logit_i), 1e-12)), times `factor`.
Var varifocal_ce(const Var& logits, const Tensor& gt, double factor);

// ---- attention / conv ----
// q: [B, Tq, D], k/v: [B, Tk, D]. Returns [B, Tq, D]; the row-softmaxed
// attention [B, heads, Tq, Tk] is written to *attn_out if non-null.
Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads,
                        Tensor* attn_out = nullptr);

// x: [B, H, W, C]; kernel: [kh, kw, C] shared or [B, kh, kw, C] per-sample.
Var depthwise_conv2d(const Var& x, const Var& kernel, int stride, int pad);

// per-batch inner product along the channel axis:
// x: [B, T, C], w: [B, C] -> [B, T]
Var batched_rowdot(const Var& x, const Var& w);

// ---- sequence axis ([B, T, D] tensors) ----
Var slice_seq(const Var& x, int t0, int t1);    // -> [B, t1-t0, D]
Var concat_seq(const Var& a, const Var& b);     // along T
Var seq_mean(const Var& x);                     // -> [B, D]

}  // namespace pvit6d::nn
