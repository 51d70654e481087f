#pragma once

#include <cmath>
#include <vector>

#include "pvit6d/nn/ops.hpp"

namespace pvit6d::nn {

// Clips the global L2 norm of the given gradients in place; returns the
// pre-clip norm.
double clip_grad_norm(const std::vector<Var>& params, double max_norm);

void zero_grads(const std::vector<Var>& params);

// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW(std::vector<Var> params, double lr, double weight_decay,
        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t step_count() const { return step_; }

  void step();

  // Exposed for checkpointing.
  std::vector<Tensor>& m() { return m_; }
  std::vector<Tensor>& v() { return v_; }
  const std::vector<Tensor>& m() const { return m_; }
  const std::vector<Tensor>& v() const { return v_; }
  void set_step(int64_t s) { step_ = s; }
  const std::vector<Var>& params() const { return params_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  int64_t step_ = 0;
};

// Piecewise-linear schedule: 0 -> base_lr over `warmup` epochs, then linear
// decay to 0 at `max_epochs`. Continuous, maximal at end of warmup.
double linear_warmup_decay(double base_lr, double epoch, double warmup,
                           double max_epochs);

}  // namespace pvit6d::nn
