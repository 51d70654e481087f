#include "pvit6d/nn/optim.hpp"

namespace pvit6d::nn {

double clip_grad_norm(const std::vector<Var>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p->grad_alloc) sq += p->grad.data.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      if (p->grad_alloc) p->grad.data *= s;
  }
  return norm;
}

void zero_grads(const std::vector<Var>& params) {
  for (const auto& p : params)
    if (p->grad_alloc) p->grad.data.setZero();
}

AdamW::AdamW(std::vector<Var> params, double lr, double weight_decay,
             double beta1, double beta2, double eps)
    : params_(std::move(params)),
      lr_(lr),
      wd_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p->val.shape));
    v_.push_back(Tensor::zeros(p->val.shape));
  }
}

void AdamW::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, double(step_));
  const double bc2 = 1.0 - std::pow(beta2_, double(step_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p->grad_alloc) continue;
    const auto g = p->grad.data.array();
    m_[i].data.array() = beta1_ * m_[i].data.array() + (1 - beta1_) * g;
    v_[i].data.array() =
        beta2_ * v_[i].data.array() + (1 - beta2_) * g.square();
    p->val.data.array() -=
        lr_ * ((m_[i].data.array() / bc1) /
                   ((v_[i].data.array() / bc2).sqrt() + eps_) +
               wd_ * p->val.data.array());
  }
}

double linear_warmup_decay(double base_lr, double epoch, double warmup,
                           double max_epochs) {
  if (epoch < warmup) return base_lr * epoch / warmup;
  if (epoch >= max_epochs) return 0.0;
  return base_lr * (max_epochs - epoch) / (max_epochs - warmup);
}

}  // namespace pvit6d::nn
