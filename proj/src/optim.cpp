#include "dcdnet/optim.hpp"

#include <cmath>

namespace dcdnet::optim {

Sgd::Sgd(nn::ParamList params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (const nn::Parameter* p : params_) velocity_.push_back(Tensor::zeros_like(p->value()));
}

void Sgd::step() {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    nn::Parameter& p = *params_[k];
    if (!p.trainable() || !p.has_grad()) continue;
    const Tensor g = p.grad();
    Tensor& w = p.mutable_value();
    Tensor& v = velocity_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i] + weight_decay_ * w[i];
      w[i] -= lr_ * v[i];
    }
  }
}

Adam::Adam(nn::ParamList params, double lr, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const nn::Parameter* p : params_) {
    m_.push_back(Tensor::zeros_like(p->value()));
    v_.push_back(Tensor::zeros_like(p->value()));
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    nn::Parameter& p = *params_[k];
    if (!p.trainable() || !p.has_grad()) continue;
    const Tensor g = p.grad();
    Tensor& w = p.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + weight_decay_ * w[i];
      m_[k][i] = beta1_ * m_[k][i] + (1 - beta1_) * gi;
      v_[k][i] = beta2_ * v_[k][i] + (1 - beta2_) * gi * gi;
      w[i] -= lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
    }
  }
}

}  // namespace dcdnet::optim
