#pragma once

#include <vector>

#include "dcdnet/nn.hpp"

namespace dcdnet::optim {

// Heavy-ball SGD: v <- mu*v + (g + wd*p); p <- p - lr*v.
class Sgd {
 public:
  Sgd(nn::ParamList params, double lr, double momentum = 0.0, double weight_decay = 0.0);
  void step();
  void zero_grad() { nn::zero_grad(params_); }
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  const nn::ParamList& params() const { return params_; }

 private:
  nn::ParamList params_;
  std::vector<Tensor> velocity_;
  double lr_, momentum_, weight_decay_;
};

// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(nn::ParamList params, double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step();
  void zero_grad() { nn::zero_grad(params_); }
  void set_lr(double lr) { lr_ = lr; }
  const nn::ParamList& params() const { return params_; }

 private:
  nn::ParamList params_;
  std::vector<Tensor> m_, v_;
  double lr_, weight_decay_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace dcdnet::optim
