#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dcdnet/autograd.hpp"
#include "dcdnet/rng.hpp"

namespace dcdnet::nn {

// A named, persistent leaf of the autograd graph. Gradients from every
// backward() accumulate here until zero_grad().
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor init);
  // Copies would alias the same graph leaf.
  Parameter(const Parameter&) = delete;
  Parameter& operator=(const Parameter&) = delete;
  Parameter(Parameter&&) = default;
  Parameter& operator=(Parameter&&) = default;

  const std::string& name() const { return name_; }
  const ag::Var& var() const { return var_; }
  const Tensor& value() const { return var_.value(); }
  Tensor& mutable_value() { return var_.mutable_value(); }
  Tensor grad() const { return var_.grad(); }
  bool has_grad() const { return var_.node()->has_grad(); }
  void zero_grad() { var_.zero_grad(); }

  bool trainable() const { return var_.node()->requires_grad; }
  void set_trainable(bool on) { var_.node()->requires_grad = on; }

 private:
  std::string name_;
  ag::Var var_;
};

using ParamList = std::vector<Parameter*>;

void zero_grad(const ParamList& params);
std::uint64_t params_checksum(const ParamList& params);
std::size_t param_count(const ParamList& params);
void append(ParamList& into, const ParamList& from);

// He-normal weights, zero bias.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng);

  ag::Var forward(const ag::Var& x) const;
  void zero_init();

  int in_channels() const { return weight_.value().dim(1); }
  int out_channels() const { return weight_.value().dim(0); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  ParamList parameters() { return {&weight_, &bias_}; }

 private:
  Parameter weight_;
  Parameter bias_;
  int stride_ = 1;
  int pad_ = 0;
};

class InstanceNorm {
 public:
  InstanceNorm() = default;
  InstanceNorm(const std::string& name, int channels);
  ag::Var forward(const ag::Var& x) const;
  ParamList parameters() { return {&gamma_, &beta_}; }

 private:
  Parameter gamma_;
  Parameter beta_;
};

// 3x3 conv (padding 1), instance norm, ReLU.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(const std::string& name, int in_ch, int out_ch, int stride, Rng& rng);
  ag::Var forward(const ag::Var& x) const;
  ParamList parameters();

 private:
  Conv2d conv_;
  InstanceNorm norm_;
};

class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_dim, int out_dim, Rng& rng);
  ag::Var forward(const ag::Var& x) const;
  ParamList parameters() { return {&weight_, &bias_}; }

 private:
  Parameter weight_;
  Parameter bias_;
};

}  // namespace dcdnet::nn
