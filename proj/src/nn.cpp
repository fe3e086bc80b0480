#include "dcdnet/nn.hpp"

#include <cmath>

namespace dcdnet::nn {

Parameter::Parameter(std::string name, Tensor init) : name_(std::move(name)), var_(std::move(init), true) {}

void zero_grad(const ParamList& params) {
  for (Parameter* p : params) p->zero_grad();
}

std::uint64_t params_checksum(const ParamList& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Parameter* p : params) h = checksum(p->value().values(), h);
  return h;
}

std::size_t param_count(const ParamList& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->value().size();
  return n;
}

void append(ParamList& into, const ParamList& from) { into.insert(into.end(), from.begin(), from.end()); }

Conv2d::Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng)
    : stride_(stride), pad_(pad) {
  Tensor w({out_ch, in_ch, kernel, kernel});
  const double stddev = std::sqrt(2.0 / (in_ch * kernel * kernel));
  for (double& v : w.values()) v = rng.normal(0.0, stddev);
  weight_ = Parameter(name + ".weight", std::move(w));
  bias_ = Parameter(name + ".bias", Tensor({out_ch}));
}

ag::Var Conv2d::forward(const ag::Var& x) const { return ag::conv2d(x, weight_.var(), bias_.var(), stride_, pad_); }

void Conv2d::zero_init() {
  weight_.mutable_value().fill(0.0);
  bias_.mutable_value().fill(0.0);
}

InstanceNorm::InstanceNorm(const std::string& name, int channels)
    : gamma_(name + ".gamma", Tensor({channels}, 1.0)), beta_(name + ".beta", Tensor({channels})) {}

ag::Var InstanceNorm::forward(const ag::Var& x) const { return ag::instance_norm(x, gamma_.var(), beta_.var()); }

ConvBlock::ConvBlock(const std::string& name, int in_ch, int out_ch, int stride, Rng& rng)
    : conv_(name + ".conv", in_ch, out_ch, 3, stride, 1, rng), norm_(name + ".norm", out_ch) {}

ag::Var ConvBlock::forward(const ag::Var& x) const { return ag::relu(norm_.forward(conv_.forward(x))); }

ParamList ConvBlock::parameters() {
  ParamList p = conv_.parameters();
  append(p, norm_.parameters());
  return p;
}

Linear::Linear(const std::string& name, int in_dim, int out_dim, Rng& rng) {
  Tensor w({out_dim, in_dim});
  const double stddev = std::sqrt(2.0 / in_dim);
  for (double& v : w.values()) v = rng.normal(0.0, stddev);
  weight_ = Parameter(name + ".weight", std::move(w));
  bias_ = Parameter(name + ".bias", Tensor({out_dim}));
}

ag::Var Linear::forward(const ag::Var& x) const { return ag::linear(x, weight_.var(), bias_.var()); }

}  // namespace dcdnet::nn
