#pragma once

// Plain-loop reference implementations of the training losses. Nothing here
// touches the autograd engine.

#include <cmath>
#include <vector>

#include "dcdnet/tensor.hpp"

namespace oracle {

inline double clamp_prob(double p, double eps = 1e-7) { return p < eps ? eps : (p > 1 - eps ? 1 - eps : p); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// (1/N) sum [log D(s_i) + log(1 - D(t_i))] from domain logits.
inline double adversarial(const std::vector<double>& src_logits, const std::vector<double>& tgt_logits) {
  double a = 0, b = 0;
  for (double l : src_logits) a += std::log(clamp_prob(sigmoid(l)));
  for (double l : tgt_logits) b += std::log(1 - clamp_prob(sigmoid(l)));
  return a / static_cast<double>(src_logits.size()) + b / static_cast<double>(tgt_logits.size());
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Mean InfoNCE where anchor i's positive is row pos[i] and its negatives are
// the bank rows with a different label.
inline double contrastive(const std::vector<std::vector<double>>& z, const std::vector<int>& labels,
                          const std::vector<int>& pos, const std::vector<std::vector<double>>& bank,
                          const std::vector<int>& bank_labels, double tau) {
  double total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = std::exp(dot(z[i], z[static_cast<std::size_t>(pos[i])]) / tau);
    double denom = p;
    for (std::size_t j = 0; j < bank.size(); ++j) {
      if (bank_labels[j] != labels[i]) denom += std::exp(dot(z[i], bank[j]) / tau);
    }
    total += -std::log(p / denom);
  }
  return total / static_cast<double>(z.size());
}

// (1/B) sum ||S^T P||_F^2 / (||S||_F ||P||_F) over [C,H,W] maps.
inline double orthogonality(const std::vector<dcdnet::Tensor>& s, const std::vector<dcdnet::Tensor>& p) {
  double total = 0;
  for (std::size_t b = 0; b < s.size(); ++b) {
    const int cs = s[b].dim(0), cp = p[b].dim(0);
    const int hw = s[b].dim(1) * s[b].dim(2);
    double gram = 0, ns = 0, np = 0;
    for (int i = 0; i < cs; ++i) {
      for (int j = 0; j < cp; ++j) {
        double g = 0;
        for (int k = 0; k < hw; ++k) g += s[b][static_cast<std::size_t>(i * hw + k)] * p[b][static_cast<std::size_t>(j * hw + k)];
        gram += g * g;
      }
    }
    for (double v : s[b].storage()) ns += v * v;
    for (double v : p[b].storage()) np += v * v;
    const double denom = std::sqrt(ns) * std::sqrt(np);
    if (denom >= 1e-8) total += gram / denom;
  }
  return total / static_cast<double>(s.size());
}

inline double composite(double ce, double adv, double cont, double ortho, double wce, double wadv, double wcont,
                        double wortho) {
  return wce * ce + wadv * adv + wcont * cont + wortho * ortho;
}

}  // namespace oracle
