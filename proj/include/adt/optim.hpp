#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adt/tensor.hpp"

namespace adt {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

inline void zero_grad(ParameterList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

inline double grad_norm(const ParameterList& params) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) s += g * g;
  }
  return std::sqrt(s);
}

// Rescales all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm.
inline double clip_grad_norm(ParameterList& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double c = max_norm / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.mutable_grad()) g *= c;
    }
  }
  return norm;
}

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Adam with decoupled weight decay: p <- p - lr * (wd * p + m_hat / (sqrt(v_hat) + eps)).
class AdamW {
 public:
  AdamW(ParameterList params, AdamWOptions options) : params_(std::move(params)), options_(options) {
    validate_lr(options_.lr);
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }

  void step() { step(options_.lr); }

  void step(double lr) {
    validate_lr(lr);
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i].tensor;
      auto values = p.mutable_data();
      const bool has_grad = p.has_grad();
      const auto grads = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < values.size(); ++j) {
        const double g = has_grad ? grads[j] : 0.0;
        m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g;
        v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g * g;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        values[j] -= lr * options_.weight_decay * values[j];
        values[j] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
      }
    }
  }

  void zero_grad() { adt::zero_grad(params_); }
  ParameterList& parameters() { return params_; }
  std::size_t step_count() const { return t_; }
  const AdamWOptions& options() const { return options_; }

 private:
  static void validate_lr(double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("adamw: learning rate must be > 0, got " + std::to_string(lr));
  }

  ParameterList params_;
  AdamWOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// Linear warmup to base_lr over warmup_steps, then constant.
inline double warmup_lr(double base_lr, std::size_t step, std::size_t warmup_steps) {
  if (warmup_steps == 0) return base_lr;
  return base_lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup_steps));
}

}  // namespace adt
