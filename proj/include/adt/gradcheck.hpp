#pragma once

// Central finite-difference check of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>

#include "adt/optim.hpp"
#include "adt/tensor.hpp"

namespace adt {

using LossFn = std::function<Tensor(Tape&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// |a - b| / max(|a|, |b|, floor). The floor keeps entries whose true gradient
// is ~0 from dividing roundoff by roundoff.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double evaluate_loss(const LossFn& f) {
  Tape tape;
  return f(tape).item();
}

inline GradCheckResult gradcheck(const LossFn& f, ParameterList params, double h = 1e-5, double floor = 1e-6) {
  zero_grad(params);
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
  }
  GradCheckResult r;
  for (auto& p : params) {
    auto values = p.tensor.mutable_data();
    std::vector<double> analytic(values.size(), 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = evaluate_loss(f);
      values[i] = orig - h;
      const double down = evaluate_loss(f);
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[i], numeric, floor));
      r.max_abs_error = std::max(r.max_abs_error, std::abs(analytic[i] - numeric));
      ++r.checked;
    }
  }
  return r;
}

}  // namespace adt
