#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ercmoe/autodiff.hpp"
#include "ercmoe/errors.hpp"

namespace ercmoe {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t checked = 0;

  bool passed(double tol) const { return max_rel_error < tol; }
};

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
/// turning roundoff into large relative errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

/// Compares tape gradients of a scalar objective against central differences.
///
/// `objective` builds the graph on the tape it is handed and binds each tensor
/// in `params` with Tape::param. Tensors are perturbed in place and restored.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& objective, const std::vector<Tensor*>& params,
                                  double h = 1e-5, bool inject_backward_fault = false) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  for (Tensor* p : params) p->zero_grad();
  {
    Tape tape;
    tape.set_backward_fault(inject_backward_fault);
    Var loss = objective(tape);
    tape.backward(loss);
  }

  auto evaluate = [&]() {
    Tape tape;
    const double v = objective(tape).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
    return v;
  };

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = *params[pi];
    const std::vector<double> analytic = p.has_grad() ? p.grad : std::vector<double>(p.size(), 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double saved = p[k];
      p[k] = saved + h;
      const double up = evaluate();
      p[k] = saved - h;
      const double down = evaluate();
      p[k] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[k], numeric);
      ++report.checked;
      if (report.checked == 1 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = pi;
        report.worst_index = k;
        report.analytic_at_worst = analytic[k];
        report.numeric_at_worst = numeric;
      }
    }
  }
  return report;
}

/// Single-tensor convenience form.
inline GradCheckReport grad_check(const std::function<Var(Tape&, Var)>& f, Tensor& theta, double h = 1e-5) {
  Tensor* ptr = &theta;
  return grad_check([&](Tape& t) { return f(t, t.param(*ptr)); }, {ptr}, h);
}

}  // namespace ercmoe
