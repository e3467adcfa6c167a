#include "mgnt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mgnt {

namespace {

double evaluate(const ScalarFunction& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
  const Var out = f(tape, vars);
  if (out.rows() != 1 || out.cols() != 1) {
    throw DimensionError("grad_check: function must return 1x1, got " + shape_string(out.value()));
  }
  const double v = out.value()(0, 0);
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFunction& f, std::span<const Tensor> inputs, double step,
                           double tolerance) {
  if (!(step >= 1e-7 && step <= 1e-3)) {
    throw std::invalid_argument("grad_check: step must lie in [1e-7, 1e-3]");
  }
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    const Var out = f(tape, vars);
    if (!std::isfinite(out.value()(0, 0))) {
      throw NumericError("grad_check: non-finite function value");
    }
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(v.grad());
  }

  double gmax = 0.0;
  for (const Tensor& g : analytic) {
    if (!g.allFinite()) throw NumericError("grad_check: non-finite analytic gradient");
    if (g.size() > 0) gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
  }
  const double floor = std::max(1e-12, 1e-3 * gmax);

  GradCheckResult result;
  result.tolerance = tolerance;
  std::vector<Tensor> work(inputs.begin(), inputs.end());
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (Index r = 0; r < work[k].rows(); ++r) {
      for (Index c = 0; c < work[k].cols(); ++c) {
        const double x0 = work[k](r, c);
        work[k](r, c) = x0 + step;
        const double fp = evaluate(f, work);
        work[k](r, c) = x0 - step;
        const double fm = evaluate(f, work);
        work[k](r, c) = x0;
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic[k](r, c);
        const double denom = std::max({std::abs(a), std::abs(numeric), floor});
        const double rel = std::abs(a - numeric) / denom;
        ++result.coordinates;
        if (rel > result.max_relative_error || result.coordinates == 1) {
          result.max_relative_error = std::max(rel, result.max_relative_error);
          if (rel >= result.max_relative_error) {
            result.worst_input = k;
            result.worst_row = r;
            result.worst_col = c;
            result.analytic = a;
            result.numeric = numeric;
          }
        }
      }
    }
  }
  return result;
}

}  // namespace mgnt
