#pragma once

#include "mgnt/tensor.hpp"

#include <functional>
#include <span>
#include <vector>

namespace mgnt {

/// Builds a scalar (1x1) output on the given tape from leaf variables that
/// hold `inputs`, in order.
using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  std::size_t worst_input = 0;
  Index worst_row = 0;
  Index worst_col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;

  bool passed() const { return max_relative_error < tolerance; }
};

/// Compares the reverse-mode gradient of f against central differences on
/// every input coordinate. The relative error of a coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor) where floor is
/// 1e-3 times the largest analytic gradient magnitude (and at least 1e-12),
/// so coordinates with vanishing gradient are compared on the gradient's
/// overall scale. Throws NumericError on non-finite evaluations.
GradCheckResult grad_check(const ScalarFunction& f, std::span<const Tensor> inputs,
                           double step = 1e-5, double tolerance = 1e-5);

}  // namespace mgnt
