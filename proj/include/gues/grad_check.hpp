#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gues/tensor.hpp"

namespace gues {

struct GradCheckReport {
  std::vector<double> relative_error;  // per element; NaN where excluded
  std::vector<Index> excluded;         // nondifferentiable points skipped
  double max_relative_error = 0.0;
  Index worst_index = -1;
  bool passed = true;
};

/// Scalar function of one tensor. It is evaluated both on a recording graph
/// (for the autodiff gradient) and without one (for finite differences).
using ScalarFn = std::function<Tensor(const Tensor&)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor: error = |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Elements for which this returns true are skipped (kinks).
  std::function<bool(Index, double)> exclude;
  /// When positive, an element whose central difference fails the tolerance
  /// is excluded instead if its one-sided slopes disagree by more than this
  /// fraction: the perturbation straddles a nondifferentiable point.
  double kink_tolerance = 0.0;
};

/// Compares reverse-mode gradients against central differences
/// (f(x + h e_i) - f(x - h e_i)) / 2h for every element of `x`.
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& opts = {});

/// Same comparison, but for gradients with respect to every tensor in
/// `params` while `loss` closes over them. Parameters are perturbed in place
/// and restored.
GradCheckReport grad_check_params(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                  const GradCheckOptions& opts = {});

}  // namespace gues
