#pragma once

#include "normfree/tensor.hpp"

#include <functional>
#include <optional>
#include <string>

namespace normfree {

struct GradCheckReport {
  Scalar max_rel_error = 0.0;
  Index worst_index = -1;
  Scalar tape_grad_at_worst = 0.0;
  Scalar numeric_grad_at_worst = 0.0;
  /// First element whose tape or numeric gradient was non-finite.
  std::optional<Index> non_finite_index;
  bool passed = false;

  std::string describe() const;
};

struct GradCheckOptions {
  Scalar step = 1e-5;
  Scalar tolerance = 1e-4;
  /// Relative error uses max(|tape|, |numeric|, abs_floor) as denominator so
  /// vanishing gradients are judged on an absolute scale.
  Scalar abs_floor = 1e-6;
};

/// Compares the tape gradient of a scalar function with respect to x against
/// central differences (f(x+h) - f(x-h)) / 2h, element by element.
///
/// f is evaluated on a fresh tape each time and must read x (it usually
/// closes over it). x is perturbed in place and restored afterwards.
GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, Tensor x, const GradCheckOptions& options = {});

}  // namespace normfree
