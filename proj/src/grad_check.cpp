#include "normfree/grad_check.hpp"

#include <cmath>
#include <sstream>

namespace normfree {

std::string GradCheckReport::describe() const {
  std::ostringstream out;
  out.precision(6);
  if (non_finite_index) {
    out << "non-finite gradient at element " << *non_finite_index;
    return out.str();
  }
  out << "max rel-err " << max_rel_error << " at element " << worst_index << " (tape " << tape_grad_at_worst
      << ", numeric " << numeric_grad_at_worst << ")";
  return out.str();
}

GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, Tensor x, const GradCheckOptions& options) {
  if (!(options.step > 0)) throw std::invalid_argument("grad_check: step must be positive");

  const bool had_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.drop_grad();

  std::vector<Scalar> analytic;
  {
    Tape tape;
    Tensor y = f(tape);
    backward(y, tape);
    if (x.has_grad()) {
      analytic.assign(x.grad().begin(), x.grad().end());
    } else {
      analytic.assign(static_cast<std::size_t>(x.numel()), 0.0);
    }
  }
  x.drop_grad();

  auto evaluate = [&] {
    Tape tape(false);
    return f(tape).item();
  };

  GradCheckReport report;
  auto values = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Scalar saved = values[i];
    values[i] = saved + options.step;
    const Scalar up = evaluate();
    values[i] = saved - options.step;
    const Scalar down = evaluate();
    values[i] = saved;

    const Scalar numeric = (up - down) / (2.0 * options.step);
    const Scalar a = analytic[i];
    if (!std::isfinite(a) || !std::isfinite(numeric)) {
      report.non_finite_index = static_cast<Index>(i);
      report.passed = false;
      x.set_requires_grad(had_flag);
      return report;
    }
    const Scalar denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
    const Scalar rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error || report.worst_index < 0) {
      report.max_rel_error = rel;
      report.worst_index = static_cast<Index>(i);
      report.tape_grad_at_worst = a;
      report.numeric_grad_at_worst = numeric;
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  x.set_requires_grad(had_flag);
  return report;
}

}  // namespace normfree
