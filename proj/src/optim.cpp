#include "normfree/optim.hpp"

#include <cmath>
#include <numbers>

namespace normfree {

Scalar LrSchedule::at(Index step) const {
  if (step <= 0) return 0.0;
  if (step <= warmup) return peak * static_cast<Scalar>(step) / static_cast<Scalar>(warmup);
  if (step >= total) return min_lr;
  const Scalar progress = static_cast<Scalar>(step - warmup) / static_cast<Scalar>(total - warmup);
  return min_lr + 0.5 * (peak - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_update(std::span<Scalar> w, std::span<const Scalar> g, std::span<Scalar> m, std::span<Scalar> v, Index t,
                  Scalar lr, const AdamWHyper& hyper, bool decay) {
  const Scalar bc1 = 1.0 - std::pow(hyper.beta1, static_cast<Scalar>(t));
  const Scalar bc2 = 1.0 - std::pow(hyper.beta2, static_cast<Scalar>(t));
  const Scalar wd = decay ? hyper.weight_decay : 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
    v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
    const Scalar m_hat = m[i] / bc1;
    const Scalar v_hat = v[i] / bc2;
    w[i] -= lr * (m_hat / (std::sqrt(v_hat) + hyper.eps) + wd * w[i]);
  }
}

AdamW::AdamW(ParameterSet& params, AdamWHyper hyper) : hyper_(hyper) {
  for (auto& p : params.entries()) {
    const auto n = static_cast<std::size_t>(p.value.numel());
    slots_.push_back(Slot{p.value, std::vector<Scalar>(n, 0.0), std::vector<Scalar>(n, 0.0), p.value.rank() >= 2});
  }
}

void AdamW::step(Index t, Scalar lr) {
  if (t < 1) throw ContractError("AdamW step index must be >= 1");
  for (auto& s : slots_) {
    if (!s.param.has_grad()) continue;
    adamw_update(s.param.data(), std::as_const(s.param).grad(), s.m, s.v, t, lr, hyper_, s.decay);
  }
}

Scalar global_grad_norm(const ParameterSet& params) {
  Scalar sq = 0.0;
  for (const auto& p : params.entries()) {
    if (!p.value.has_grad()) continue;
    for (Scalar g : p.value.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

Scalar clip_grad_norm(ParameterSet& params, Scalar max_norm) {
  const Scalar norm = global_grad_norm(params);
  if (!std::isfinite(norm) || norm <= max_norm) return norm;
  const Scalar factor = max_norm / norm;
  for (auto& p : params.entries()) {
    if (p.value.has_grad()) p.value.grad_array() *= factor;
  }
  return norm;
}

}  // namespace normfree
