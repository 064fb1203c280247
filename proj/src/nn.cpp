#include "normfree/nn.hpp"

#include "normfree/kernels.hpp"

#include <array>
#include <utility>

namespace normfree {

namespace {

constexpr std::array<std::pair<NormMode, std::string_view>, 2> kNormNames{{
    {NormMode::PreLN, "pre-ln"},
    {NormMode::NormFree, "none"},
}};

constexpr std::array<std::pair<ActivationType, std::string_view>, 5> kActivationNames{{
    {ActivationType::Gelu, "gelu"},
    {ActivationType::Relu, "relu"},
    {ActivationType::LeakyFixed, "leaky-fixed"},
    {ActivationType::LeakyLearnableLayerwise, "leaky-learnable-layerwise"},
    {ActivationType::LeakyLearnableGlobal, "leaky-learnable-global"},
}};

}  // namespace

std::string_view to_string(NormMode mode) {
  for (const auto& [m, name] : kNormNames)
    if (m == mode) return name;
  return "?";
}

std::string_view to_string(ActivationType type) {
  for (const auto& [t, name] : kActivationNames)
    if (t == type) return name;
  return "?";
}

std::optional<NormMode> parse_norm_mode(std::string_view name) {
  for (const auto& [m, n] : kNormNames)
    if (n == name) return m;
  return std::nullopt;
}

std::optional<ActivationType> parse_activation_type(std::string_view name) {
  for (const auto& [t, n] : kActivationNames)
    if (n == name) return t;
  return std::nullopt;
}

Tensor layernorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps) {
  if (x.cols() < 2) throw DimensionError("layernorm: feature dimension must be >= 2, got " + shape_str(x.shape()));
  if (!(eps > 0)) throw std::invalid_argument("layernorm: eps must be positive");
  Tensor mu = row_mean(tape, x);
  Tensor centered = add_col(tape, x, scale(tape, mu, -1.0));
  Tensor var = row_mean(tape, mul(tape, centered, centered));
  Tensor inv_std = pow(tape, add_scalar(tape, var, eps), -0.5);
  Tensor normed = mul_col(tape, centered, inv_std);
  return add_row(tape, mul_row(tape, normed, gamma), beta);
}

CausalMask::CausalMask(Index context) : context_(context) {
  if (context < 1) throw DimensionError("causal mask needs context >= 1");
  const auto m = kernels::causal_mask<Scalar>(context);
  mask_ = Tensor::from({context, context}, std::vector<Scalar>(m.data(), m.data() + m.size()));
}

Tensor causal_softmax(Tape& tape, const Tensor& scores, const CausalMask& mask) {
  const bool single = scores.rank() == 2;
  if ((scores.rank() != 2 && scores.rank() != 3) || scores.dim(-1) != scores.dim(-2)) {
    throw DimensionError("causal_softmax: scores must be square, got " + shape_str(scores.shape()));
  }
  if (scores.dim(-1) != mask.context()) {
    throw DimensionError("causal_softmax: mask context " + std::to_string(mask.context()) + " vs scores " +
                         shape_str(scores.shape()));
  }
  const Index t = scores.dim(-1);
  Tensor stacked = single ? reshape(tape, scores, {1, t, t}) : scores;
  Tensor masked = add_mask(tape, stacked, mask.tensor());
  Tensor shifted = add_col(tape, masked, scale(tape, row_max_detached(masked), -1.0));
  Tensor e = exp(tape, shifted);
  Tensor probs = mul_col(tape, e, pow(tape, row_sum(tape, e), -1.0));
  return single ? reshape(tape, probs, {t, t}) : probs;
}

Tensor activate(Tape& tape, const Tensor& x, const ActivationKind& kind, const Tensor* slope, GeluApprox approx) {
  switch (kind.type) {
    case ActivationType::Gelu:
      return gelu(tape, x, approx);
    case ActivationType::Relu:
      return relu(tape, x);
    case ActivationType::LeakyFixed:
      return leaky_relu(tape, x, kind.slope);
    case ActivationType::LeakyLearnableLayerwise:
    case ActivationType::LeakyLearnableGlobal:
      if (slope == nullptr || !slope->defined()) throw ContractError("learnable activation needs its slope parameter");
      return leaky_relu(tape, x, *slope);
  }
  throw ContractError("unknown activation kind");
}

}  // namespace normfree
