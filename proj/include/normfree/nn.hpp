#pragma once

#include "normfree/ops.hpp"
#include "normfree/tensor.hpp"

#include <optional>
#include <string>
#include <string_view>

namespace normfree {

enum class NormMode { PreLN, NormFree };

enum class ActivationType { Gelu, Relu, LeakyFixed, LeakyLearnableLayerwise, LeakyLearnableGlobal };

/// FFN nonlinearity. slope is the fixed negative slope for LeakyFixed and the
/// initial value for the learnable variants.
struct ActivationKind {
  ActivationType type = ActivationType::Gelu;
  Scalar slope = 0.0;

  static ActivationKind gelu() { return {ActivationType::Gelu, 0.0}; }
  static ActivationKind relu() { return {ActivationType::Relu, 0.0}; }
  static ActivationKind leaky_fixed(Scalar alpha) { return {ActivationType::LeakyFixed, alpha}; }
  static ActivationKind leaky_layerwise(Scalar init = 0.0) { return {ActivationType::LeakyLearnableLayerwise, init}; }
  static ActivationKind leaky_global(Scalar init = 0.0) { return {ActivationType::LeakyLearnableGlobal, init}; }

  bool learnable() const {
    return type == ActivationType::LeakyLearnableLayerwise || type == ActivationType::LeakyLearnableGlobal;
  }

  bool operator==(const ActivationKind&) const = default;
};

std::string_view to_string(NormMode mode);
std::string_view to_string(ActivationType type);
std::optional<NormMode> parse_norm_mode(std::string_view name);
std::optional<ActivationType> parse_activation_type(std::string_view name);

/// Per-row standardization with population variance, then gain and bias.
/// Composed from primitive tape ops.
Tensor layernorm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps = 1e-5);

/// Additive {0, -inf} mask, built once per context length.
class CausalMask {
 public:
  explicit CausalMask(Index context);
  Index context() const { return context_; }
  const Tensor& tensor() const { return mask_; }

 private:
  Index context_;
  Tensor mask_;
};

/// Row softmax of scores + mask, with max subtraction. Accepts [t x t] or a
/// stack [g x t x t]. Composed from primitive tape ops.
Tensor causal_softmax(Tape& tape, const Tensor& scores, const CausalMask& mask);

/// Applies the configured activation. slope must be the trainable slope for
/// learnable kinds and is ignored otherwise.
Tensor activate(Tape& tape, const Tensor& x, const ActivationKind& kind, const Tensor* slope = nullptr,
                GeluApprox approx = GeluApprox::Tanh);

}  // namespace normfree
