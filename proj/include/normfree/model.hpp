#pragma once

#include "normfree/nn.hpp"
#include "normfree/tensor.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace normfree {

/// Architecture of a decoder-only transformer. One record fully determines
/// the parameter layout and the forward computation.
struct ModelConfig {
  Index layers = 4;
  Index heads = 4;
  Index dim = 128;
  Index context = 64;
  Index vocab = 256;
  NormMode norm = NormMode::PreLN;
  ActivationKind act = ActivationKind::gelu();
  Index ffn_mult = 4;
  bool bias = true;
  GeluApprox gelu_approx = GeluApprox::Tanh;
  Scalar ln_eps = 1e-5;
  Scalar init_std = 0.02;
  std::uint64_t seed = 0;

  Index head_dim() const { return dim / heads; }
  Index ffn_hidden() const { return ffn_mult * dim; }

  /// Throws ConfigError. layers == 0 is accepted (embedding-only model).
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Closed-form parameter count for a configuration.
Index expected_parameter_count(const ModelConfig& config);

struct NamedParameter {
  std::string name;
  Tensor value;
  /// Owning block, or -1 for embeddings, final norm and a global slope.
  Index layer = -1;
};

/// Ordered, named trainable tensors of a model.
class ParameterSet {
 public:
  Tensor& add(std::string name, Tensor value, Index layer);
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);
  bool contains(std::string_view name) const;

  std::span<NamedParameter> entries() { return entries_; }
  std::span<const NamedParameter> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  Index count() const;

  void zero_grad();

 private:
  std::vector<NamedParameter> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

enum class ProbeSite { AttentionScores, AttentionOutput, FfnPreact, BlockOutput, Loss, Gradient };

std::string_view to_string(ProbeSite site);

/// Hooks invoked during the forward pass. Probe values are passed mutably so
/// tests can inject faults; the attention probabilities are [batch*heads x t x t].
class ForwardObserver {
 public:
  virtual ~ForwardObserver() = default;
  virtual void on_probe(Index /*layer*/, ProbeSite /*site*/, Tensor& /*value*/) {}
  virtual void on_attention(Index /*layer*/, const Tensor& /*probs*/, Index /*batch*/, Index /*heads*/) {}
  virtual void on_layernorm(Index /*layer*/) {}
};

/// Fans every hook out to several observers, in order.
class ObserverChain final : public ForwardObserver {
 public:
  explicit ObserverChain(std::vector<ForwardObserver*> observers) : observers_(std::move(observers)) {}
  void on_probe(Index layer, ProbeSite site, Tensor& value) override;
  void on_attention(Index layer, const Tensor& probs, Index batch, Index heads) override;
  void on_layernorm(Index layer) override;

 private:
  std::vector<ForwardObserver*> observers_;
};

/// Projection slices belonging to one attention head: weights [d x d_k], biases [d_k].
struct HeadParams {
  Tensor wq, bq, wk, bk, wv, bv;
};

/// Single-head causal attention over one sequence x[t x d] -> [t x d_k].
/// Undefined biases are skipped. attn, when given, receives the probabilities.
Tensor attention_head(Tape& tape, const Tensor& x, const HeadParams& head, const CausalMask& mask,
                      Tensor* attn = nullptr);

class Model {
 public:
  /// Builds and initializes parameters from config.seed.
  explicit Model(ModelConfig config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  /// Token ids laid out as `batch` rows of equal length t <= context.
  /// Returns logits [batch*t x vocab].
  Tensor forward(Tape& tape, std::span<const Index> ids, Index batch, ForwardObserver* observer = nullptr) const;

  /// One transformer block over x[batch*t x d].
  Tensor block_forward(Tape& tape, const Tensor& x, Index layer, Index batch,
                       ForwardObserver* observer = nullptr) const;
  /// Multi-head attention sub-block (concat of heads, then output projection).
  Tensor mha(Tape& tape, const Tensor& x, Index layer, Index batch, ForwardObserver* observer = nullptr) const;
  /// Feed-forward sub-block with the configured activation.
  Tensor ffn(Tape& tape, const Tensor& x, Index layer, ForwardObserver* observer = nullptr) const;

  /// Detached copies of one head's projection slices.
  HeadParams head_params(Index layer, Index head) const;

  /// Slope tensor used by `layer`, or nullptr for non-learnable activations.
  const Tensor* slope_for(Index layer) const;
  /// Current slope value per layer (all equal for the global variant).
  std::vector<Scalar> slope_values() const;

  /// The shared full-context mask, or a fresh one for shorter sequences.
  CausalMask mask(Index t) const;

 private:
  Tensor linear(Tape& tape, const Tensor& x, const std::string& prefix, std::string_view w, std::string_view b) const;
  Tensor maybe_layernorm(Tape& tape, const Tensor& x, const std::string& prefix, Index layer,
                         ForwardObserver* observer) const;

  ModelConfig config_;
  ParameterSet params_;
  CausalMask full_mask_;
};

std::string layer_prefix(Index layer);

}  // namespace normfree
