#pragma once

#include "normfree/data.hpp"
#include "normfree/kernels.hpp"
#include "normfree/model.hpp"

#include <array>
#include <optional>
#include <span>
#include <vector>

namespace normfree {

/// Constant inside log(a + eps) for headwise entropy.
inline constexpr Scalar kEntropyEps = 1e-8;
/// A layer whose mean head entropy falls below this fraction of ln T is collapsed.
inline constexpr Scalar kCollapseFraction = 0.1;

/// Headwise entropy of one attention matrix attn[t x t], in nats.
Scalar headwise_entropy(const Tensor& attn, Scalar eps = kEntropyEps);

/// Per-(layer, head) mean attention entropy at one training step.
/// Non-finite heads hold NaN.
struct AttentionSnapshot {
  Index step = 0;
  Index context = 0;
  RowMatrix entropies;  // [layers x heads]

  Index layers() const { return entropies.rows(); }
  Index heads() const { return entropies.cols(); }
  bool finite(Index layer, Index head) const { return std::isfinite(entropies(layer, head)); }
};

/// Observer that accumulates headwise entropy over every sequence it sees.
class EntropyRecorder final : public ForwardObserver {
 public:
  EntropyRecorder(Index layers, Index heads, Scalar eps = kEntropyEps);
  void on_attention(Index layer, const Tensor& probs, Index batch, Index heads) override;

  /// Mean over recorded sequences; NaN for heads with any non-finite value.
  RowMatrix mean() const;
  Index sequences() const { return sequences_; }

 private:
  Scalar eps_;
  RowMatrix sums_;
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> counts_;
  Index sequences_ = 0;
};

/// Runs the model without recording on each probe batch and averages
/// headwise entropy over all probe sequences.
AttentionSnapshot snapshot(const Model& model, std::span<const Batch> probe, Index step);

/// Quartile histogram of head entropies relative to the largest finite value.
struct EntropySummary {
  Index step = 0;
  Scalar ln_context = 0.0;
  std::optional<Scalar> max_observed;
  /// Counts for [0, m/4), [m/4, m/2), [m/2, 3m/4), [3m/4, m].
  std::array<Index, 4> bins{};
  Index finite_heads = 0;
  Index nonfinite_heads = 0;
  /// Fractions of finite heads; empty when no head is finite.
  std::optional<Scalar> overload_fraction;
  std::optional<Scalar> midband_fraction;
  std::optional<Scalar> bottom_fraction;
  /// Set when every head is non-finite.
  bool collapsed = false;
  std::vector<Index> collapsed_layers;
};

EntropySummary summarize(const AttentionSnapshot& snapshot);

struct LayerEntropy {
  Index step = 0;
  Index layer = 0;
  /// Mean over finite heads; NaN when all heads were excluded.
  Scalar mean = 0.0;
  Index excluded_heads = 0;
  bool collapsed = false;
};

/// Per-layer mean-entropy rows, snapshot-major then layer order.
std::vector<LayerEntropy> layerwise_series(std::span<const AttentionSnapshot> snapshots);

/// Threshold test used for collapse flags.
bool is_collapsed(Scalar layer_mean, Index context, Scalar fraction = kCollapseFraction);

}  // namespace normfree
