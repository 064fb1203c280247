#include "normfree/entropy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace normfree {

Scalar headwise_entropy(const Tensor& attn, Scalar eps) {
  if (attn.rank() != 2 || attn.dim(0) != attn.dim(1)) {
    throw DimensionError("headwise_entropy: expected a square matrix, got " + shape_str(attn.shape()));
  }
  return kernels::headwise_entropy(attn.matrix(), eps);
}

EntropyRecorder::EntropyRecorder(Index layers, Index heads, Scalar eps)
    : eps_(eps), sums_(RowMatrix::Zero(layers, heads)), counts_(decltype(counts_)::Zero(layers, heads)) {}

void EntropyRecorder::on_attention(Index layer, const Tensor& probs, Index batch, Index heads) {
  const Index t = probs.dim(-1);
  const auto data = probs.data();
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const ConstMatrixMap a(data.data() + (b * heads + h) * t * t, t, t);
      sums_(layer, h) += kernels::headwise_entropy(a, eps_);
      counts_(layer, h) += 1;
    }
  }
  if (layer == 0) sequences_ += batch;
}

RowMatrix EntropyRecorder::mean() const {
  RowMatrix out(sums_.rows(), sums_.cols());
  for (Index l = 0; l < sums_.rows(); ++l)
    for (Index h = 0; h < sums_.cols(); ++h)
      out(l, h) = counts_(l, h) > 0 ? sums_(l, h) / static_cast<Scalar>(counts_(l, h))
                                    : std::numeric_limits<Scalar>::quiet_NaN();
  return out;
}

AttentionSnapshot snapshot(const Model& model, std::span<const Batch> probe, Index step) {
  const auto& cfg = model.config();
  EntropyRecorder recorder(cfg.layers, cfg.heads);
  Index context = cfg.context;
  for (const auto& batch : probe) {
    Tape tape(false);
    model.forward(tape, batch.inputs, batch.batch, &recorder);
    context = batch.context;
  }
  return AttentionSnapshot{step, context, recorder.mean()};
}

bool is_collapsed(Scalar layer_mean, Index context, Scalar fraction) {
  return layer_mean < fraction * std::log(static_cast<Scalar>(context));
}

std::vector<LayerEntropy> layerwise_series(std::span<const AttentionSnapshot> snapshots) {
  std::vector<LayerEntropy> out;
  for (const auto& s : snapshots) {
    for (Index l = 0; l < s.layers(); ++l) {
      LayerEntropy row{s.step, l, 0.0, 0, false};
      Scalar total = 0.0;
      Index finite = 0;
      for (Index h = 0; h < s.heads(); ++h) {
        if (s.finite(l, h)) {
          total += s.entropies(l, h);
          ++finite;
        } else {
          ++row.excluded_heads;
        }
      }
      if (finite > 0) {
        row.mean = total / static_cast<Scalar>(finite);
        row.collapsed = is_collapsed(row.mean, s.context);
      } else {
        row.mean = std::numeric_limits<Scalar>::quiet_NaN();
        row.collapsed = true;
      }
      out.push_back(row);
    }
  }
  return out;
}

EntropySummary summarize(const AttentionSnapshot& s) {
  EntropySummary out;
  out.step = s.step;
  out.ln_context = std::log(static_cast<Scalar>(s.context));

  Scalar max_e = -std::numeric_limits<Scalar>::infinity();
  for (Index l = 0; l < s.layers(); ++l)
    for (Index h = 0; h < s.heads(); ++h) {
      if (s.finite(l, h)) {
        max_e = std::max(max_e, s.entropies(l, h));
        ++out.finite_heads;
      } else {
        ++out.nonfinite_heads;
      }
    }

  for (const auto& row : layerwise_series(std::span(&s, 1)))
    if (row.collapsed) out.collapsed_layers.push_back(row.layer);

  if (out.finite_heads == 0) {
    out.collapsed = true;
    return out;
  }
  out.max_observed = max_e;
  const Scalar quarter = max_e / 4.0;
  for (Index l = 0; l < s.layers(); ++l)
    for (Index h = 0; h < s.heads(); ++h) {
      if (!s.finite(l, h)) continue;
      const Scalar e = s.entropies(l, h);
      const int bin = e >= 3.0 * quarter ? 3 : e >= 2.0 * quarter ? 2 : e >= quarter ? 1 : 0;
      ++out.bins[static_cast<std::size_t>(bin)];
    }
  const auto n = static_cast<Scalar>(out.finite_heads);
  out.overload_fraction = static_cast<Scalar>(out.bins[3]) / n;
  out.midband_fraction = static_cast<Scalar>(out.bins[1] + out.bins[2]) / n;
  out.bottom_fraction = static_cast<Scalar>(out.bins[0]) / n;
  return out;
}

}  // namespace normfree
