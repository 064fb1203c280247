#pragma once

#include "normfree/model.hpp"
#include "normfree/tensor.hpp"

#include <vector>

namespace normfree {

/// Linear warmup from 0 to peak over `warmup` steps, then cosine decay to
/// `min_lr` at step `total`. Steps are 1-based update counts.
struct LrSchedule {
  Scalar peak = 3e-4;
  Scalar min_lr = 3e-5;
  Index warmup = 0;
  Index total = 1;

  Scalar at(Index step) const;
};

struct AdamWHyper {
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;
  Scalar weight_decay = 0.1;
};

/// Adam with decoupled weight decay and bias correction. Weight decay applies
/// only to tensors of rank >= 2 (projection matrices and embeddings); biases,
/// layernorm gains and learnable slopes are not decayed.
class AdamW {
 public:
  AdamW(ParameterSet& params, AdamWHyper hyper);

  /// One update at 1-based step t with learning rate lr. Parameters without a
  /// gradient buffer are skipped.
  void step(Index t, Scalar lr);

 private:
  struct Slot {
    Tensor param;
    std::vector<Scalar> m;
    std::vector<Scalar> v;
    bool decay;
  };

  AdamWHyper hyper_;
  std::vector<Slot> slots_;
};

/// Single-tensor AdamW update on raw buffers, shared with AdamW::step.
void adamw_update(std::span<Scalar> w, std::span<const Scalar> g, std::span<Scalar> m, std::span<Scalar> v, Index t,
                  Scalar lr, const AdamWHyper& hyper, bool decay);

/// L2 norm over every parameter gradient; non-finite if any element is.
Scalar global_grad_norm(const ParameterSet& params);

/// Rescales gradients so the global norm is at most max_norm. Non-finite
/// norms leave gradients untouched. Returns the pre-clip norm.
Scalar clip_grad_norm(ParameterSet& params, Scalar max_norm);

}  // namespace normfree
