#pragma once

#include "normfree/tensor.hpp"

#include <span>

namespace normfree {

// Primitive differentiable operations. Each returns a fresh tensor and, when
// the tape is recording and an operand requires grad, appends its backward
// rule to the tape. "Rows" of a tensor means every index except the last
// dimension; "cols" is the last dimension.

/// [m x k] . [k x n] -> [m x n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
/// Batched [g x m x k] . [g x k x n] -> [g x m x n]
Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
/// Elementwise (Hadamard) product of equal shapes.
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, Scalar c);
Tensor add_scalar(Tape& tape, const Tensor& a, Scalar c);
Tensor pow(Tape& tape, const Tensor& a, Scalar p);
Tensor exp(Tape& tape, const Tensor& a);

/// Bias-row broadcast: x[..., n] + bias[n]. The only broadcasting add.
Tensor add_row(Tape& tape, const Tensor& x, const Tensor& bias);
/// x[..., n] * gain[n]
Tensor mul_row(Tape& tape, const Tensor& x, const Tensor& gain);
/// x[..., n] + c[..., 1]
Tensor add_col(Tape& tape, const Tensor& x, const Tensor& c);
/// x[..., n] * c[..., 1]
Tensor mul_col(Tape& tape, const Tensor& x, const Tensor& c);
/// x[g, t, t] + m[t, t] for every g. The mask never receives gradient.
Tensor add_mask(Tape& tape, const Tensor& x, const Tensor& mask);

/// [..., n] -> [..., 1]
Tensor row_sum(Tape& tape, const Tensor& x);
Tensor row_mean(Tape& tape, const Tensor& x);
/// Row maxima as a constant [..., 1] tensor (no gradient path).
Tensor row_max_detached(const Tensor& x);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

Tensor transpose_last_two(Tape& tape, const Tensor& a);
Tensor reshape(Tape& tape, const Tensor& a, Shape shape);
/// [a, b, c, d] -> [a, c, b, d]
Tensor swap_axes_12(Tape& tape, const Tensor& x);

/// Rows of table[V x d] selected by ids -> [ids.size() x d].
Tensor embedding(Tape& tape, const Tensor& table, std::span<const Index> ids);

enum class GeluApprox { Tanh, Erf };

Tensor gelu(Tape& tape, const Tensor& x, GeluApprox approx = GeluApprox::Tanh);
Tensor relu(Tape& tape, const Tensor& x);
Tensor leaky_relu(Tape& tape, const Tensor& x, Scalar alpha);
/// Leaky ReLU whose slope is the single element of a trainable tensor.
Tensor leaky_relu(Tape& tape, const Tensor& x, const Tensor& alpha);

/// Mean token cross-entropy of logits[n x V] against n targets, using the
/// fused log-sum-exp form with the analytic softmax-minus-onehot gradient.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const Index> targets);

}  // namespace normfree
