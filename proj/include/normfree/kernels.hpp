#pragma once

// Scalar-generic math kernels shared by the differentiable ops, the entropy
// instrumentation and the test oracles. Everything here is header-only and
// works on any Eigen dense expression.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace normfree::kernels {

template <typename Scalar>
inline constexpr Scalar kGeluCubic = Scalar(0.044715);

template <typename Scalar>
Scalar gelu_tanh(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  const Scalar u = c * (x + kGeluCubic<Scalar> * x * x * x);
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(u));
}

template <typename Scalar>
Scalar gelu_tanh_grad(Scalar x) {
  const Scalar c = std::sqrt(Scalar(2) / std::numbers::pi_v<Scalar>);
  const Scalar u = c * (x + kGeluCubic<Scalar> * x * x * x);
  const Scalar t = std::tanh(u);
  const Scalar du = c * (Scalar(1) + Scalar(3) * kGeluCubic<Scalar> * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}

template <typename Scalar>
Scalar gelu_erf(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

template <typename Scalar>
Scalar gelu_erf_grad(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<Scalar> /
                     std::numbers::sqrt2_v<Scalar>;
  return cdf + x * pdf;
}

// max(x,0) + alpha*min(x,0): alpha == 0 reproduces relu bit for bit (no -0.0).
template <typename Scalar>
Scalar leaky(Scalar x, Scalar alpha) {
  return std::max(x, Scalar(0)) + alpha * std::min(x, Scalar(0));
}

// Subgradient at exactly 0 is the negative-side slope.
template <typename Scalar>
Scalar leaky_grad(Scalar x, Scalar alpha) {
  return x > Scalar(0) ? Scalar(1) : alpha;
}

// Packet versions for whole buffers. tanh(u) is evaluated as 1 - 2/(1 + e^{2u})
// so it vectorizes through Eigen's exp; the absolute error stays at rounding
// level, which is what the 1 + tanh(u) factor sees.
template <typename Derived>
Eigen::Array<typename Derived::Scalar, Eigen::Dynamic, 1> tanh_packet(const Eigen::ArrayBase<Derived>& u) {
  using S = typename Derived::Scalar;
  return S(1) - S(2) / (S(1) + (S(2) * u).exp());
}

template <typename Derived>
Eigen::Array<typename Derived::Scalar, Eigen::Dynamic, 1> gelu_tanh_array(const Eigen::ArrayBase<Derived>& x) {
  using S = typename Derived::Scalar;
  const S c = std::sqrt(S(2) / std::numbers::pi_v<S>);
  const auto t = tanh_packet(c * (x + kGeluCubic<S> * x.cube()));
  return S(0.5) * x * (S(1) + t);
}

template <typename Derived>
Eigen::Array<typename Derived::Scalar, Eigen::Dynamic, 1> gelu_tanh_grad_array(const Eigen::ArrayBase<Derived>& x) {
  using S = typename Derived::Scalar;
  const S c = std::sqrt(S(2) / std::numbers::pi_v<S>);
  const auto t = tanh_packet(c * (x + kGeluCubic<S> * x.cube()));
  const auto du = c * (S(1) + S(3) * kGeluCubic<S> * x.square());
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t.square()) * du;
}

template <typename Derived>
auto leaky(const Eigen::ArrayBase<Derived>& x, typename Derived::Scalar alpha) {
  using S = typename Derived::Scalar;
  return x.unaryExpr([alpha](S v) { return leaky(v, alpha); });
}

/// Additive causal mask: 0 where key j <= query i, -inf above the diagonal.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> causal_mask(Eigen::Index t) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(t, t);
  for (Eigen::Index i = 0; i < t; ++i)
    for (Eigen::Index j = 0; j < t; ++j)
      m(i, j) = j <= i ? Scalar(0) : -std::numeric_limits<Scalar>::infinity();
  return m;
}

/// Attention where query i spreads weight 1/(i+1) over its visible keys.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> uniform_causal_attention(
    Eigen::Index t) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> a =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(t, t);
  for (Eigen::Index i = 0; i < t; ++i) a.row(i).head(i + 1).setConstant(Scalar(1) / Scalar(i + 1));
  return a;
}

/// Mean over query rows of -sum_j a_ij log(a_ij + eps), in nats.
///
/// Exact zeros (masked keys) are skipped. Any non-finite entry yields
/// NaN so the caller can tag the head as non-finite. Finite results are
/// clamped at 0 to remove the -eps artifact of one-hot rows.
template <typename Derived>
typename Derived::Scalar headwise_entropy(const Eigen::MatrixBase<Derived>& attn, typename Derived::Scalar eps) {
  using S = typename Derived::Scalar;
  const Eigen::Index t = attn.rows();
  S total = S(0);
  for (Eigen::Index i = 0; i < t; ++i) {
    for (Eigen::Index j = 0; j < attn.cols(); ++j) {
      const S a = attn(i, j);
      if (a == S(0)) continue;
      total -= a * std::log(a + eps);
    }
  }
  if (!std::isfinite(total)) return std::numeric_limits<S>::quiet_NaN();
  S e = total / S(t);
  if (e < S(0)) e = S(0);
  return e;
}

}  // namespace normfree::kernels
