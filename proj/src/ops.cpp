#include "normfree/ops.hpp"

#include "normfree/kernels.hpp"

#include <cmath>
#include <limits>

namespace normfree {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, int rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

Shape with_last(Shape s, Index last) {
  s.back() = last;
  return s;
}

MatrixMap block(std::span<Scalar> buf, Index offset, Index r, Index c) {
  return MatrixMap(buf.data() + offset, r, c);
}

ConstMatrixMap block(std::span<const Scalar> buf, Index offset, Index r, Index c) {
  return ConstMatrixMap(buf.data() + offset, r, c);
}

// Runs fn only when t participates in differentiation. Backward closures
// init-capture operands (`x = x`) so the handle copies are non-const.
template <typename Fn>
void accumulate(Tensor& t, Fn&& fn) {
  if (!t.requires_grad()) return;
  t.ensure_grad();
  fn();
}

template <typename Forward, typename Derivative>
Tensor elementwise_unary(Tape& tape, const Tensor& x, Forward f, Derivative df) {
  Tensor out = Tensor::uninitialized(x.shape());
  out.array() = x.array().unaryExpr(f);
  if (tape.wants({&x})) {
    tape.record({x}, out, [x = x, out, df]() mutable {
      accumulate(x, [&] { x.grad_array() += out.grad_array() * x.array().unaryExpr(df); });
    });
  }
  return out;
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::uninitialized({a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.matrix() * b.matrix();
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, out, [a = a, b = b, out]() mutable {
      const auto g = out.grad_matrix();
      accumulate(a, [&] { a.grad_matrix().noalias() += g * b.matrix().transpose(); });
      accumulate(b, [&] { b.grad_matrix().noalias() += a.matrix().transpose() * g; });
    });
  }
  return out;
}

Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  }
  const Index g = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor out = Tensor::uninitialized({g, m, n});
  {
    auto ad = std::as_const(a).data();
    auto bd = std::as_const(b).data();
    auto od = out.data();
    for (Index i = 0; i < g; ++i) {
      block(od, i * m * n, m, n).noalias() = block(ad, i * m * k, m, k) * block(bd, i * k * n, k, n);
    }
  }
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, out, [a = a, b = b, out, g, m, k, n]() mutable {
      std::span<const Scalar> og = std::as_const(out).grad();
      std::span<const Scalar> ad = std::as_const(a).data();
      std::span<const Scalar> bd = std::as_const(b).data();
      accumulate(a, [&] {
        auto ag = a.grad();
        for (Index i = 0; i < g; ++i) {
          block(ag, i * m * k, m, k).noalias() +=
              block(og, i * m * n, m, n) * block(bd, i * k * n, k, n).transpose();
        }
      });
      accumulate(b, [&] {
        auto bg = b.grad();
        for (Index i = 0; i < g; ++i) {
          block(bg, i * k * n, k, n).noalias() +=
              block(ad, i * m * k, m, k).transpose() * block(og, i * m * n, m, n);
        }
      });
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::uninitialized(a.shape());
  out.array() = a.array() + b.array();
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, out, [a = a, b = b, out]() mutable {
      accumulate(a, [&] { a.grad_array() += out.grad_array(); });
      accumulate(b, [&] { b.grad_array() += out.grad_array(); });
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::uninitialized(a.shape());
  out.array() = a.array() * b.array();
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, out, [a = a, b = b, out]() mutable {
      accumulate(a, [&] { a.grad_array() += out.grad_array() * b.array(); });
      accumulate(b, [&] { b.grad_array() += out.grad_array() * a.array(); });
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& a, Scalar c) {
  Tensor out = Tensor::uninitialized(a.shape());
  out.array() = a.array() * c;
  if (tape.wants({&a})) {
    tape.record({a}, out, [a = a, out, c = c]() mutable {
      accumulate(a, [&] { a.grad_array() += out.grad_array() * c; });
    });
  }
  return out;
}

Tensor add_scalar(Tape& tape, const Tensor& a, Scalar c) {
  Tensor out = Tensor::uninitialized(a.shape());
  out.array() = a.array() + c;
  if (tape.wants({&a})) {
    tape.record({a}, out, [a = a, out]() mutable {
      accumulate(a, [&] { a.grad_array() += out.grad_array(); });
    });
  }
  return out;
}

Tensor pow(Tape& tape, const Tensor& a, Scalar p) {
  Tensor out = Tensor::uninitialized(a.shape());
  out.array() = a.array().pow(p);
  if (tape.wants({&a})) {
    tape.record({a}, out, [a = a, out, p]() mutable {
      accumulate(a, [&] { a.grad_array() += out.grad_array() * p * a.array().pow(p - 1); });
    });
  }
  return out;
}

Tensor exp(Tape& tape, const Tensor& a) {
  // Eigen's packet exp maps -inf to a denormal rather than 0; results below the
  // smallest normal double are flushed so masked entries are exactly zero. The
  // flush is a separate loop because Eigen's select does not vectorize.
  constexpr Scalar tiny = std::numeric_limits<Scalar>::min();
  Tensor out = Tensor::uninitialized(a.shape());
  out.array() = a.array().exp();
  for (Scalar& v : out.data()) v = v < tiny ? Scalar(0) : v;
  if (tape.wants({&a})) {
    tape.record({a}, out, [a = a, out]() mutable {
      accumulate(a, [&] { a.grad_array() += out.grad_array() * out.array(); });
    });
  }
  return out;
}

Tensor add_row(Tape& tape, const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || bias.dim(0) != x.cols()) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  Tensor out = Tensor::uninitialized(x.shape());
  out.matrix() = x.matrix().rowwise() + bias.matrix().row(0);
  if (tape.wants({&x, &bias})) {
    tape.record({x, bias}, out, [x = x, bias = bias, out]() mutable {
      accumulate(x, [&] { x.grad_array() += out.grad_array(); });
      accumulate(bias, [&] { bias.grad_matrix() += out.grad_matrix().colwise().sum(); });
    });
  }
  return out;
}

Tensor mul_row(Tape& tape, const Tensor& x, const Tensor& gain) {
  if (gain.rank() != 1 || gain.dim(0) != x.cols()) {
    throw DimensionError("mul_row: gain " + shape_str(gain.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  Tensor out = Tensor::uninitialized(x.shape());
  out.matrix() = x.matrix().array().rowwise() * gain.matrix().row(0).array();
  if (tape.wants({&x, &gain})) {
    tape.record({x, gain}, out, [x = x, gain = gain, out]() mutable {
      const MatrixMap gm = out.grad_matrix();
      const auto g = gm.array();
      accumulate(x, [&] { x.grad_matrix().array() += g.rowwise() * gain.matrix().row(0).array(); });
      accumulate(gain, [&] { gain.grad_matrix().array() += (g * x.matrix().array()).colwise().sum(); });
    });
  }
  return out;
}

namespace {

void require_col_operand(const Tensor& x, const Tensor& c, const char* op) {
  if (c.dim(-1) != 1 || c.rows() != x.rows() || c.rank() != x.rank()) {
    throw DimensionError(std::string(op) + ": column operand " + shape_str(c.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
}

}  // namespace

Tensor add_col(Tape& tape, const Tensor& x, const Tensor& c) {
  require_col_operand(x, c, "add_col");
  Tensor out = Tensor::uninitialized(x.shape());
  out.matrix() = x.matrix().colwise() + c.matrix().col(0);
  if (tape.wants({&x, &c})) {
    tape.record({x, c}, out, [x = x, c = c, out]() mutable {
      accumulate(x, [&] { x.grad_array() += out.grad_array(); });
      accumulate(c, [&] { c.grad_matrix().col(0) += out.grad_matrix().rowwise().sum(); });
    });
  }
  return out;
}

Tensor mul_col(Tape& tape, const Tensor& x, const Tensor& c) {
  require_col_operand(x, c, "mul_col");
  Tensor out = Tensor::uninitialized(x.shape());
  out.matrix() = x.matrix().array().colwise() * c.matrix().col(0).array();
  if (tape.wants({&x, &c})) {
    tape.record({x, c}, out, [x = x, c = c, out]() mutable {
      const MatrixMap gm = out.grad_matrix();
      const auto g = gm.array();
      accumulate(x, [&] { x.grad_matrix().array() += g.colwise() * c.matrix().col(0).array(); });
      accumulate(c, [&] { c.grad_matrix().col(0).array() += (g * x.matrix().array()).rowwise().sum(); });
    });
  }
  return out;
}

Tensor add_mask(Tape& tape, const Tensor& x, const Tensor& mask) {
  require_rank(x, 3, "add_mask");
  require_rank(mask, 2, "add_mask");
  if (x.dim(1) != mask.dim(0) || x.dim(2) != mask.dim(1)) {
    throw DimensionError("add_mask: mask " + shape_str(mask.shape()) + " does not match " + shape_str(x.shape()));
  }
  const Index g = x.dim(0), t = x.dim(1) * x.dim(2);
  Tensor out = Tensor::uninitialized(x.shape());
  {
    auto xd = x.data();
    auto od = out.data();
    auto md = mask.data();
    for (Index i = 0; i < g; ++i)
      for (Index j = 0; j < t; ++j) od[i * t + j] = xd[i * t + j] + md[j];
  }
  if (tape.wants({&x})) {
    tape.record({x}, out, [x = x, out]() mutable {
      accumulate(x, [&] { x.grad_array() += out.grad_array(); });
    });
  }
  return out;
}

Tensor row_sum(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::uninitialized(with_last(x.shape(), 1));
  out.matrix().col(0) = x.matrix().rowwise().sum();
  if (tape.wants({&x})) {
    tape.record({x}, out, [x = x, out]() mutable {
      accumulate(x, [&] { x.grad_matrix().colwise() += out.grad_matrix().col(0); });
    });
  }
  return out;
}

Tensor row_mean(Tape& tape, const Tensor& x) {
  const Scalar n = static_cast<Scalar>(x.cols());
  Tensor out = Tensor::uninitialized(with_last(x.shape(), 1));
  out.matrix().col(0) = x.matrix().rowwise().sum() / n;
  if (tape.wants({&x})) {
    tape.record({x}, out, [x = x, out, n]() mutable {
      accumulate(x, [&] { x.grad_matrix().colwise() += out.grad_matrix().col(0) / n; });
    });
  }
  return out;
}

Tensor row_max_detached(const Tensor& x) {
  Tensor out = Tensor::uninitialized(with_last(x.shape(), 1));
  out.matrix().col(0) = x.matrix().rowwise().maxCoeff();
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::scalar(x.array().sum());
  if (tape.wants({&x})) {
    tape.record({x}, out, [x = x, out]() mutable {
      accumulate(x, [&] { x.grad_array() += out.grad()[0]; });
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
  const Scalar n = static_cast<Scalar>(x.numel());
  Tensor out = Tensor::scalar(x.array().sum() / n);
  if (tape.wants({&x})) {
    tape.record({x}, out, [x = x, out, n]() mutable {
      accumulate(x, [&] { x.grad_array() += out.grad()[0] / n; });
    });
  }
  return out;
}

Tensor transpose_last_two(Tape& tape, const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose_last_two: rank < 2 for " + shape_str(a.shape()));
  Shape s = a.shape();
  const Index r = s[s.size() - 2], c = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  const Index g = a.numel() / (r * c);
  Tensor out = Tensor::uninitialized(s);
  {
    auto ad = a.data();
    auto od = out.data();
    for (Index i = 0; i < g; ++i) block(od, i * r * c, c, r) = block(ad, i * r * c, r, c).transpose();
  }
  if (tape.wants({&a})) {
    tape.record({a}, out, [a = a, out, g, r, c = c]() mutable {
      accumulate(a, [&] {
        auto ag = a.grad();
        std::span<const Scalar> og = std::as_const(out).grad();
        for (Index i = 0; i < g; ++i) block(ag, i * r * c, r, c) += block(og, i * r * c, c, r).transpose();
      });
    });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::from(std::move(shape), std::vector<Scalar>(a.data().begin(), a.data().end()));
  if (tape.wants({&a})) {
    tape.record({a}, out, [a = a, out]() mutable {
      accumulate(a, [&] { a.grad_array() += out.grad_array(); });
    });
  }
  return out;
}

Tensor swap_axes_12(Tape& tape, const Tensor& x) {
  require_rank(x, 4, "swap_axes_12");
  const Index n0 = x.dim(0), n1 = x.dim(1), n2 = x.dim(2), n3 = x.dim(3);
  Tensor out = Tensor::uninitialized({n0, n2, n1, n3});
  auto src_index = [=](Index a, Index b, Index c) { return ((a * n1 + b) * n2 + c) * n3; };
  auto dst_index = [=](Index a, Index b, Index c) { return ((a * n2 + c) * n1 + b) * n3; };
  {
    auto xd = x.data();
    auto od = out.data();
    for (Index a = 0; a < n0; ++a)
      for (Index b = 0; b < n1; ++b)
        for (Index c = 0; c < n2; ++c)
          std::copy_n(xd.data() + src_index(a, b, c), n3, od.data() + dst_index(a, b, c));
  }
  if (tape.wants({&x})) {
    tape.record({x}, out, [x = x, out, n0, n1, n2, n3, src_index, dst_index]() mutable {
      accumulate(x, [&] {
        auto xg = x.grad();
        std::span<const Scalar> og = std::as_const(out).grad();
        for (Index a = 0; a < n0; ++a)
          for (Index b = 0; b < n1; ++b)
            for (Index c = 0; c < n2; ++c) {
              const Scalar* src = og.data() + dst_index(a, b, c);
              Scalar* dst = xg.data() + src_index(a, b, c);
              for (Index e = 0; e < n3; ++e) dst[e] += src[e];
            }
      });
    });
  }
  return out;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const Index> ids) {
  require_rank(table, 2, "embedding");
  const Index v = table.dim(0), d = table.dim(1);
  for (Index id : ids) {
    if (id < 0 || id >= v) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(v) +
                              " rows");
    }
  }
  const Index n = static_cast<Index>(ids.size());
  Tensor out = Tensor::uninitialized({n, d});
  {
    auto tm = table.matrix();
    auto om = out.matrix();
    for (Index i = 0; i < n; ++i) om.row(i) = tm.row(ids[static_cast<std::size_t>(i)]);
  }
  if (tape.wants({&table})) {
    std::vector<Index> saved(ids.begin(), ids.end());
    tape.record({table}, out, [table = table, out, saved = std::move(saved)]() mutable {
      accumulate(table, [&] {
        auto tg = table.grad_matrix();
        const auto og = out.grad_matrix();
        for (std::size_t i = 0; i < saved.size(); ++i) tg.row(saved[i]) += og.row(static_cast<Index>(i));
      });
    });
  }
  return out;
}

Tensor gelu(Tape& tape, const Tensor& x, GeluApprox approx) {
  if (approx == GeluApprox::Erf) {
    return elementwise_unary(tape, x, [](Scalar v) { return kernels::gelu_erf(v); },
                             [](Scalar v) { return kernels::gelu_erf_grad(v); });
  }
  Tensor out = Tensor::uninitialized(x.shape());
  out.array() = kernels::gelu_tanh_array(x.array());
  if (tape.wants({&x})) {
    tape.record({x}, out, [x = x, out]() mutable {
      accumulate(x, [&] { x.grad_array() += out.grad_array() * kernels::gelu_tanh_grad_array(x.array()); });
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) { return leaky_relu(tape, x, 0.0); }

Tensor leaky_relu(Tape& tape, const Tensor& x, Scalar alpha) {
  return elementwise_unary(tape, x, [alpha](Scalar v) { return kernels::leaky(v, alpha); },
                           [alpha](Scalar v) { return kernels::leaky_grad(v, alpha); });
}

Tensor leaky_relu(Tape& tape, const Tensor& x, const Tensor& alpha) {
  if (alpha.numel() != 1) throw DimensionError("leaky_relu: slope must be a single element, got " +
                                               shape_str(alpha.shape()));
  const Scalar a = alpha.item();
  Tensor out = Tensor::uninitialized(x.shape());
  out.array() = x.array().unaryExpr([a](Scalar v) { return kernels::leaky(v, a); });
  if (tape.wants({&x, &alpha})) {
    tape.record({x, alpha}, out, [x = x, alpha = alpha, out, a = a]() mutable {
      const auto g = out.grad_array();
      accumulate(x, [&] {
        x.grad_array() += g * x.array().unaryExpr([a](Scalar v) { return kernels::leaky_grad(v, a); });
      });
      accumulate(alpha, [&] { alpha.grad()[0] += (g * x.array().min(0.0)).sum(); });
    });
  }
  return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const Index> targets) {
  require_rank(logits, 2, "cross_entropy");
  const Index n = logits.dim(0), v = logits.dim(1);
  if (static_cast<Index>(targets.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()) + " logits");
  }
  for (Index t : targets) {
    if (t < 0 || t >= v) throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
  }
  // Softmax probabilities are kept for the fused backward rule.
  RowMatrix probs(n, v);
  Scalar total = 0.0;
  const auto lm = logits.matrix();
  for (Index i = 0; i < n; ++i) {
    const Scalar mx = lm.row(i).maxCoeff();
    probs.row(i) = (lm.row(i).array() - mx).exp();
    const Scalar z = probs.row(i).sum();
    probs.row(i) /= z;
    total += mx + std::log(z) - lm(i, targets[static_cast<std::size_t>(i)]);
  }
  Tensor out = Tensor::scalar(total / static_cast<Scalar>(n));
  if (tape.wants({&logits})) {
    std::vector<Index> saved(targets.begin(), targets.end());
    tape.record({logits}, out, [logits = logits, out, probs = std::move(probs), saved = std::move(saved), n]() mutable {
      accumulate(logits, [&] {
        const Scalar g = out.grad()[0] / static_cast<Scalar>(n);
        auto lg = logits.grad_matrix();
        lg += g * probs;
        for (Index i = 0; i < n; ++i) lg(i, saved[static_cast<std::size_t>(i)]) -= g;
      });
    });
  }
  return out;
}

}  // namespace normfree
