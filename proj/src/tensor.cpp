#include "normfree/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace normfree {

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (Index d : shape) {
    if (d < 1) throw DimensionError("tensor dimensions must be >= 1, got " + shape_str(shape));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  validate_shape(shape);
  auto impl = std::make_shared<Storage>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::uninitialized(Shape shape) {
  validate_shape(shape);
  auto impl = std::make_shared<Storage>();
  impl->data.resize(static_cast<std::size_t>(shape_numel(shape)));
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<Scalar> values, bool requires_grad) {
  validate_shape(shape);
  if (static_cast<Index>(values.size()) != shape_numel(shape)) {
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto impl = std::make_shared<Storage>();
  impl->shape = std::move(shape);
  impl->data.assign(values.begin(), values.end());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) { return full({1}, value, requires_grad); }

const Tensor::Storage& Tensor::storage() const {
  if (!impl_) throw ContractError("access to an undefined tensor");
  return *impl_;
}

Tensor::Storage& Tensor::storage() {
  if (!impl_) throw ContractError("access to an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return storage().shape; }

Index Tensor::dim(int i) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) throw DimensionError("dimension index out of range for " + shape_str(s));
  return s[static_cast<std::size_t>(k)];
}

Index Tensor::numel() const { return static_cast<Index>(storage().data.size()); }

std::span<Scalar> Tensor::data() { return storage().data; }
std::span<const Scalar> Tensor::data() const { return storage().data; }

Scalar Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return storage().data[0];
}

MatrixMap Tensor::matrix() { return MatrixMap(storage().data.data(), rows(), cols()); }
ConstMatrixMap Tensor::matrix() const { return ConstMatrixMap(storage().data.data(), rows(), cols()); }
ArrayMap Tensor::array() { return ArrayMap(storage().data.data(), numel()); }
ConstArrayMap Tensor::array() const { return ConstArrayMap(storage().data.data(), numel()); }

bool Tensor::requires_grad() const { return storage().requires_grad; }
void Tensor::set_requires_grad(bool value) { storage().requires_grad = value; }

bool Tensor::has_grad() const { return !storage().grad.empty(); }

std::span<Scalar> Tensor::grad() {
  if (!has_grad()) throw ContractError("tensor has no gradient buffer");
  return storage().grad;
}

std::span<const Scalar> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient buffer");
  return storage().grad;
}

MatrixMap Tensor::grad_matrix() { return MatrixMap(grad().data(), rows(), cols()); }
ArrayMap Tensor::grad_array() { return ArrayMap(grad().data(), numel()); }

void Tensor::ensure_grad() {
  auto& s = storage();
  if (s.grad.empty()) s.grad.assign(s.data.size(), 0.0);
}

void Tensor::zero_grad() {
  auto& s = storage();
  std::fill(s.grad.begin(), s.grad.end(), 0.0);
}

void Tensor::drop_grad() {
  auto& s = storage();
  s.grad.clear();
  s.grad.shrink_to_fit();
}

Tensor Tensor::clone() const { return Tensor::from(shape(), std::vector<Scalar>(data().begin(), data().end())); }

bool Tape::wants(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
  output.set_requires_grad(true);
  entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
}

void backward(const Tensor& root, Tape& tape) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward requires a scalar root, got shape " +
                        (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  }
  const bool produced_here = std::any_of(tape.entries_.begin(), tape.entries_.end(),
                                         [&](const Tape::Entry& e) { return e.output.same_storage(root); });
  if (!produced_here) throw ContractError("backward root was not produced on this tape");

  Tensor seed = root;
  seed.ensure_grad();
  seed.grad()[0] += 1.0;

  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

}  // namespace normfree
