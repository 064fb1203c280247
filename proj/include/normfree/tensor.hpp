#pragma once

#include "normfree/errors.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace normfree {

using Scalar = double;
using Index = std::int64_t;
using Shape = std::vector<Index>;

using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

std::string shape_str(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Dense row-major tensor of 64-bit floats with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage, which is how the
/// tape keeps operands alive and how parameters are updated in place. Use
/// clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  /// Values are left unset; for op outputs that are fully overwritten.
  static Tensor uninitialized(Shape shape);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Scalar> values, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  /// Size of dimension i; negative i counts from the back.
  Index dim(int i) const;
  Index numel() const;
  /// Product of every dimension except the last.
  Index rows() const { return numel() / dim(-1); }
  Index cols() const { return dim(-1); }

  std::span<Scalar> data();
  std::span<const Scalar> data() const;
  Scalar item() const;
  Scalar at(Index flat) const { return data()[static_cast<std::size_t>(flat)]; }

  /// Whole buffer viewed as [rows() x cols()].
  MatrixMap matrix();
  ConstMatrixMap matrix() const;
  ArrayMap array();
  ConstArrayMap array() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<Scalar> grad();
  std::span<const Scalar> grad() const;
  MatrixMap grad_matrix();
  ArrayMap grad_array();
  /// Allocates a zero gradient buffer if absent.
  void ensure_grad();
  void zero_grad();
  void drop_grad();

  /// Independent copy of the values; the copy does not require grad.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  // 64-byte aligned so Eigen's vectorized loops split every buffer at the same
  // element offsets: results then depend only on shape and values, never on
  // where the heap placed the data. Resizing skips value-initialization so
  // uninitialized() costs no fill.
  template <typename T>
  struct AlignedBufferAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedBufferAllocator() = default;
    template <typename U>
    AlignedBufferAllocator(const AlignedBufferAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

    template <typename U>
    void construct(U* p) noexcept {
      ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
      ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }

    template <typename U>
    bool operator==(const AlignedBufferAllocator<U>&) const noexcept {
      return true;
    }
  };
  using Buffer = std::vector<Scalar, AlignedBufferAllocator<Scalar>>;

  struct Storage {
    Shape shape;
    Buffer data;
    Buffer grad;
    bool requires_grad = false;
  };

  explicit Tensor(std::shared_ptr<Storage> impl) : impl_(std::move(impl)) {}
  const Storage& storage() const;
  Storage& storage();

  std::shared_ptr<Storage> impl_;
};

/// Ordered record of differentiable operations for reverse-mode autodiff.
///
/// Operations append themselves only while recording and only when at least
/// one operand requires grad. Backward replays the recorded rules in exact
/// reverse order.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// True when an op over these operands must be recorded.
  bool wants(std::initializer_list<const Tensor*> inputs) const;

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn backward);

  friend void backward(const Tensor& root, Tape& tape);

 private:
  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  bool recording_;
  std::vector<Entry> entries_;
};

/// Populates grad on every tensor reachable from root. Root must be a single
/// element produced by an operation on this tape.
void backward(const Tensor& root, Tape& tape);

}  // namespace normfree
