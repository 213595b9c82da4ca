#pragma once

// Dense f64 tensors with a define-by-run reverse-mode tape.
//
// A Tensor is a shared handle to a node holding its shape, row-major data and
// (lazily allocated) gradient. Operations executed while a Tape is alive and
// any input requires a gradient append a backward rule to that tape. With no
// active tape the same operations run as plain numerics.

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unibias {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Buffers start on a cache line so vectorised kernels split loops the same
// way on every run; otherwise results can differ in the last bit.
template <class T>
struct CacheAligned {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  CacheAligned() = default;
  template <class U>
  CacheAligned(const CacheAligned<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const CacheAligned<U>&) const noexcept { return true; }
};
using Buffer = std::vector<double, CacheAligned<double>>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

struct TensorNode {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::string name;

  std::span<double> grad_buffer();  // allocates zeros on first use
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  // Last dimension, and the number of rows when viewed as [rows x cols].
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  const std::string& name() const;
  void set_name(std::string name);

  // New leaf holding a copy of the data, detached from any tape.
  Tensor detach() const;

  TensorNode* node() const noexcept { return node_.get(); }
  const std::shared_ptr<TensorNode>& shared() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;

  friend class Tape;
  friend Tensor make_result(Shape, std::initializer_list<const Tensor*>);
};

// Ordered record of operations. Constructing a Tape makes it the active tape
// for the current thread until it is destroyed; tapes nest.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept;

  void record(std::shared_ptr<TensorNode> output, std::function<void()> rule);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule once, newest first.
  // The tape is consumed; a second call throws.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<TensorNode> output;
    std::function<void()> rule;
  };
  std::vector<Entry> entries_;
  Tape* previous_;
  bool consumed_ = false;
};

// Suspends recording within its scope (evaluation paths).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_;
};

// Runs backward on the active tape.
void backward(const Tensor& loss);

// Output tensor for an op; requires_grad iff a tape is active and some input
// requires a gradient.
Tensor make_result(Shape shape, std::initializer_list<const Tensor*> inputs);

}  // namespace unibias
