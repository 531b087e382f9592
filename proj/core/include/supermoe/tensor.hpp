#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "supermoe/errors.hpp"

namespace supermoe {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_to_string(const Shape& s);

enum class Precision { Float64, Float32 };

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward first touches this node
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::uint64_t id = 0;
};

using NodePtr = std::shared_ptr<Node>;

// Per-backward-call gradient buffers, keyed by node. Each backward() call
// propagates its own adjoints and only then folds them into Node::grad, so
// repeated backward calls accumulate instead of double-counting.
using AdjointMap = std::unordered_map<const Node*, std::vector<double>>;

std::vector<double>& adjoint_of(AdjointMap& adj, const Node* n);

}  // namespace detail

// Dense row-major tensor. Tensor is a cheap handle: copies alias the same
// storage. Values become logically immutable once the tensor has been used
// as an input of a recorded operation; leaf parameters are mutated in place
// by the optimizer between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor full(Shape shape, double value);
  static Tensor zeros(Shape shape);
  static Tensor scalar(double value) { return constant({1}, {value}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::int64_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(n_->values.size()); }
  std::uint64_t id() const { return n_->id; }
  bool requires_grad() const { return n_->requires_grad; }

  std::vector<double>& values() { return n_->values; }
  const std::vector<double>& values() const { return n_->values; }

  bool has_grad() const { return !n_->grad.empty(); }
  // Gradient access; allocates a zero buffer on first use.
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  double item() const;
  // Element access by (row, col) for rank-2 and flat index for rank-1.
  double at(std::int64_t i) const { return n_->values[static_cast<std::size_t>(i)]; }
  double at(std::int64_t r, std::int64_t c) const;

  // Reverse-mode differentiation from a scalar. Throws ContractError when the
  // tensor is not scalar or was never recorded on a tape.
  void backward() const;

  const detail::NodePtr& node() const { return n_; }

 private:
  friend class Tape;
  explicit Tensor(detail::NodePtr n) : n_(std::move(n)) {}
  detail::NodePtr n_;
};

// Ordered record of executed operations. Each model instance owns one tape;
// graph execution on a tape is single-threaded. backward() replays entries in
// reverse execution order, which is a valid topological order because
// operations execute eagerly.
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& out_adjoint, detail::AdjointMap&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Creates a leaf that requires grad and participates in backward.
  Tensor parameter(Shape shape, std::vector<double> values);

  void record(detail::NodePtr out, BackwardFn fn);
  void backward(const Tensor& loss);

  // Drops recorded entries (releases intermediates). Leaf parameters held by
  // the caller stay alive and keep their grads.
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  void set_precision(Precision p) { precision_ = p; }
  Precision precision() const { return precision_; }
  // Rounds op outputs through float storage when the tape runs in Float32
  // mode. Gradient math stays in double either way.
  void apply_precision(std::vector<double>& v) const;

 private:
  struct Entry {
    detail::NodePtr out;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  Precision precision_ = Precision::Float64;
};

// Thread-local switch disabling tape recording, used for inference paths that
// may run concurrently over frozen parameters.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Collector for distances to non-smooth points seen during a forward pass
// (relu inputs, router top-2 logit gaps, max-pool top-2 gaps). The gradient
// checker uses it to pick inputs where finite differences are trustworthy.
struct KinkProbe {
  double min_relu = 1e300;
  double min_gate_gap = 1e300;
  double min_pool_gap = 1e300;

  double min_margin() const;

  // Set/reset the active probe for this thread; nullptr detaches.
  static KinkProbe* exchange(KinkProbe* p);
  static KinkProbe* current();
};

}  // namespace supermoe
