#include "supermoe/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace supermoe {

namespace {
std::atomic<std::uint64_t> g_next_node_id{1};
thread_local int g_no_grad_depth = 0;
thread_local KinkProbe* g_kink_probe = nullptr;

detail::NodePtr make_node(Shape shape, std::vector<double> values) {
  auto numel = shape_numel(shape);
  if (numel != static_cast<std::int64_t>(values.size()))
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_to_string(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}
}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension in " + shape_to_string(s));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {
std::vector<double>& adjoint_of(AdjointMap& adj, const Node* n) {
  auto& buf = adj[n];
  if (buf.empty()) buf.assign(n->values.size(), 0.0);
  return buf;
}
}  // namespace detail

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  return Tensor(make_node(std::move(shape), std::move(values)));
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

std::vector<double>& Tensor::grad() {
  if (n_->grad.empty()) n_->grad.assign(n_->values.size(), 0.0);
  return n_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (n_->grad.empty()) n_->grad.assign(n_->values.size(), 0.0);
  return n_->grad;
}

void Tensor::zero_grad() {
  if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a scalar, got shape " + shape_to_string(shape()));
  return n_->values[0];
}

double Tensor::at(std::int64_t r, std::int64_t c) const {
  if (rank() != 2) throw ContractError("at(r,c) requires rank-2, got shape " + shape_to_string(shape()));
  return n_->values[static_cast<std::size_t>(r * dim(1) + c)];
}

void Tensor::backward() const {
  if (!n_) throw ContractError("backward on an undefined tensor");
  if (numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_to_string(shape()));
  if (!n_->tape) throw ContractError("backward on a tensor that is not connected to any tape");
  n_->tape->backward(*this);
}

Tensor Tape::parameter(Shape shape, std::vector<double> values) {
  auto n = make_node(std::move(shape), std::move(values));
  n->requires_grad = true;
  n->tape = this;
  return Tensor(std::move(n));
}

void Tape::record(detail::NodePtr out, BackwardFn fn) {
  entries_.push_back(Entry{std::move(out), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  detail::AdjointMap adj;
  detail::adjoint_of(adj, loss.node().get())[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto found = adj.find(it->out.get());
    if (found == adj.end()) continue;  // not in the cone of this loss
    it->fn(found->second, adj);
  }
  for (auto& [node, buf] : adj) {
    if (!node->requires_grad) continue;
    auto* n = const_cast<detail::Node*>(node);
    if (n->grad.empty()) n->grad.assign(n->values.size(), 0.0);
    for (std::size_t i = 0; i < buf.size(); ++i) n->grad[i] += buf[i];
  }
}

void Tape::apply_precision(std::vector<double>& v) const {
  if (precision_ == Precision::Float64) return;
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

double KinkProbe::min_margin() const { return std::min(min_relu, std::min(min_gate_gap, min_pool_gap)); }

KinkProbe* KinkProbe::exchange(KinkProbe* p) {
  KinkProbe* old = g_kink_probe;
  g_kink_probe = p;
  return old;
}

KinkProbe* KinkProbe::current() { return g_kink_probe; }

}  // namespace supermoe
