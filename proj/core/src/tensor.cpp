#include "attnwave/tensor.hpp"

#include <stdexcept>
#include <unordered_set>

namespace attnwave {

namespace {

int64_t checked_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e < 0) throw std::invalid_argument("Tensor: negative extent in " + shape_str(shape));
    n *= e;
  }
  return n;
}

thread_local bool g_grad_enabled = true;

}  // namespace

std::string shape_str(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += " x ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<int64_t> shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(static_cast<size_t>(checked_numel(shape_)), 0.0)) {}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<double> values) : shape_(std::move(shape)) {
  const int64_t n = checked_numel(shape_);
  if (n != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t(std::move(shape));
  for (auto& v : *t.data_) v = value;
  return t;
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : *t.data_) v = rng.normal(0.0, stddev);
  return t;
}

int64_t Tensor::numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

double Tensor::value() const {
  if (numel() != 1) throw std::logic_error("Tensor::value: tensor is not scalar, shape " + shape_str(shape_));
  return (*data_)[0];
}

Tensor Tensor::clone_values() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  return t;
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on) ensure_grad();
}

void Tensor::ensure_grad() {
  if (!grad_) grad_ = std::make_shared<std::vector<double>>(data_->size(), 0.0);
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

bool grad_enabled() { return g_grad_enabled; }

GradMode::GradMode(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }

GradMode::~GradMode() { g_grad_enabled = previous_; }

void backward(Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::logic_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  loss.ensure_grad();
  loss.grad()[0] += 1.0;
  if (!loss.node) return;

  // Iterative post-order DFS; reverse gives a valid topological order.
  std::vector<GraphNode*> order;
  std::unordered_set<GraphNode*> seen;
  struct Frame {
    GraphNode* node;
    size_t next_parent;
  };
  std::vector<Frame> stack{{loss.node.get(), 0}};
  seen.insert(loss.node.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      GraphNode* p = f.node->parents[f.next_parent++].get();
      if (p != nullptr && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward();
  }
}

}  // namespace attnwave
