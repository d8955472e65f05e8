#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "attnwave/rng.hpp"

namespace attnwave {

struct GraphNode;

// Dense row-major tensor of doubles with an optional gradient buffer and an
// optional autodiff node. Copies are shallow handles onto the same buffers;
// values are treated as immutable after construction except for explicit
// in-place training updates (optimizer steps, hook edits in no-grad mode).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape);  // zero-filled
  Tensor(std::vector<int64_t> shape, std::vector<double> values);

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double value);
  // Gaussian init; bit-identical for identical (rng state, shape).
  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev);

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const;
  int64_t rows() const { return shape_[0]; }  // 2-D helpers
  int64_t cols() const { return shape_[1]; }
  bool defined() const { return data_ != nullptr; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  double& at(int64_t r, int64_t c) { return (*data_)[static_cast<size_t>(r * cols() + c)]; }
  double at(int64_t r, int64_t c) const { return (*data_)[static_cast<size_t>(r * cols() + c)]; }
  double* row_ptr(int64_t r) { return data_->data() + r * cols(); }
  const double* row_ptr(int64_t r) const { return data_->data() + r * cols(); }
  double value() const;  // scalar tensors only

  // Deep copy of values (no graph, no grad).
  Tensor clone_values() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);
  void ensure_grad();
  double* grad() { return grad_ ? grad_->data() : nullptr; }
  const double* grad() const { return grad_ ? grad_->data() : nullptr; }
  void zero_grad();

  std::shared_ptr<std::vector<double>> storage() const { return data_; }
  std::shared_ptr<std::vector<double>> grad_storage() const { return grad_; }

  std::shared_ptr<GraphNode> node;

 private:
  std::vector<int64_t> shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  bool requires_grad_ = false;
};

// Node of the dynamically recorded reverse-mode graph. `backward` captures
// the buffers it needs; `parents` exists only to drive topological order.
struct GraphNode {
  std::vector<std::shared_ptr<GraphNode>> parents;
  std::function<void()> backward;
};

// Reverse-mode backprop from a scalar loss. Gradients accumulate; callers
// zero parameter grads between steps. Graph recording is confined to the
// calling thread (the enable flag below is thread-local).
void backward(Tensor& loss);

bool grad_enabled();

// RAII scope that disables (or re-enables) graph recording on this thread.
class GradMode {
 public:
  explicit GradMode(bool enabled);
  ~GradMode();
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

 private:
  bool previous_;
};

struct NoGradGuard : GradMode {
  NoGradGuard() : GradMode(false) {}
};

std::string shape_str(const std::vector<int64_t>& shape);

}  // namespace attnwave
