#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "attnwave/model.hpp"
#include "attnwave/tensor.hpp"

namespace attnwave {

// Captured causal attention probabilities, indexed [layer][head][query][key].
// Entries with key > query are exactly zero; without interventions each
// (layer, head, query) row sums to 1.
struct AttentionTensor {
  int64_t n_layers = 0;
  int64_t n_heads = 0;
  int64_t seq = 0;
  std::vector<double> values;

  AttentionTensor() = default;
  AttentionTensor(int64_t layers, int64_t heads, int64_t seq_len);

  bool empty() const { return values.empty(); }
  double at(int64_t l, int64_t h, int64_t q, int64_t k) const {
    return values[static_cast<size_t>(((l * n_heads + h) * seq + q) * seq + k)];
  }
  double& at(int64_t l, int64_t h, int64_t q, int64_t k) {
    return values[static_cast<size_t>(((l * n_heads + h) * seq + q) * seq + k)];
  }
  const double* row(int64_t l, int64_t h, int64_t q) const {
    return values.data() + ((l * n_heads + h) * seq + q) * seq;
  }
};

struct PositionScheme {
  enum class Kind { standard, self_extend };
  Kind kind = Kind::standard;
  int64_t window = 1;  // neighbor window w (self_extend only)
  int64_t group = 1;   // group size G (self_extend only)

  bool operator==(const PositionScheme&) const = default;
};

// Intervention callbacks. `edit_attention` sees each (layer, head) post-
// softmax probability matrix (row-major seq x seq) and may edit it in place;
// the edited values feed the value mixture and the post-hook capture.
// `edit_qk_hidden` sees the normalized per-layer hidden state before the
// Q/K projections (not V). Hooks force a no-grad forward.
struct ForwardHooks {
  std::function<void(int64_t layer, int64_t head, int64_t seq, double* probs)> edit_attention;
  std::function<void(int64_t layer, int64_t seq, int64_t d_model, double* hidden)> edit_qk_hidden;

  bool empty() const { return !edit_attention && !edit_qk_hidden; }
};

struct ForwardOptions {
  const ForwardHooks* hooks = nullptr;
  PositionScheme positions;
  bool capture_attention = true;
  bool capture_pre_hook = false;  // pre-hook attention, for edit-locality checks
  bool capture_hidden = false;    // per-layer residual-stream outputs
  bool capture_qk = false;        // rotated Q/K per (layer, head), debug
};

struct ForwardTrace {
  Tensor logits;  // [seq x vocab]
  AttentionTensor attention;      // post-hook
  AttentionTensor attention_pre;  // pre-hook (when requested)
  std::vector<Tensor> hidden;                  // [layer] -> [seq x d_model]
  std::vector<std::vector<Tensor>> q_rotated;  // [layer][head] -> [seq x d_head]
  std::vector<std::vector<Tensor>> k_rotated;
};

// Standard rotary rotation applied to a (q, k) pair of [n x d_head] blocks.
std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k,
                                     std::span<const int64_t> positions, double base);

// Full causal forward pass. Differentiable when model parameters require
// grad and grad mode is on; any hook switches the pass to no-grad. The
// self_extend position scheme is analysis-only and rejects grad recording.
ForwardTrace forward(const Model& model, std::span<const int32_t> tokens,
                     const ForwardOptions& opts = {});

// Greedy argmax of the final logits row; ties resolve to the lowest id.
int32_t argmax_last(const Tensor& logits);

// Appends `n_new` greedily decoded tokens, re-running the full forward each
// step. `opts.hooks` (when set) applies at every step.
std::vector<int32_t> greedy_decode(const Model& model, std::vector<int32_t> tokens, int64_t n_new,
                                   const ForwardOptions& opts = {});

}  // namespace attnwave
