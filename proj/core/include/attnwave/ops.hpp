#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "attnwave/tensor.hpp"

namespace attnwave {

// Differentiable tensor ops. Every op validates shapes up front and throws
// std::invalid_argument with a shape report on mismatch. Graph nodes are
// recorded only when grad_enabled() and some input requires grad.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m x k] * [k x n]
Tensor transpose(const Tensor& a);                // 2-D
Tensor add(const Tensor& a, const Tensor& b);     // same shape
Tensor mul(const Tensor& a, const Tensor& b);     // elementwise, same shape
Tensor scale(const Tensor& a, double c);

// Multiply the listed columns of a [n x d] matrix by `factor`; all other
// entries pass through untouched (bit-identical).
Tensor scale_columns(const Tensor& x, std::span<const int64_t> dims, double factor);

Tensor gelu(const Tensor& x);  // tanh approximation

// Row-wise RMS normalization with a learned gain: y = x / rms(x) * weight.
Tensor rms_norm(const Tensor& x, const Tensor& weight, double eps = 1e-5);

// Softmax over the last axis with max-subtraction; each output slice is
// nonnegative and sums to 1. Non-finite inputs are rejected.
Tensor softmax_last_axis(const Tensor& x);

// Row q of a [n x n] score matrix is softmaxed over keys 0..q; entries with
// key > query are exactly zero.
Tensor causal_softmax(const Tensor& scores);

Tensor embedding_lookup(const Tensor& table, std::span<const int32_t> ids);

Tensor slice_cols(const Tensor& x, int64_t begin, int64_t end);  // [begin, end)
Tensor concat_cols(const std::vector<Tensor>& xs);

// Rotary rotation of each row's even/odd pairs by angles[r] * base^(-2j/d).
// `positions` may be any integers >= 0 (effective distances work too).
Tensor rope_rows(const Tensor& x, std::span<const int64_t> positions, double base);

Tensor sum_all(const Tensor& x);  // scalar

// Mean over masked rows of next-token cross-entropy: logits [n x V],
// targets[r] is the label for row r, mask[r] != 0 selects the row.
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                     std::span<const uint8_t> mask);

}  // namespace attnwave
