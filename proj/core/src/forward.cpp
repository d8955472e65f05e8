#include "attnwave/forward.hpp"

#include <cmath>
#include <stdexcept>

#include "attnwave/intervention.hpp"
#include "attnwave/ops.hpp"

namespace attnwave {

AttentionTensor::AttentionTensor(int64_t layers, int64_t heads, int64_t seq_len)
    : n_layers(layers),
      n_heads(heads),
      seq(seq_len),
      values(static_cast<size_t>(layers * heads * seq_len * seq_len), 0.0) {}

std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k,
                                     std::span<const int64_t> positions, double base) {
  return {rope_rows(q, positions, base), rope_rows(k, positions, base)};
}

namespace {

// Causal attention probabilities under the self-extend scheme: the relative
// distance q-k is remapped through self_extend_distance and fed to the
// rotary rotation of the query vector, so score(q, k) =
// dot(rotate(q_row, d_eff), k_row) / sqrt(d_head).
Tensor self_extend_probs(const Tensor& q, const Tensor& k, int64_t window, int64_t group,
                         double base) {
  const int64_t n = q.rows(), d = q.cols();
  const int64_t half = d / 2;
  std::vector<double> freq(static_cast<size_t>(half));
  for (int64_t j = 0; j < half; ++j)
    freq[static_cast<size_t>(j)] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
  // cos/sin tables for every effective distance that can occur
  std::vector<double> cs(static_cast<size_t>(n * half)), sn(static_cast<size_t>(n * half));
  for (int64_t dist = 0; dist < n; ++dist)
    for (int64_t j = 0; j < half; ++j) {
      const double ang = static_cast<double>(dist) * freq[static_cast<size_t>(j)];
      cs[static_cast<size_t>(dist * half + j)] = std::cos(ang);
      sn[static_cast<size_t>(dist * half + j)] = std::sin(ang);
    }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor scores({n, n});
  for (int64_t qi = 0; qi < n; ++qi) {
    const double* qrow = q.row_ptr(qi);
    double* srow = scores.row_ptr(qi);
    for (int64_t ki = 0; ki <= qi; ++ki) {
      const int64_t d_eff = self_extend_distance(qi - ki, window, group);
      const double* c = cs.data() + d_eff * half;
      const double* s = sn.data() + d_eff * half;
      const double* krow = k.row_ptr(ki);
      double acc = 0.0;
      for (int64_t j = 0; j < half; ++j) {
        const double a = qrow[2 * j], b = qrow[2 * j + 1];
        acc += (a * c[j] - b * s[j]) * krow[2 * j] + (a * s[j] + b * c[j]) * krow[2 * j + 1];
      }
      srow[ki] = acc * inv_sqrt_d;
    }
  }
  return causal_softmax(scores);
}

void copy_probs(AttentionTensor& dst, int64_t layer, int64_t head, const Tensor& probs) {
  const int64_t n = probs.rows();
  double* out = dst.values.data() + ((layer * dst.n_heads + head) * dst.seq) * dst.seq;
  const double* src = probs.data();
  for (int64_t i = 0; i < n * n; ++i) out[i] = src[i];
}

ForwardTrace forward_impl(const Model& model, std::span<const int32_t> tokens,
                          const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config;
  const int64_t n = static_cast<int64_t>(tokens.size());
  if (n < 1) throw std::invalid_argument("forward: empty token sequence");
  if (n > cfg.max_seq)
    throw std::invalid_argument("forward: sequence length " + std::to_string(n) +
                                " exceeds max_seq " + std::to_string(cfg.max_seq));
  for (int32_t t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw std::invalid_argument("forward: token id " + std::to_string(t) +
                                  " out of range for vocab " + std::to_string(cfg.vocab_size));
  if (opts.positions.kind == PositionScheme::Kind::self_extend) {
    if (opts.positions.window < 1 || opts.positions.group < 1)
      throw std::invalid_argument("forward: self_extend requires window >= 1 and group >= 1");
    if (grad_enabled() && model.trainable())
      throw std::logic_error("forward: self_extend positions are analysis-only (no grad)");
  }

  std::vector<int64_t> positions(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) positions[static_cast<size_t>(i)] = i;

  const bool hooked = opts.hooks != nullptr && !opts.hooks->empty();
  ForwardTrace trace;
  if (opts.capture_attention) trace.attention = AttentionTensor(cfg.n_layers, cfg.n_heads, n);
  if (opts.capture_pre_hook) trace.attention_pre = AttentionTensor(cfg.n_layers, cfg.n_heads, n);
  if (opts.capture_qk) {
    trace.q_rotated.resize(static_cast<size_t>(cfg.n_layers));
    trace.k_rotated.resize(static_cast<size_t>(cfg.n_layers));
  }

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  Tensor x = embedding_lookup(model.embedding, tokens);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = model.layers[static_cast<size_t>(l)];
    Tensor h = rms_norm(x, lp.attn_norm);
    Tensor h_qk = h;
    if (hooked && opts.hooks->edit_qk_hidden) {
      h_qk = h.clone_values();
      opts.hooks->edit_qk_hidden(l, n, cfg.d_model, h_qk.data());
    }
    Tensor q = matmul(h_qk, lp.wq);
    Tensor k = matmul(h_qk, lp.wk);
    Tensor v = matmul(h, lp.wv);
    std::vector<Tensor> mixed;
    mixed.reserve(static_cast<size_t>(cfg.n_heads));
    for (int64_t hd = 0; hd < cfg.n_heads; ++hd) {
      const int64_t b = hd * cfg.d_head, e = (hd + 1) * cfg.d_head;
      Tensor qh = slice_cols(q, b, e);
      Tensor kh = slice_cols(k, b, e);
      Tensor vh = slice_cols(v, b, e);
      Tensor probs;
      if (opts.positions.kind == PositionScheme::Kind::standard) {
        Tensor qr = rope_rows(qh, positions, cfg.rope_base);
        Tensor kr = rope_rows(kh, positions, cfg.rope_base);
        if (opts.capture_qk) {
          trace.q_rotated[static_cast<size_t>(l)].push_back(qr.clone_values());
          trace.k_rotated[static_cast<size_t>(l)].push_back(kr.clone_values());
        }
        probs = causal_softmax(scale(matmul(qr, transpose(kr)), inv_sqrt_d));
      } else {
        probs = self_extend_probs(qh, kh, opts.positions.window, opts.positions.group,
                                  cfg.rope_base);
      }
      if (opts.capture_pre_hook) copy_probs(trace.attention_pre, l, hd, probs);
      if (hooked && opts.hooks->edit_attention) opts.hooks->edit_attention(l, hd, n, probs.data());
      if (opts.capture_attention) copy_probs(trace.attention, l, hd, probs);
      mixed.push_back(matmul(probs, vh));
    }
    x = add(x, matmul(concat_cols(mixed), lp.wo));
    Tensor h2 = rms_norm(x, lp.mlp_norm);
    x = add(x, matmul(gelu(matmul(h2, lp.w_in)), lp.w_out));
    if (opts.capture_hidden) trace.hidden.push_back(x.clone_values());
  }
  trace.logits = matmul(rms_norm(x, model.final_norm), model.unembed);
  return trace;
}

}  // namespace

ForwardTrace forward(const Model& model, std::span<const int32_t> tokens,
                     const ForwardOptions& opts) {
  const bool hooked = opts.hooks != nullptr && !opts.hooks->empty();
  if (hooked || opts.positions.kind != PositionScheme::Kind::standard) {
    NoGradGuard ng;  // interventions edit buffers in place; never recorded
    return forward_impl(model, tokens, opts);
  }
  return forward_impl(model, tokens, opts);
}

int32_t argmax_last(const Tensor& logits) {
  const int64_t n = logits.rows(), v = logits.cols();
  const double* row = logits.row_ptr(n - 1);
  int64_t best = 0;
  for (int64_t c = 1; c < v; ++c)
    if (row[c] > row[best]) best = c;
  return static_cast<int32_t>(best);
}

std::vector<int32_t> greedy_decode(const Model& model, std::vector<int32_t> tokens, int64_t n_new,
                                   const ForwardOptions& opts) {
  NoGradGuard ng;
  ForwardOptions step_opts = opts;
  step_opts.capture_attention = false;
  step_opts.capture_pre_hook = false;
  step_opts.capture_hidden = false;
  step_opts.capture_qk = false;
  for (int64_t i = 0; i < n_new; ++i) {
    ForwardTrace trace = forward(model, tokens, step_opts);
    tokens.push_back(argmax_last(trace.logits));
  }
  return tokens;
}

}  // namespace attnwave
