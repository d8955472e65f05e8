#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "attnwave/tensor.hpp"

namespace attnwave {

struct ModelConfig {
  int64_t vocab_size = 512;
  int64_t n_layers = 2;
  int64_t n_heads = 2;
  int64_t d_model = 64;
  int64_t d_head = 32;
  int64_t max_seq = 512;
  double rope_base = 10000.0;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  std::string to_json_string() const;
  static ModelConfig from_json_string(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor attn_norm;  // [d_model]
  Tensor wq, wk, wv, wo;  // [d_model x d_model]
  Tensor mlp_norm;   // [d_model]
  Tensor w_in;       // [d_model x 4*d_model]
  Tensor w_out;      // [4*d_model x d_model]
};

// Pre-norm decoder-only transformer, no biases, untied unembedding, MLP
// hidden width fixed at 4*d_model.
struct Model {
  ModelConfig config;
  Tensor embedding;  // [vocab x d_model]
  std::vector<LayerParams> layers;
  Tensor final_norm;  // [d_model]
  Tensor unembed;     // [d_model x vocab]

  // Gaussian(0, init_std) weights, norm gains = 1; deterministic in seed.
  static Model init(const ModelConfig& cfg, uint64_t seed, double init_std = 0.08);

  // Stable parameter order (used by the optimizer and checkpoints).
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
  int64_t parameter_count() const;
  void set_requires_grad(bool on);
  void zero_grad();
  bool trainable() const { return embedding.requires_grad(); }
};

// Checkpoint directory: manifest.json (config + named-tensor index) plus one
// binary tensor file per parameter.
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

}  // namespace attnwave
