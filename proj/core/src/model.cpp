#include "attnwave/model.hpp"

#include <fstream>
#include <stdexcept>

#include "attnwave/tensor_io.hpp"
#include "json.hpp"

namespace attnwave {

using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (vocab_size < 1) fail("vocab_size must be >= 1");
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (d_head < 2) fail("d_head must be >= 2");
  if (d_head % 2 != 0) fail("d_head must be even (rotary pairs)");
  if (d_model != n_heads * d_head) fail("d_model must equal n_heads * d_head");
  if (max_seq < 1) fail("max_seq must be >= 1");
  if (!(rope_base > 0.0)) fail("rope_base must be > 0");
}

std::string ModelConfig::to_json_string() const {
  json j;
  j["vocab_size"] = vocab_size;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_model"] = d_model;
  j["d_head"] = d_head;
  j["max_seq"] = max_seq;
  j["rope_base"] = rope_base;
  return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int64_t>();
  cfg.n_layers = j.at("n_layers").get<int64_t>();
  cfg.n_heads = j.at("n_heads").get<int64_t>();
  cfg.d_model = j.at("d_model").get<int64_t>();
  cfg.d_head = j.at("d_head").get<int64_t>();
  cfg.max_seq = j.at("max_seq").get<int64_t>();
  cfg.rope_base = j.value("rope_base", 10000.0);
  cfg.validate();
  return cfg;
}

Model Model::init(const ModelConfig& cfg, uint64_t seed, double init_std) {
  cfg.validate();
  Model m;
  m.config = cfg;
  Rng rng(seed);
  const int64_t d = cfg.d_model, v = cfg.vocab_size, h = 4 * cfg.d_model;
  m.embedding = Tensor::randn({v, d}, rng, init_std);
  m.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& layer : m.layers) {
    layer.attn_norm = Tensor::full({d}, 1.0);
    layer.wq = Tensor::randn({d, d}, rng, init_std);
    layer.wk = Tensor::randn({d, d}, rng, init_std);
    layer.wv = Tensor::randn({d, d}, rng, init_std);
    layer.wo = Tensor::randn({d, d}, rng, init_std);
    layer.mlp_norm = Tensor::full({d}, 1.0);
    layer.w_in = Tensor::randn({d, h}, rng, init_std);
    layer.w_out = Tensor::randn({h, d}, rng, init_std);
  }
  m.final_norm = Tensor::full({d}, 1.0);
  m.unembed = Tensor::randn({d, v}, rng, init_std);
  return m;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embedding", &embedding);
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "attn_norm", &layers[i].attn_norm);
    out.emplace_back(p + "wq", &layers[i].wq);
    out.emplace_back(p + "wk", &layers[i].wk);
    out.emplace_back(p + "wv", &layers[i].wv);
    out.emplace_back(p + "wo", &layers[i].wo);
    out.emplace_back(p + "mlp_norm", &layers[i].mlp_norm);
    out.emplace_back(p + "w_in", &layers[i].w_in);
    out.emplace_back(p + "w_out", &layers[i].w_out);
  }
  out.emplace_back("final_norm", &final_norm);
  out.emplace_back("unembed", &unembed);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<Model*>(this)->named_parameters()) out.emplace_back(name, t);
  return out;
}

int64_t Model::parameter_count() const {
  int64_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t->numel();
  return n;
}

void Model::set_requires_grad(bool on) {
  for (auto& [name, t] : named_parameters()) t->set_requires_grad(on);
}

void Model::zero_grad() {
  for (auto& [name, t] : named_parameters()) t->zero_grad();
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "attnwave-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = json::parse(model.config.to_json_string());
  json index = json::object();
  for (auto& [name, t] : model.named_parameters()) {
    const std::string file = name + ".atn";
    save_tensor(dir / file, *t);
    index[name] = file;
  }
  manifest["tensors"] = index;
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("save_checkpoint: cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

Model load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + (dir / "manifest.json").string());
  json manifest;
  is >> manifest;
  if (manifest.value("format", "") != "attnwave-checkpoint")
    throw std::runtime_error("load_checkpoint: not an attnwave checkpoint: " + dir.string());
  const ModelConfig cfg = ModelConfig::from_json_string(manifest.at("config").dump());
  Model m = Model::init(cfg, 0);
  const json& index = manifest.at("tensors");
  for (auto& [name, t] : m.named_parameters()) {
    if (!index.contains(name))
      throw std::runtime_error("load_checkpoint: manifest missing tensor " + name);
    Tensor loaded = load_tensor(dir / index.at(name).get<std::string>());
    if (loaded.shape() != t->shape())
      throw std::runtime_error("load_checkpoint: tensor " + name + " has shape " +
                               shape_str(loaded.shape()) + ", expected " + shape_str(t->shape()));
    *t = loaded;
  }
  return m;
}

}  // namespace attnwave
