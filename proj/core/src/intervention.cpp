#include "attnwave/intervention.hpp"

#include <algorithm>
#include <cassert>
#include <stdexcept>

#include "attnwave/ops.hpp"
#include "json.hpp"

namespace attnwave {

using nlohmann::json;

IndexSet IndexSet::range(int64_t begin, int64_t end) {
  if (begin < 0 || end <= begin)
    throw std::invalid_argument("index set: bad range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ")");
  IndexSet s;
  s.is_range_ = true;
  s.begin_ = begin;
  s.end_ = end;
  return s;
}

IndexSet IndexSet::of(std::vector<int64_t> indices) {
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  if (!indices.empty() && indices.front() < 0)
    throw std::invalid_argument("index set: negative index");
  IndexSet s;
  s.is_range_ = false;
  s.indices_ = std::move(indices);
  return s;
}

bool IndexSet::contains(int64_t i) const {
  if (is_range_) return i >= begin_ && i < end_;
  return std::binary_search(indices_.begin(), indices_.end(), i);
}

int64_t IndexSet::size() const {
  return is_range_ ? end_ - begin_ : static_cast<int64_t>(indices_.size());
}

int64_t IndexSet::min_index() const {
  if (empty()) throw std::logic_error("index set: empty");
  return is_range_ ? begin_ : indices_.front();
}

int64_t IndexSet::max_index() const {
  if (empty()) throw std::logic_error("index set: empty");
  return is_range_ ? end_ - 1 : indices_.back();
}

std::vector<int64_t> IndexSet::to_vector() const {
  if (!is_range_) return indices_;
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(end_ - begin_));
  for (int64_t i = begin_; i < end_; ++i) out.push_back(i);
  return out;
}

namespace {

bool sets_intersect(const IndexSet& a, const IndexSet& b) {
  if (a.empty() || b.empty()) return false;
  if (a.min_index() > b.max_index() || b.min_index() > a.max_index()) return false;
  const IndexSet& smaller = a.size() <= b.size() ? a : b;
  const IndexSet& other = a.size() <= b.size() ? b : a;
  for (int64_t i : smaller.to_vector())
    if (other.contains(i)) return true;
  return false;
}

json index_set_json(const IndexSet& s) {
  json j;
  if (s.is_range()) {
    j["begin"] = s.begin();
    j["end"] = s.end();
  } else {
    j["set"] = s.indices();
  }
  return j;
}

IndexSet index_set_from_json(const json& j) {
  if (j.contains("set")) return IndexSet::of(j.at("set").get<std::vector<int64_t>>());
  return IndexSet::range(j.at("begin").get<int64_t>(), j.at("end").get<int64_t>());
}

}  // namespace

std::string to_string(RenormMode mode) {
  switch (mode) {
    case RenormMode::none: return "none";
    case RenormMode::renormalize: return "renormalize";
    case RenormMode::redistribute: return "redistribute";
  }
  return "?";
}

RenormMode renorm_mode_from_string(const std::string& s) {
  if (s == "none") return RenormMode::none;
  if (s == "renormalize") return RenormMode::renormalize;
  if (s == "redistribute" || s == "redistribute_to_dense") return RenormMode::redistribute;
  throw std::invalid_argument("unknown renorm mode '" + s + "'");
}

void InterventionPlan::validate(int64_t n_layers, int64_t seq_len, int64_t d_model) const {
  for (const AttentionEdit& e : edits) {
    if (!(e.factor > 0.0)) throw std::invalid_argument("plan: edit factor must be > 0");
    if (e.queries.empty() || e.keys.empty())
      throw std::invalid_argument("plan: edit with empty query or key set");
    if (e.layers.empty()) throw std::invalid_argument("plan: edit with empty layer set");
    for (int64_t l : e.layers)
      if (l < 0 || l >= n_layers)
        throw std::invalid_argument("plan: edit layer " + std::to_string(l) + " out of range [0, " +
                                    std::to_string(n_layers) + ")");
    if (e.queries.max_index() >= seq_len || e.keys.max_index() >= seq_len)
      throw std::invalid_argument("plan: edit span exceeds sequence length " +
                                  std::to_string(seq_len));
  }
  // pairwise target-disjointness within each layer
  for (size_t i = 0; i < edits.size(); ++i)
    for (size_t j = i + 1; j < edits.size(); ++j) {
      const AttentionEdit& a = edits[i];
      const AttentionEdit& b = edits[j];
      bool layer_overlap = false;
      for (int64_t l : a.layers)
        if (std::find(b.layers.begin(), b.layers.end(), l) != b.layers.end()) layer_overlap = true;
      if (!layer_overlap) continue;
      if (sets_intersect(a.queries, b.queries) && sets_intersect(a.keys, b.keys))
        throw std::invalid_argument("plan: edits " + std::to_string(i) + " and " +
                                    std::to_string(j) + " target the same attention entries");
    }
  if (renorm_mode == RenormMode::redistribute) {
    for (const AttentionEdit& e : edits)
      for (int64_t l : e.layers) {
        auto it = redistribute_keys.find(l);
        if (it == redistribute_keys.end() || it->second.empty())
          throw std::invalid_argument("plan: redistribute mode needs a designated key set for layer " +
                                      std::to_string(l));
        for (int64_t k : it->second)
          if (k < 0 || k >= seq_len)
            throw std::invalid_argument("plan: redistribute key out of range");
      }
  }
  if (position_scheme.kind == PositionScheme::Kind::self_extend &&
      (position_scheme.window < 1 || position_scheme.group < 1))
    throw std::invalid_argument("plan: self_extend requires window >= 1 and group >= 1");
  if (hidden_scale) {
    for (int64_t d : hidden_scale->dims)
      if (d < 0 || d >= d_model)
        throw std::invalid_argument("plan: hidden-scale dim " + std::to_string(d) +
                                    " out of range for d_model " + std::to_string(d_model));
  }
}

std::string InterventionPlan::to_json_string() const {
  json j;
  json earr = json::array();
  for (const AttentionEdit& e : edits) {
    json ej;
    ej["layers"] = e.layers;
    ej["queries"] = index_set_json(e.queries);
    ej["keys"] = index_set_json(e.keys);
    ej["factor"] = e.factor;
    earr.push_back(ej);
  }
  j["edits"] = earr;
  j["renorm_mode"] = to_string(renorm_mode);
  json ps;
  if (position_scheme.kind == PositionScheme::Kind::standard) {
    ps["kind"] = "standard";
  } else {
    ps["kind"] = "self_extend";
    ps["window"] = position_scheme.window;
    ps["group"] = position_scheme.group;
  }
  j["position_scheme"] = ps;
  if (hidden_scale) {
    json hs;
    hs["dims"] = hidden_scale->dims;
    hs["factor"] = hidden_scale->factor;
    j["hidden_scale"] = hs;
  }
  if (!redistribute_keys.empty()) {
    json rk = json::object();
    for (const auto& [layer, keys] : redistribute_keys) rk[std::to_string(layer)] = keys;
    j["redistribute_keys"] = rk;
  }
  return j.dump();
}

InterventionPlan InterventionPlan::from_json_string(const std::string& text) {
  const json j = json::parse(text);
  InterventionPlan plan;
  for (const auto& ej : j.value("edits", json::array())) {
    AttentionEdit e;
    e.layers = ej.at("layers").get<std::vector<int64_t>>();
    e.queries = index_set_from_json(ej.at("queries"));
    e.keys = index_set_from_json(ej.at("keys"));
    e.factor = ej.at("factor").get<double>();
    plan.edits.push_back(std::move(e));
  }
  plan.renorm_mode = renorm_mode_from_string(j.value("renorm_mode", "none"));
  if (j.contains("position_scheme")) {
    const json& ps = j.at("position_scheme");
    const std::string kind = ps.at("kind").get<std::string>();
    if (kind == "self_extend") {
      plan.position_scheme.kind = PositionScheme::Kind::self_extend;
      plan.position_scheme.window = ps.at("window").get<int64_t>();
      plan.position_scheme.group = ps.at("group").get<int64_t>();
    } else if (kind != "standard") {
      throw std::invalid_argument("plan: unknown position scheme '" + kind + "'");
    }
  }
  if (j.contains("hidden_scale")) {
    HiddenScale hs;
    hs.dims = j.at("hidden_scale").at("dims").get<std::vector<int64_t>>();
    hs.factor = j.at("hidden_scale").at("factor").get<double>();
    plan.hidden_scale = hs;
  }
  if (j.contains("redistribute_keys"))
    for (auto it = j.at("redistribute_keys").begin(); it != j.at("redistribute_keys").end(); ++it)
      plan.redistribute_keys[std::stoll(it.key())] = it.value().get<std::vector<int64_t>>();
  return plan;
}

void CalibrationConfig::validate() const {
  if (!(sigma >= 0.0)) throw std::invalid_argument("calibration: sigma must be >= 0");
  if (!(top_p > 0.0 && top_p <= 1.0))
    throw std::invalid_argument("calibration: top_p must be in (0, 1]");
  if (!(alpha_dense > 0.0 && alpha_sparse > 0.0))
    throw std::invalid_argument("calibration: alpha factors must be > 0");
  if (alpha_dense > alpha_sparse)
    throw std::invalid_argument("calibration: alpha_dense must not exceed alpha_sparse");
  if (layer_begin.has_value() != layer_end.has_value())
    throw std::invalid_argument("calibration: layer_begin and layer_end must be set together");
  if (layer_begin && (*layer_begin < 0 || *layer_end < *layer_begin))
    throw std::invalid_argument("calibration: bad layer range");
}

std::pair<int64_t, int64_t> middle_third(int64_t n_layers) {
  const int64_t lo = n_layers / 3;
  const int64_t hi = std::max(lo + 1, (2 * n_layers + 2) / 3);
  return {lo, std::min(hi, n_layers)};
}

std::pair<int64_t, int64_t> CalibrationConfig::layer_range(int64_t n_layers) const {
  if (!layer_begin) return middle_third(n_layers);
  return {std::min(*layer_begin, n_layers), std::min(*layer_end, n_layers)};
}

InterventionPlan build_span_plan(std::span<const SpanSpec> spans, std::span<const int64_t> layers) {
  std::vector<SpanSpec> sorted(spans.begin(), spans.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const SpanSpec& a, const SpanSpec& b) { return a.begin < b.begin; });
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i].end <= sorted[i].begin || sorted[i].begin < 0)
      throw std::invalid_argument("span plan: bad token range");
    if (!(sorted[i].factor > 0.0)) throw std::invalid_argument("span plan: factor must be > 0");
    if (i > 0 && sorted[i].begin < sorted[i - 1].end)
      throw std::invalid_argument("span plan: overlapping spans");
  }
  InterventionPlan plan;
  std::vector<int64_t> layer_list(layers.begin(), layers.end());
  for (const SpanSpec& s : sorted) {
    AttentionEdit e;
    e.layers = layer_list;
    e.queries = IndexSet::range(s.begin, s.end);
    e.keys = IndexSet::of({0});
    e.factor = s.factor;
    plan.edits.push_back(std::move(e));
  }
  return plan;
}

InterventionPlan build_calibration_plan(const DenseSparsePartition& partition,
                                        const CalibrationConfig& cfg) {
  cfg.validate();
  partition.validate();
  const auto [lo, hi] = cfg.layer_range(partition.layer_count());
  InterventionPlan plan;
  for (int64_t l = lo; l < hi; ++l) {
    for (int64_t t = 1; t < partition.seq(); ++t) {
      AttentionEdit e;
      e.layers = {l};
      e.queries = IndexSet::of({t});
      e.keys = IndexSet::of({0});
      e.factor = partition.is_dense(l, t) ? cfg.alpha_dense : cfg.alpha_sparse;
      plan.edits.push_back(std::move(e));
    }
    plan.redistribute_keys[l] = partition.dense(l);
  }
  return plan;
}

std::vector<double> apply_edits(std::span<const double> row, std::span<const RowEdit> edits,
                                RenormMode mode, std::span<const int64_t> redistribute_keys) {
  std::vector<double> out(row.begin(), row.end());
  apply_edits_inplace(out, edits, mode, redistribute_keys);
  return out;
}

void apply_edits_inplace(std::span<double> row, std::span<const RowEdit> edits, RenormMode mode,
                         std::span<const int64_t> redistribute_keys) {
  if (edits.empty()) return;
  double removed = 0.0;
  for (const RowEdit& e : edits) {
    const double before = row[static_cast<size_t>(e.key)];
    const double after = before * e.factor;
    row[static_cast<size_t>(e.key)] = after;
    removed += before - after;
    assert(after >= 0.0);  // factor > 0 keeps probabilities nonnegative
  }
  switch (mode) {
    case RenormMode::none:
      break;
    case RenormMode::renormalize: {
      double sum = 0.0;
      for (double v : row) sum += v;
      if (!(sum > 0.0)) throw std::logic_error("apply_edits: renormalize over zero mass");
      const double inv = 1.0 / sum;
      for (double& v : row) v *= inv;
      break;
    }
    case RenormMode::redistribute: {
      if (redistribute_keys.empty())
        throw std::invalid_argument("apply_edits: redistribute mode without a key set");
      const double share = removed / static_cast<double>(redistribute_keys.size());
      for (int64_t k : redistribute_keys) row[static_cast<size_t>(k)] += share;
      break;
    }
  }
}

int64_t self_extend_distance(int64_t d, int64_t window, int64_t group) {
  if (d < 0) throw std::invalid_argument("self_extend_distance: negative distance");
  if (window < 1 || group < 1)
    throw std::invalid_argument("self_extend_distance: window and group must be >= 1");
  if (d <= window) return d;
  return window + (d - window) / group;
}

Tensor scale_positional_hidden(const Tensor& hidden, std::span<const int64_t> dims, double factor) {
  return scale_columns(hidden, dims, factor);
}

InterventionPlan merge_plans(const InterventionPlan& a, const InterventionPlan& b) {
  InterventionPlan out;
  out.edits = a.edits;
  out.edits.insert(out.edits.end(), b.edits.begin(), b.edits.end());
  if (a.edits.empty()) {
    out.renorm_mode = b.renorm_mode;
  } else if (b.edits.empty()) {
    out.renorm_mode = a.renorm_mode;
  } else if (a.renorm_mode == b.renorm_mode) {
    out.renorm_mode = a.renorm_mode;
  } else {
    throw std::invalid_argument("merge_plans: renorm modes disagree");
  }
  if (a.position_scheme.kind == PositionScheme::Kind::standard) {
    out.position_scheme = b.position_scheme;
  } else if (b.position_scheme.kind == PositionScheme::Kind::standard ||
             a.position_scheme == b.position_scheme) {
    out.position_scheme = a.position_scheme;
  } else {
    throw std::invalid_argument("merge_plans: position schemes disagree");
  }
  if (a.hidden_scale && b.hidden_scale && !(*a.hidden_scale == *b.hidden_scale))
    throw std::invalid_argument("merge_plans: hidden-scale settings disagree");
  out.hidden_scale = a.hidden_scale ? a.hidden_scale : b.hidden_scale;
  out.redistribute_keys = a.redistribute_keys;
  for (const auto& [layer, keys] : b.redistribute_keys) {
    auto& dst = out.redistribute_keys[layer];
    dst.insert(dst.end(), keys.begin(), keys.end());
    std::sort(dst.begin(), dst.end());
    dst.erase(std::unique(dst.begin(), dst.end()), dst.end());
  }
  return out;
}

CompiledPlan::CompiledPlan(const InterventionPlan& plan, const ModelConfig& cfg, int64_t max_len,
                           bool final_row_only)
    : plan_(plan), max_len_(max_len), final_row_only_(final_row_only) {
  plan_.validate(cfg.n_layers, max_len, cfg.d_model);
  edits_.assign(static_cast<size_t>(cfg.n_layers), {});
  redistribute_.assign(static_cast<size_t>(cfg.n_layers), {});
  for (const auto& [layer, keys] : plan_.redistribute_keys)
    redistribute_[static_cast<size_t>(layer)] = keys;
  for (const AttentionEdit& e : plan_.edits) {
    const std::vector<int64_t> qs = e.queries.to_vector();
    const std::vector<int64_t> ks = e.keys.to_vector();
    for (int64_t l : e.layers) {
      auto& rows = edits_[static_cast<size_t>(l)];
      if (rows.empty()) rows.resize(static_cast<size_t>(max_len));
      for (int64_t q : qs)
        for (int64_t k : ks) rows[static_cast<size_t>(q)].push_back({k, e.factor});
    }
  }
  const bool has_edits = !plan_.edits.empty();
  if (has_edits) {
    hooks_.edit_attention = [this](int64_t layer, int64_t head, int64_t seq, double* probs) {
      (void)head;
      const auto& rows = edits_[static_cast<size_t>(layer)];
      if (rows.empty()) return;
      const auto& rk = redistribute_[static_cast<size_t>(layer)];
      const int64_t limit = std::min<int64_t>(seq, static_cast<int64_t>(rows.size()));
      const int64_t first = final_row_only_ ? seq - 1 : 0;
      for (int64_t q = first; q < limit; ++q) {
        const auto& redits = rows[static_cast<size_t>(q)];
        if (redits.empty()) continue;
        // keys beyond the current sequence (not generated yet) are skipped
        std::span<double> row(probs + q * seq, static_cast<size_t>(seq));
        bool in_range = true;
        for (const RowEdit& re : redits)
          if (re.key >= seq) in_range = false;
        if (in_range) {
          apply_edits_inplace(row, redits, plan_.renorm_mode, rk);
        } else {
          std::vector<RowEdit> trimmed;
          for (const RowEdit& re : redits)
            if (re.key < seq) trimmed.push_back(re);
          apply_edits_inplace(row, trimmed, plan_.renorm_mode, rk);
        }
      }
    };
  }
  if (plan_.hidden_scale && !plan_.hidden_scale->dims.empty() && plan_.hidden_scale->factor != 1.0) {
    hooks_.edit_qk_hidden = [this](int64_t layer, int64_t seq, int64_t d_model, double* hidden) {
      (void)layer;
      const HiddenScale& hs = *plan_.hidden_scale;
      for (int64_t r = 0; r < seq; ++r)
        for (int64_t d : hs.dims) hidden[r * d_model + d] *= hs.factor;
    };
  }
}

ForwardOptions CompiledPlan::forward_options() const {
  ForwardOptions opts;
  opts.hooks = &hooks_;
  opts.positions = plan_.position_scheme;
  return opts;
}

}  // namespace attnwave
