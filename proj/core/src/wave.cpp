#include "attnwave/wave.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "attnwave/format.hpp"
#include "json.hpp"

namespace attnwave {

using nlohmann::json;

namespace {

const char* kind_name(SegmentKind k) {
  switch (k) {
    case SegmentKind::instruction: return "instruction";
    case SegmentKind::document: return "document";
    case SegmentKind::query: return "query";
  }
  return "?";
}

SegmentKind kind_from_name(const std::string& s) {
  if (s == "instruction") return SegmentKind::instruction;
  if (s == "document") return SegmentKind::document;
  if (s == "query") return SegmentKind::query;
  throw std::invalid_argument("segment map: unknown kind '" + s + "'");
}

void require_nonempty(const AttentionTensor& attn, const char* op) {
  if (attn.empty()) throw std::invalid_argument(std::string(op) + ": empty attention tensor");
}

}  // namespace

SegmentMap SegmentMap::from_segments(std::vector<Segment> segments) {
  if (segments.empty()) throw std::invalid_argument("segment map: no segments");
  std::sort(segments.begin(), segments.end(),
            [](const Segment& a, const Segment& b) { return a.begin < b.begin; });
  int64_t cursor = 0;
  std::vector<int64_t> docs;
  for (const Segment& s : segments) {
    if (s.begin != cursor || s.end <= s.begin)
      throw std::invalid_argument("segment map: segments must tile [0, n) exactly");
    cursor = s.end;
    if (s.kind == SegmentKind::document) {
      if (s.index < 0) throw std::invalid_argument("segment map: document segment without index");
      docs.push_back(s.index);
    } else if (s.index != -1) {
      throw std::invalid_argument("segment map: non-document segment with index");
    }
  }
  std::sort(docs.begin(), docs.end());
  for (size_t i = 0; i < docs.size(); ++i)
    if (docs[i] != static_cast<int64_t>(i))
      throw std::invalid_argument("segment map: document indices must be contiguous from 0");
  SegmentMap m;
  m.segments_ = std::move(segments);
  m.n_tokens_ = cursor;
  m.doc_count_ = static_cast<int64_t>(docs.size());
  return m;
}

SegmentKind SegmentMap::kind_of(int64_t token) const {
  for (const Segment& s : segments_)
    if (token >= s.begin && token < s.end) return s.kind;
  throw std::out_of_range("segment map: token " + std::to_string(token) + " out of range");
}

int64_t SegmentMap::document_of(int64_t token) const {
  for (const Segment& s : segments_)
    if (token >= s.begin && token < s.end)
      return s.kind == SegmentKind::document ? s.index : -1;
  throw std::out_of_range("segment map: token " + std::to_string(token) + " out of range");
}

std::pair<int64_t, int64_t> SegmentMap::document_span(int64_t doc) const {
  for (const Segment& s : segments_)
    if (s.kind == SegmentKind::document && s.index == doc) return {s.begin, s.end};
  throw std::out_of_range("segment map: no document " + std::to_string(doc));
}

int64_t SegmentMap::slot_of(int64_t token) const {
  for (const Segment& s : segments_) {
    if (token < s.begin || token >= s.end) continue;
    switch (s.kind) {
      case SegmentKind::instruction: return 0;
      case SegmentKind::document: return 1 + s.index;
      case SegmentKind::query: return doc_count_ + 1;
    }
  }
  throw std::out_of_range("segment map: token " + std::to_string(token) + " out of range");
}

std::string SegmentMap::slot_name(int64_t slot) const {
  if (slot == 0) return "instruction";
  if (slot == doc_count_ + 1) return "query";
  if (slot >= 1 && slot <= doc_count_) return "doc" + std::to_string(slot - 1);
  throw std::out_of_range("segment map: bad slot " + std::to_string(slot));
}

int64_t SegmentMap::slot_token_count(int64_t slot) const {
  int64_t count = 0;
  for (const Segment& s : segments_) {
    int64_t sslot = s.kind == SegmentKind::instruction ? 0
                    : s.kind == SegmentKind::document  ? 1 + s.index
                                                       : doc_count_ + 1;
    if (sslot == slot) count += s.end - s.begin;
  }
  return count;
}

std::string SegmentMap::to_json_string() const {
  json arr = json::array();
  for (const Segment& s : segments_) {
    json e;
    e["kind"] = kind_name(s.kind);
    e["begin"] = s.begin;
    e["end"] = s.end;
    if (s.kind == SegmentKind::document) e["index"] = s.index;
    arr.push_back(e);
  }
  return arr.dump();
}

SegmentMap SegmentMap::from_json_string(const std::string& text) {
  const json arr = json::parse(text);
  std::vector<Segment> segs;
  for (const auto& e : arr) {
    Segment s;
    s.kind = kind_from_name(e.at("kind").get<std::string>());
    s.begin = e.at("begin").get<int64_t>();
    s.end = e.at("end").get<int64_t>();
    s.index = s.kind == SegmentKind::document ? e.at("index").get<int64_t>() : -1;
    segs.push_back(s);
  }
  return from_segments(std::move(segs));
}

DenseSparsePartition::DenseSparsePartition(int64_t n_layers, int64_t seq)
    : seq_(seq), dense_(static_cast<size_t>(n_layers)) {
  if (n_layers < 1 || seq < 1)
    throw std::invalid_argument("partition: need at least one layer and one token");
}

void DenseSparsePartition::set_dense(int64_t layer, std::vector<int64_t> tokens) {
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  for (int64_t t : tokens)
    if (t < 1 || t >= seq_)
      throw std::invalid_argument("partition: token " + std::to_string(t) +
                                  " outside (0, n); initial token is never dense");
  dense_.at(static_cast<size_t>(layer)) = std::move(tokens);
}

const std::vector<int64_t>& DenseSparsePartition::dense(int64_t layer) const {
  return dense_.at(static_cast<size_t>(layer));
}

std::vector<int64_t> DenseSparsePartition::sparse(int64_t layer) const {
  const auto& d = dense_.at(static_cast<size_t>(layer));
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(seq_ - 1));
  size_t di = 0;
  for (int64_t t = 1; t < seq_; ++t) {
    if (di < d.size() && d[di] == t) {
      ++di;
    } else {
      out.push_back(t);
    }
  }
  return out;
}

bool DenseSparsePartition::is_dense(int64_t layer, int64_t token) const {
  const auto& d = dense_.at(static_cast<size_t>(layer));
  return std::binary_search(d.begin(), d.end(), token);
}

void DenseSparsePartition::validate() const {
  for (size_t l = 0; l < dense_.size(); ++l) {
    const auto& d = dense_[l];
    for (size_t i = 0; i < d.size(); ++i) {
      if (d[i] < 1 || d[i] >= seq_) throw std::logic_error("partition: token out of (0, n)");
      if (i > 0 && d[i] <= d[i - 1]) throw std::logic_error("partition: dense set not sorted-unique");
    }
  }
}

std::vector<double> final_row_attention(const AttentionTensor& attn, std::optional<int64_t> layer) {
  require_nonempty(attn, "final_row_attention");
  const int64_t n = attn.seq;
  const int64_t lo = layer ? *layer : 0;
  const int64_t hi = layer ? *layer + 1 : attn.n_layers;
  if (lo < 0 || hi > attn.n_layers || lo >= hi)
    throw std::invalid_argument("final_row_attention: empty layer selection");
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  for (int64_t l = lo; l < hi; ++l)
    for (int64_t h = 0; h < attn.n_heads; ++h) {
      const double* row = attn.row(l, h, n - 1);
      for (int64_t k = 0; k < n; ++k) out[static_cast<size_t>(k)] += row[k];
    }
  const double inv = 1.0 / static_cast<double>((hi - lo) * attn.n_heads);
  for (double& v : out) v *= inv;
  return out;
}

std::vector<double> mean_row_attention(const AttentionTensor& attn, std::optional<int64_t> layer) {
  require_nonempty(attn, "mean_row_attention");
  const int64_t n = attn.seq;
  const int64_t lo = layer ? *layer : 0;
  const int64_t hi = layer ? *layer + 1 : attn.n_layers;
  if (lo < 0 || hi > attn.n_layers || lo >= hi)
    throw std::invalid_argument("mean_row_attention: empty layer selection");
  std::vector<double> out(static_cast<size_t>(n), 0.0);
  for (int64_t k = 0; k < n; ++k) {
    double acc = 0.0;
    int64_t count = 0;
    for (int64_t l = lo; l < hi; ++l)
      for (int64_t h = 0; h < attn.n_heads; ++h)
        for (int64_t q = k; q < n; ++q) {
          acc += attn.at(l, h, q, k);
          ++count;
        }
    out[static_cast<size_t>(k)] = acc / static_cast<double>(count);
  }
  return out;
}

std::vector<int64_t> top_share(const std::vector<double>& weights, const SegmentMap& segmap,
                               double top_p) {
  const int64_t n = static_cast<int64_t>(weights.size());
  if (n != segmap.size())
    throw std::invalid_argument("top_share: " + std::to_string(n) + " weights for segment map of " +
                                std::to_string(segmap.size()) + " tokens");
  if (!(top_p > 0.0 && top_p <= 1.0))
    throw std::invalid_argument("top_share: top_p must be in (0, 1]");
  const int64_t k = static_cast<int64_t>(std::ceil(top_p * static_cast<double>(n)));
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (weights[static_cast<size_t>(a)] != weights[static_cast<size_t>(b)])
      return weights[static_cast<size_t>(a)] > weights[static_cast<size_t>(b)];
    return a < b;  // ties break toward the lower index
  });
  std::vector<int64_t> counts(static_cast<size_t>(segmap.slot_count()), 0);
  for (int64_t i = 0; i < k; ++i) ++counts[static_cast<size_t>(segmap.slot_of(order[static_cast<size_t>(i)]))];
  return counts;
}

std::vector<int64_t> detect_dense(const std::vector<int64_t>& doc_counts, double sigma) {
  if (doc_counts.empty()) throw std::invalid_argument("detect_dense: no documents");
  double sum = 0.0;
  for (int64_t c : doc_counts) sum += static_cast<double>(c);
  const double threshold = sigma * sum / static_cast<double>(doc_counts.size());
  std::vector<int64_t> dense;
  for (size_t m = 0; m < doc_counts.size(); ++m)
    if (static_cast<double>(doc_counts[m]) > threshold) dense.push_back(static_cast<int64_t>(m));
  return dense;
}

DenseSparsePartition build_partition(const AttentionTensor& attn, const SegmentMap& segmap,
                                     double top_p, double sigma) {
  require_nonempty(attn, "build_partition");
  if (attn.seq != segmap.size())
    throw std::invalid_argument("build_partition: attention seq " + std::to_string(attn.seq) +
                                " vs segment map of " + std::to_string(segmap.size()));
  const int64_t docs = segmap.document_count();
  if (docs < 1) throw std::invalid_argument("build_partition: segment map has no documents");
  DenseSparsePartition part(attn.n_layers, attn.seq);
  for (int64_t l = 0; l < attn.n_layers; ++l) {
    const std::vector<double> row = final_row_attention(attn, l);
    const std::vector<int64_t> counts = top_share(row, segmap, top_p);
    std::vector<int64_t> doc_counts(counts.begin() + 1, counts.begin() + 1 + docs);
    std::vector<int64_t> tokens;
    for (int64_t m : detect_dense(doc_counts, sigma)) {
      const auto [b, e] = segmap.document_span(m);
      for (int64_t t = std::max<int64_t>(b, 1); t < e; ++t) tokens.push_back(t);
    }
    part.set_dense(l, std::move(tokens));
  }
  return part;
}

std::vector<double> sink_profile(const AttentionTensor& attn) {
  require_nonempty(attn, "sink_profile");
  std::vector<double> out(static_cast<size_t>(attn.n_layers), 0.0);
  for (int64_t l = 0; l < attn.n_layers; ++l) {
    double acc = 0.0;
    for (int64_t h = 0; h < attn.n_heads; ++h)
      for (int64_t q = 0; q < attn.seq; ++q) acc += attn.at(l, h, q, 0);
    out[static_cast<size_t>(l)] = acc / static_cast<double>(attn.n_heads * attn.seq);
  }
  return out;
}

std::vector<double> initial_decay(const AttentionTensor& attn, int64_t layer) {
  require_nonempty(attn, "initial_decay");
  if (layer < 0 || layer >= attn.n_layers)
    throw std::invalid_argument("initial_decay: layer out of range");
  std::vector<double> out(static_cast<size_t>(attn.seq), 0.0);
  for (int64_t q = 0; q < attn.seq; ++q) {
    double acc = 0.0;
    for (int64_t h = 0; h < attn.n_heads; ++h) acc += attn.at(layer, h, q, 0);
    out[static_cast<size_t>(q)] = acc / static_cast<double>(attn.n_heads);
  }
  return out;
}

std::pair<double, double> info_flow(const AttentionTensor& attn, const SegmentMap& segmap,
                                    int64_t layer) {
  require_nonempty(attn, "info_flow");
  if (attn.seq != segmap.size())
    throw std::invalid_argument("info_flow: attention seq vs segment map size mismatch");
  const std::vector<double> row = final_row_attention(attn, layer);
  double doc = 0.0, ins = 0.0, total = 0.0;
  for (int64_t t = 0; t < segmap.size(); ++t) {
    const double v = row[static_cast<size_t>(t)];
    total += v;
    switch (segmap.kind_of(t)) {
      case SegmentKind::document: doc += v; break;
      case SegmentKind::instruction: ins += v; break;
      case SegmentKind::query: break;
    }
  }
  // softmax rows cannot have zero mass; guarded for edited tensors
  if (total <= 0.0) throw std::logic_error("info_flow: zero attention mass");
  return {doc / total, ins / total};
}

WaveReport& WaveReport::accumulate(const WaveReport& other) {
  if (per_layer.empty()) {
    *this = other;
    return *this;
  }
  for (size_t l = 0; l < per_layer.size(); ++l)
    for (size_t s = 0; s < per_layer[l].size(); ++s) {
      per_layer[l][s].mean_attn += other.per_layer[l][s].mean_attn;
      per_layer[l][s].topa_count += other.per_layer[l][s].topa_count;
      per_layer[l][s].topa_share += other.per_layer[l][s].topa_share;
    }
  for (size_t s = 0; s < layer_avg.size(); ++s) {
    layer_avg[s].mean_attn += other.layer_avg[s].mean_attn;
    layer_avg[s].topa_count += other.layer_avg[s].topa_count;
    layer_avg[s].topa_share += other.layer_avg[s].topa_share;
  }
  return *this;
}

WaveReport& WaveReport::scale_by(double factor) {
  for (auto& layer : per_layer)
    for (auto& s : layer) {
      s.mean_attn *= factor;
      s.topa_count *= factor;
      s.topa_share *= factor;
    }
  for (auto& s : layer_avg) {
    s.mean_attn *= factor;
    s.topa_count *= factor;
    s.topa_share *= factor;
  }
  return *this;
}

namespace {

std::vector<WaveSegmentStat> wave_stats_for_row(const std::vector<double>& row,
                                                const SegmentMap& segmap, double top_p) {
  const int64_t slots = segmap.slot_count();
  std::vector<WaveSegmentStat> stats(static_cast<size_t>(slots));
  std::vector<double> sums(static_cast<size_t>(slots), 0.0);
  for (int64_t t = 0; t < segmap.size(); ++t)
    sums[static_cast<size_t>(segmap.slot_of(t))] += row[static_cast<size_t>(t)];
  const std::vector<int64_t> counts = top_share(row, segmap, top_p);
  for (int64_t s = 0; s < slots; ++s) {
    const int64_t tokens = segmap.slot_token_count(s);
    stats[static_cast<size_t>(s)].mean_attn =
        tokens > 0 ? sums[static_cast<size_t>(s)] / static_cast<double>(tokens) : 0.0;
    stats[static_cast<size_t>(s)].topa_count = static_cast<double>(counts[static_cast<size_t>(s)]);
    stats[static_cast<size_t>(s)].topa_share =
        tokens > 0 ? static_cast<double>(counts[static_cast<size_t>(s)]) / static_cast<double>(tokens)
                   : 0.0;
  }
  return stats;
}

}  // namespace

WaveReport wave_report(const AttentionTensor& attn, const SegmentMap& segmap, double top_p,
                       RowMode mode) {
  require_nonempty(attn, "wave_report");
  WaveReport report;
  for (int64_t s = 0; s < segmap.slot_count(); ++s) report.slot_names.push_back(segmap.slot_name(s));
  auto row_for = [&](std::optional<int64_t> layer) {
    return mode == RowMode::final_row ? final_row_attention(attn, layer)
                                      : mean_row_attention(attn, layer);
  };
  for (int64_t l = 0; l < attn.n_layers; ++l)
    report.per_layer.push_back(wave_stats_for_row(row_for(l), segmap, top_p));
  report.layer_avg = wave_stats_for_row(row_for(std::nullopt), segmap, top_p);
  return report;
}

FlowReport& FlowReport::accumulate(const FlowReport& other) {
  if (flow_doc.empty()) {
    *this = other;
    return *this;
  }
  for (size_t l = 0; l < flow_doc.size(); ++l) {
    flow_doc[l] += other.flow_doc[l];
    flow_ins[l] += other.flow_ins[l];
  }
  return *this;
}

FlowReport& FlowReport::scale_by(double factor) {
  for (auto& v : flow_doc) v *= factor;
  for (auto& v : flow_ins) v *= factor;
  return *this;
}

FlowReport flow_report(const AttentionTensor& attn, const SegmentMap& segmap) {
  FlowReport report;
  for (int64_t l = 0; l < attn.n_layers; ++l) {
    const auto [doc, ins] = info_flow(attn, segmap, l);
    report.flow_doc.push_back(doc);
    report.flow_ins.push_back(ins);
  }
  return report;
}

std::string wave_csv(const WaveReport& report) {
  std::string out = "layer,segment,mean_attn,topa_count,topa_share\n";
  auto emit_row = [&](const std::string& layer, const std::string& segment,
                      const WaveSegmentStat& s) {
    out += layer + "," + segment + "," + fmt_g9(s.mean_attn) + "," + fmt_g9(s.topa_count) + "," +
           fmt_g9(s.topa_share) + "\n";
  };
  for (size_t l = 0; l < report.per_layer.size(); ++l)
    for (size_t s = 0; s < report.per_layer[l].size(); ++s)
      emit_row(std::to_string(l), report.slot_names[s], report.per_layer[l][s]);
  for (size_t s = 0; s < report.layer_avg.size(); ++s)
    emit_row("avg", report.slot_names[s], report.layer_avg[s]);
  return out;
}

std::string flow_csv(const FlowReport& report) {
  std::string out = "layer,flow_doc,flow_ins\n";
  for (size_t l = 0; l < report.flow_doc.size(); ++l)
    out += std::to_string(l) + "," + fmt_g9(report.flow_doc[l]) + "," + fmt_g9(report.flow_ins[l]) +
           "\n";
  return out;
}

std::string sink_csv(const std::vector<double>& per_layer) {
  std::string out = "layer,sink_attn\n";
  for (size_t l = 0; l < per_layer.size(); ++l)
    out += std::to_string(l) + "," + fmt_g9(per_layer[l]) + "\n";
  return out;
}

std::string decay_csv(const std::vector<std::vector<double>>& per_layer_series) {
  std::string out = "layer,query,initial_attn\n";
  for (size_t l = 0; l < per_layer_series.size(); ++l)
    for (size_t q = 0; q < per_layer_series[l].size(); ++q)
      out += std::to_string(l) + "," + std::to_string(q) + "," + fmt_g9(per_layer_series[l][q]) + "\n";
  return out;
}

namespace {

json stat_json(const WaveSegmentStat& s) {
  json e;
  e["mean_attn"] = s.mean_attn;
  e["topa_count"] = s.topa_count;
  e["topa_share"] = s.topa_share;
  return e;
}

}  // namespace

std::string wave_json(const WaveReport& report) {
  json j;
  j["segments"] = report.slot_names;
  json layers = json::array();
  for (const auto& layer : report.per_layer) {
    json row = json::array();
    for (const auto& s : layer) row.push_back(stat_json(s));
    layers.push_back(row);
  }
  j["per_layer"] = layers;
  json avg = json::array();
  for (const auto& s : report.layer_avg) avg.push_back(stat_json(s));
  j["layer_avg"] = avg;
  return j.dump(2) + "\n";
}

std::string flow_json(const FlowReport& report) {
  json j;
  j["flow_doc"] = report.flow_doc;
  j["flow_ins"] = report.flow_ins;
  return j.dump(2) + "\n";
}

std::string sink_json(const std::vector<double>& per_layer) {
  json j;
  j["sink_attn"] = per_layer;
  return j.dump(2) + "\n";
}

std::string decay_json(const std::vector<std::vector<double>>& per_layer_series) {
  json j;
  j["initial_attn"] = per_layer_series;
  return j.dump(2) + "\n";
}

}  // namespace attnwave
