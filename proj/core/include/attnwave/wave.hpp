#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnwave/forward.hpp"

namespace attnwave {

enum class SegmentKind { instruction, document, query };

struct Segment {
  SegmentKind kind = SegmentKind::instruction;
  int64_t index = -1;  // document index; -1 otherwise
  int64_t begin = 0;   // token range [begin, end)
  int64_t end = 0;

  bool operator==(const Segment&) const = default;
};

// Per-token segment annotation. Segments must tile [0, n) exactly and
// document indices must be contiguous from 0.
class SegmentMap {
 public:
  SegmentMap() = default;
  static SegmentMap from_segments(std::vector<Segment> segments);

  int64_t size() const { return n_tokens_; }
  int64_t document_count() const { return doc_count_; }
  const std::vector<Segment>& segments() const { return segments_; }

  SegmentKind kind_of(int64_t token) const;
  int64_t document_of(int64_t token) const;  // -1 for non-document tokens
  std::pair<int64_t, int64_t> document_span(int64_t doc) const;

  // Canonical report slot: 0 = instruction, 1..M = documents, M+1 = query.
  int64_t slot_count() const { return doc_count_ + 2; }
  int64_t slot_of(int64_t token) const;
  std::string slot_name(int64_t slot) const;
  int64_t slot_token_count(int64_t slot) const;

  std::string to_json_string() const;
  static SegmentMap from_json_string(const std::string& text);

  bool operator==(const SegmentMap&) const = default;

 private:
  std::vector<Segment> segments_;
  int64_t n_tokens_ = 0;
  int64_t doc_count_ = 0;
};

// Per-layer split of token indices 1..n-1 into attention-dense and
// attention-sparse sets (token 0, the initial token, belongs to neither).
class DenseSparsePartition {
 public:
  DenseSparsePartition() = default;
  DenseSparsePartition(int64_t n_layers, int64_t seq);

  void set_dense(int64_t layer, std::vector<int64_t> tokens);
  const std::vector<int64_t>& dense(int64_t layer) const;
  std::vector<int64_t> sparse(int64_t layer) const;  // complement within 1..n-1
  bool is_dense(int64_t layer, int64_t token) const;

  int64_t layer_count() const { return static_cast<int64_t>(dense_.size()); }
  int64_t seq() const { return seq_; }
  void validate() const;

 private:
  int64_t seq_ = 0;
  std::vector<std::vector<int64_t>> dense_;  // sorted per layer
};

// Final query row of the attention tensor, averaged over heads (and over
// layers when `layer` is std::nullopt).
std::vector<double> final_row_attention(const AttentionTensor& attn, std::optional<int64_t> layer);

// Row-averaged variant: attention toward each key, averaged over heads (and
// layers when unset) and over the query rows that can see the key.
std::vector<double> mean_row_attention(const AttentionTensor& attn, std::optional<int64_t> layer);

// Top-share: selects k = ceil(top_p * n) tokens by weight (ties break toward
// the lower index) and counts the selection per segment slot.
std::vector<int64_t> top_share(const std::vector<double>& weights, const SegmentMap& segmap,
                               double top_p);

// Document m is dense iff counts[m] > sigma * mean(counts), strictly.
std::vector<int64_t> detect_dense(const std::vector<int64_t>& doc_counts, double sigma);

// Full detection pipeline: per layer, final-row attention -> top-share
// counts -> dense documents -> token partition. Instruction and query
// tokens are always sparse.
DenseSparsePartition build_partition(const AttentionTensor& attn, const SegmentMap& segmap,
                                     double top_p, double sigma);

// Mean attention to key 0 over heads and query rows, per layer.
std::vector<double> sink_profile(const AttentionTensor& attn);

// Head-mean attention to key 0 for each query row of one layer.
std::vector<double> initial_decay(const AttentionTensor& attn, int64_t layer);

// Fractions of the final row's attention mass on document / instruction
// tokens for one layer (head-averaged).
std::pair<double, double> info_flow(const AttentionTensor& attn, const SegmentMap& segmap,
                                    int64_t layer);

struct WaveSegmentStat {
  double mean_attn = 0.0;
  double topa_count = 0.0;  // fractional once averaged across instances
  double topa_share = 0.0;  // count / segment token count
};

// Wave statistics per layer plus a layer-averaged row; slots follow
// SegmentMap::slot_of.
struct WaveReport {
  std::vector<std::string> slot_names;
  std::vector<std::vector<WaveSegmentStat>> per_layer;  // [layer][slot]
  std::vector<WaveSegmentStat> layer_avg;

  WaveReport& accumulate(const WaveReport& other);
  WaveReport& scale_by(double factor);
};

enum class RowMode { final_row, row_mean };

WaveReport wave_report(const AttentionTensor& attn, const SegmentMap& segmap, double top_p,
                       RowMode mode = RowMode::final_row);

struct FlowReport {
  std::vector<double> flow_doc;  // per layer
  std::vector<double> flow_ins;

  FlowReport& accumulate(const FlowReport& other);
  FlowReport& scale_by(double factor);
};

FlowReport flow_report(const AttentionTensor& attn, const SegmentMap& segmap);

// CSV emission; floats printed with 9 significant digits.
std::string wave_csv(const WaveReport& report);
std::string flow_csv(const FlowReport& report);
std::string sink_csv(const std::vector<double>& per_layer);
std::string decay_csv(const std::vector<std::vector<double>>& per_layer_series);

// JSON equivalents for --format json.
std::string wave_json(const WaveReport& report);
std::string flow_json(const FlowReport& report);
std::string sink_json(const std::vector<double>& per_layer);
std::string decay_json(const std::vector<std::vector<double>>& per_layer_series);

}  // namespace attnwave
