#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnwave/forward.hpp"
#include "attnwave/wave.hpp"

namespace attnwave {

// Token-index set, stored either as a half-open range or an explicit sorted
// list. Both forms serialize distinctly so plans round-trip byte-stably.
class IndexSet {
 public:
  IndexSet() = default;
  static IndexSet range(int64_t begin, int64_t end);  // [begin, end)
  static IndexSet of(std::vector<int64_t> indices);   // deduplicated, sorted

  bool contains(int64_t i) const;
  int64_t size() const;
  bool empty() const { return size() == 0; }
  int64_t min_index() const;
  int64_t max_index() const;  // inclusive
  std::vector<int64_t> to_vector() const;
  bool is_range() const { return is_range_; }
  int64_t begin() const { return begin_; }
  int64_t end() const { return end_; }
  const std::vector<int64_t>& indices() const { return indices_; }

  bool operator==(const IndexSet&) const = default;

 private:
  bool is_range_ = true;
  int64_t begin_ = 0, end_ = 0;
  std::vector<int64_t> indices_;
};

// One multiplicative edit: for every layer in `layers`, attention entries
// (query in queries, key in keys) are scaled by `factor`.
struct AttentionEdit {
  std::vector<int64_t> layers;
  IndexSet queries;
  IndexSet keys;
  double factor = 1.0;

  bool operator==(const AttentionEdit&) const = default;
};

enum class RenormMode { none, renormalize, redistribute };

std::string to_string(RenormMode mode);
RenormMode renorm_mode_from_string(const std::string& s);

// Uniform scaling of selected hidden-state dimensions before the Q/K
// projections (positional-hidden-state baseline).
struct HiddenScale {
  std::vector<int64_t> dims;
  double factor = 1.0;

  bool operator==(const HiddenScale&) const = default;
};

struct InterventionPlan {
  std::vector<AttentionEdit> edits;
  RenormMode renorm_mode = RenormMode::none;
  PositionScheme position_scheme;
  std::optional<HiddenScale> hidden_scale;
  // Designated key set per layer for RenormMode::redistribute.
  std::map<int64_t, std::vector<int64_t>> redistribute_keys;

  bool empty() const {
    return edits.empty() && !hidden_scale &&
           position_scheme.kind == PositionScheme::Kind::standard;
  }

  // Bounds, pairwise target-disjointness within each layer, mode
  // requirements. Throws std::invalid_argument.
  void validate(int64_t n_layers, int64_t seq_len, int64_t d_model) const;

  std::string to_json_string() const;
  static InterventionPlan from_json_string(const std::string& text);

  bool operator==(const InterventionPlan&) const = default;
};

// Initial-token scaling configuration: sigma thresholds dense-document
// detection, alpha_dense damps attention to the initial token for dense
// tokens, alpha_sparse boosts it for sparse tokens, and edits are restricted
// to [layer_begin, layer_end) (defaulting to the middle third).
struct CalibrationConfig {
  double sigma = 1.0;
  double top_p = 0.3;
  double alpha_dense = 0.5;
  double alpha_sparse = 2.0;
  std::optional<int64_t> layer_begin;
  std::optional<int64_t> layer_end;

  void validate() const;
  std::pair<int64_t, int64_t> layer_range(int64_t n_layers) const;

  bool operator==(const CalibrationConfig&) const = default;
};

std::pair<int64_t, int64_t> middle_third(int64_t n_layers);

struct SpanSpec {
  int64_t begin = 0;  // token range [begin, end)
  int64_t end = 0;
  double factor = 1.0;
};

// One edit per span, each scaling attention to key 0 for query rows inside
// the span. Overlapping spans are rejected.
InterventionPlan build_span_plan(std::span<const SpanSpec> spans, std::span<const int64_t> layers);

// Per-token edits on key 0: factor alpha_dense where the layer's partition
// marks the token dense, alpha_sparse where sparse, restricted to the
// config's layer range. Fills redistribute_keys with each layer's dense set.
InterventionPlan build_calibration_plan(const DenseSparsePartition& partition,
                                        const CalibrationConfig& cfg);

struct RowEdit {
  int64_t key = 0;
  double factor = 1.0;
};

// Applies multiplicative edits to one attention row, then the renorm mode:
// none leaves the (no longer normalized) row as is, renormalize divides by
// the new sum, redistribute spreads the removed mass uniformly over
// `redistribute_keys`.
std::vector<double> apply_edits(std::span<const double> row, std::span<const RowEdit> edits,
                                RenormMode mode, std::span<const int64_t> redistribute_keys = {});

// In-place variant used by forward hooks.
void apply_edits_inplace(std::span<double> row, std::span<const RowEdit> edits, RenormMode mode,
                         std::span<const int64_t> redistribute_keys);

// Effective relative distance under grouped/neighbor attention:
// d for d <= window, else window + (d - window) / group.
int64_t self_extend_distance(int64_t d, int64_t window, int64_t group);

// Returns a copy of `hidden` with the listed dimensions multiplied by
// factor; identity factors and empty dim sets are bit-preserving.
Tensor scale_positional_hidden(const Tensor& hidden, std::span<const int64_t> dims, double factor);

// Concatenates edits of two plans. Schemes/modes must agree unless one side
// is the default; target disjointness is revalidated on use.
InterventionPlan merge_plans(const InterventionPlan& a, const InterventionPlan& b);

// Plan compiled against a model and a maximum sequence length: per-layer,
// per-query edit lists plus ready-to-use forward hooks. The CompiledPlan
// must outlive the hooks it hands out.
class CompiledPlan {
 public:
  CompiledPlan(const InterventionPlan& plan, const ModelConfig& cfg, int64_t max_len,
               bool final_row_only = false);
  CompiledPlan(const CompiledPlan&) = delete;  // hooks capture `this`
  CompiledPlan& operator=(const CompiledPlan&) = delete;

  const ForwardHooks& hooks() const { return hooks_; }
  const PositionScheme& positions() const { return plan_.position_scheme; }
  const InterventionPlan& plan() const { return plan_; }

  ForwardOptions forward_options() const;

 private:
  InterventionPlan plan_;
  int64_t max_len_ = 0;
  bool final_row_only_ = false;
  // edits_[layer][query] -> row edits; empty rows share no storage
  std::vector<std::vector<std::vector<RowEdit>>> edits_;
  std::vector<std::vector<int64_t>> redistribute_;  // [layer]
  ForwardHooks hooks_;
};

}  // namespace attnwave
