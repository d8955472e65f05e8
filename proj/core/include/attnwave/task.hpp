#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "attnwave/intervention.hpp"
#include "attnwave/model.hpp"
#include "attnwave/wave.hpp"

namespace attnwave {

// Reserved token ids for the synthetic integer vocabulary.
namespace tok {
constexpr int32_t bos = 0;         // initial token / start symbol
constexpr int32_t sep = 1;
constexpr int32_t query_mark = 2;
constexpr int32_t ins_begin = 3;   // fixed instruction prefix [3, 7)
constexpr int32_t ins_len = 4;
constexpr int32_t content_begin = 7;
}  // namespace tok

struct TaskInstance {
  std::vector<int32_t> tokens;  // prompt only
  SegmentMap segmap;
  int64_t gold_segment = 0;
  std::vector<int32_t> answer;
  uint64_t seed = 0;
};

struct KvTaskSpec {
  int64_t num_pairs = 10;
  int64_t key_len = 2;
  int64_t val_len = 2;
};

struct MdqaTaskSpec {
  int64_t num_docs = 10;
  int64_t doc_len = 12;
  int64_t marker_len = 2;
  int64_t answer_len = 2;
};

// Key-value retrieval: instruction prefix, num_pairs (key, value) documents
// of pairwise-distinct random strings, query repeating the gold key.
// Fully determined by (spec, gold_pos, seed, vocab_size).
TaskInstance gen_kv(const KvTaskSpec& spec, int64_t gold_pos, uint64_t seed, int64_t vocab_size);

// Multi-document QA: random distractor documents; the gold document embeds a
// (marker, answer) pair and the query repeats the marker. Marker token ids
// are excluded from every other draw, so the marker string occurs exactly
// twice in the prompt.
TaskInstance gen_mdqa(const MdqaTaskSpec& spec, int64_t gold_doc, uint64_t seed, int64_t vocab_size);

enum class TaskKind { kv, mdqa };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

// Seed-driven instance factory used by training and sweeps.
struct GeneratorSpec {
  TaskKind kind = TaskKind::kv;
  KvTaskSpec kv;
  MdqaTaskSpec mdqa;
  std::vector<int64_t> gold_positions;  // empty -> all positions
  int64_t vocab_size = 512;

  void validate() const;
  int64_t position_count() const;
  std::vector<int64_t> positions() const;  // resolved gold position list
  TaskInstance make_at(int64_t gold_pos, uint64_t seed) const;
  TaskInstance make_mixed(uint64_t seed) const;  // gold position drawn uniformly
};

// JSON-lines instance serialization (one instance per line).
std::string instance_to_json_line(const TaskInstance& inst);
TaskInstance instance_from_json_line(const std::string& line);
void write_instances_jsonl(const std::filesystem::path& path, std::span<const TaskInstance> set);
std::vector<TaskInstance> read_instances_jsonl(const std::filesystem::path& path);

struct EvalOptions {
  bool apply_during_decode = true;  // interventions at every decode step
  bool edit_final_row_only = false;
  int64_t jobs = 1;
};

struct EvalResult {
  std::vector<int64_t> positions;  // sorted gold positions present
  std::vector<int64_t> total;      // per position
  std::vector<int64_t> correct;    // per position
  int64_t skipped = 0;             // over-length instances excluded

  double accuracy_at(size_t idx) const;
  double overall() const;  // count-weighted mean
  bool operator==(const EvalResult&) const = default;
};

std::string eval_csv(const EvalResult& result);

// Plan selection per instance: none, a fixed plan, or a calibration plan
// rebuilt per instance from an unintervened pass over the same prompt
// (optionally merged with a fixed part carrying position scheme edits).
class PlanSource {
 public:
  static PlanSource none();
  static PlanSource fixed(InterventionPlan plan);
  static PlanSource calibrated(CalibrationConfig cfg, InterventionPlan fixed_part = {});

  bool is_none() const { return kind_ == Kind::none; }
  InterventionPlan plan_for(const Model& model, const TaskInstance& inst) const;

 private:
  enum class Kind { none, fixed, calibrated };
  Kind kind_ = Kind::none;
  InterventionPlan fixed_;
  CalibrationConfig cfg_;
};

// Greedy decoding of |answer| tokens per instance, exact-match scoring,
// bucketed by gold position. Over-length instances are skipped with a
// warning on stderr; an empty instance list is an error. Plans rebuildable
// per instance; baseline and intervened runs over the same `instances`
// consume identical token sequences.
EvalResult evaluate(const Model& model, std::span<const TaskInstance> instances,
                    const PlanSource& plans, const EvalOptions& opts = {});

// Same scoring loop driven by an arbitrary next-token function (stub models
// in tests use this).
using NextTokenFn = std::function<int32_t(std::span<const int32_t>)>;
EvalResult evaluate_with(const NextTokenFn& next_token, std::span<const TaskInstance> instances,
                         int64_t max_seq);

}  // namespace attnwave
