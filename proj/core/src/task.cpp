#include "attnwave/task.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>
#include <thread>

#include "attnwave/forward.hpp"
#include "attnwave/format.hpp"
#include "json.hpp"

namespace attnwave {

using nlohmann::json;

namespace {

void check_vocab(int64_t vocab_size, int64_t needed_strings, int64_t string_len,
                 const char* what) {
  const int64_t content = vocab_size - tok::content_begin;
  if (content < 2) throw std::invalid_argument(std::string(what) + ": vocabulary too small");
  // conservative headroom so distinct-string rejection sampling terminates fast
  double space = 1.0;
  for (int64_t i = 0; i < string_len && space < 1e12; ++i) space *= static_cast<double>(content);
  if (space < 4.0 * static_cast<double>(needed_strings))
    throw std::invalid_argument(std::string(what) +
                                ": vocabulary too small for distinct strings");
}

std::vector<int32_t> draw_string(Rng& rng, std::span<const int32_t> pool, int64_t len) {
  std::vector<int32_t> s(static_cast<size_t>(len));
  for (auto& t : s) t = pool[static_cast<size_t>(rng.below(pool.size()))];
  return s;
}

std::vector<int32_t> content_pool(int64_t vocab_size) {
  std::vector<int32_t> pool;
  pool.reserve(static_cast<size_t>(vocab_size - tok::content_begin));
  for (int32_t t = tok::content_begin; t < vocab_size; ++t) pool.push_back(t);
  return pool;
}

void append(std::vector<int32_t>& tokens, std::span<const int32_t> tail) {
  tokens.insert(tokens.end(), tail.begin(), tail.end());
}

}  // namespace

TaskInstance gen_kv(const KvTaskSpec& spec, int64_t gold_pos, uint64_t seed, int64_t vocab_size) {
  if (spec.num_pairs < 1 || spec.key_len < 1 || spec.val_len < 1)
    throw std::invalid_argument("gen_kv: pair count and lengths must be >= 1");
  if (gold_pos < 0 || gold_pos >= spec.num_pairs)
    throw std::invalid_argument("gen_kv: gold_pos out of range");
  check_vocab(vocab_size, spec.num_pairs, spec.key_len, "gen_kv");
  check_vocab(vocab_size, spec.num_pairs, spec.val_len, "gen_kv");

  Rng rng(seed);
  const std::vector<int32_t> pool = content_pool(vocab_size);
  std::set<std::vector<int32_t>> seen;
  std::vector<std::vector<int32_t>> keys, vals;
  while (static_cast<int64_t>(keys.size()) < spec.num_pairs) {
    auto k = draw_string(rng, pool, spec.key_len);
    if (seen.insert(k).second) keys.push_back(std::move(k));
  }
  seen.clear();
  while (static_cast<int64_t>(vals.size()) < spec.num_pairs) {
    auto v = draw_string(rng, pool, spec.val_len);
    if (seen.insert(v).second) vals.push_back(std::move(v));
  }

  std::vector<int32_t> tokens{tok::bos};
  for (int32_t i = 0; i < tok::ins_len; ++i) tokens.push_back(tok::ins_begin + i);
  std::vector<Segment> segments;
  segments.push_back({SegmentKind::instruction, -1, 0, static_cast<int64_t>(tokens.size())});
  for (int64_t m = 0; m < spec.num_pairs; ++m) {
    const int64_t begin = static_cast<int64_t>(tokens.size());
    append(tokens, keys[static_cast<size_t>(m)]);
    append(tokens, vals[static_cast<size_t>(m)]);
    segments.push_back({SegmentKind::document, m, begin, static_cast<int64_t>(tokens.size())});
  }
  const int64_t qbegin = static_cast<int64_t>(tokens.size());
  tokens.push_back(tok::sep);
  tokens.push_back(tok::query_mark);
  append(tokens, keys[static_cast<size_t>(gold_pos)]);
  segments.push_back({SegmentKind::query, -1, qbegin, static_cast<int64_t>(tokens.size())});

  TaskInstance inst;
  inst.tokens = std::move(tokens);
  inst.segmap = SegmentMap::from_segments(std::move(segments));
  inst.gold_segment = gold_pos;
  inst.answer = vals[static_cast<size_t>(gold_pos)];
  inst.seed = seed;
  return inst;
}

TaskInstance gen_mdqa(const MdqaTaskSpec& spec, int64_t gold_doc, uint64_t seed,
                      int64_t vocab_size) {
  if (spec.num_docs < 1 || spec.doc_len < 1 || spec.marker_len < 1 || spec.answer_len < 1)
    throw std::invalid_argument("gen_mdqa: counts and lengths must be >= 1");
  if (gold_doc < 0 || gold_doc >= spec.num_docs)
    throw std::invalid_argument("gen_mdqa: gold_doc out of range");
  if (spec.doc_len < spec.marker_len + spec.answer_len)
    throw std::invalid_argument("gen_mdqa: doc_len too small for marker + answer");
  check_vocab(vocab_size, spec.num_docs, 1, "gen_mdqa");

  Rng rng(seed);
  const std::vector<int32_t> all = content_pool(vocab_size);
  if (static_cast<int64_t>(all.size()) < spec.marker_len + 2)
    throw std::invalid_argument("gen_mdqa: vocabulary too small for a distinct marker");

  // distinct marker token ids, excluded from every other draw
  std::vector<int32_t> marker;
  std::set<int32_t> marker_set;
  while (static_cast<int64_t>(marker.size()) < spec.marker_len) {
    const int32_t t = all[static_cast<size_t>(rng.below(all.size()))];
    if (marker_set.insert(t).second) marker.push_back(t);
  }
  std::vector<int32_t> pool;
  for (int32_t t : all)
    if (!marker_set.count(t)) pool.push_back(t);

  const std::vector<int32_t> answer = draw_string(rng, pool, spec.answer_len);

  std::vector<int32_t> tokens{tok::bos};
  for (int32_t i = 0; i < tok::ins_len; ++i) tokens.push_back(tok::ins_begin + i);
  std::vector<Segment> segments;
  segments.push_back({SegmentKind::instruction, -1, 0, static_cast<int64_t>(tokens.size())});
  for (int64_t m = 0; m < spec.num_docs; ++m) {
    const int64_t begin = static_cast<int64_t>(tokens.size());
    if (m == gold_doc) {
      const int64_t filler_len = spec.doc_len - spec.marker_len - spec.answer_len;
      const int64_t offset = filler_len > 0 ? static_cast<int64_t>(rng.below(
                                                  static_cast<uint64_t>(filler_len + 1)))
                                            : 0;
      const std::vector<int32_t> filler = draw_string(rng, pool, filler_len);
      tokens.insert(tokens.end(), filler.begin(), filler.begin() + offset);
      append(tokens, marker);
      append(tokens, answer);
      tokens.insert(tokens.end(), filler.begin() + offset, filler.end());
    } else {
      append(tokens, draw_string(rng, pool, spec.doc_len));
    }
    segments.push_back({SegmentKind::document, m, begin, static_cast<int64_t>(tokens.size())});
  }
  const int64_t qbegin = static_cast<int64_t>(tokens.size());
  tokens.push_back(tok::sep);
  tokens.push_back(tok::query_mark);
  append(tokens, marker);
  segments.push_back({SegmentKind::query, -1, qbegin, static_cast<int64_t>(tokens.size())});

  TaskInstance inst;
  inst.tokens = std::move(tokens);
  inst.segmap = SegmentMap::from_segments(std::move(segments));
  inst.gold_segment = gold_doc;
  inst.answer = answer;
  inst.seed = seed;
  return inst;
}

std::string to_string(TaskKind kind) { return kind == TaskKind::kv ? "kv" : "mdqa"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "kv") return TaskKind::kv;
  if (s == "mdqa") return TaskKind::mdqa;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

void GeneratorSpec::validate() const {
  const int64_t count = kind == TaskKind::kv ? kv.num_pairs : mdqa.num_docs;
  for (int64_t p : gold_positions)
    if (p < 0 || p >= count)
      throw std::invalid_argument("task: gold position " + std::to_string(p) +
                                  " out of range [0, " + std::to_string(count) + ")");
}

int64_t GeneratorSpec::position_count() const {
  return kind == TaskKind::kv ? kv.num_pairs : mdqa.num_docs;
}

std::vector<int64_t> GeneratorSpec::positions() const {
  if (!gold_positions.empty()) return gold_positions;
  std::vector<int64_t> all(static_cast<size_t>(position_count()));
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int64_t>(i);
  return all;
}

TaskInstance GeneratorSpec::make_at(int64_t gold_pos, uint64_t seed) const {
  return kind == TaskKind::kv ? gen_kv(kv, gold_pos, seed, vocab_size)
                              : gen_mdqa(mdqa, gold_pos, seed, vocab_size);
}

TaskInstance GeneratorSpec::make_mixed(uint64_t seed) const {
  const std::vector<int64_t> pos = positions();
  Rng rng(seed);
  const int64_t gold = pos[static_cast<size_t>(rng.below(pos.size()))];
  return make_at(gold, mix_seed(seed, 1));
}

std::string instance_to_json_line(const TaskInstance& inst) {
  json j;
  j["tokens"] = inst.tokens;
  j["segments"] = json::parse(inst.segmap.to_json_string());
  j["gold_segment"] = inst.gold_segment;
  j["answer"] = inst.answer;
  j["seed"] = inst.seed;
  return j.dump();
}

TaskInstance instance_from_json_line(const std::string& line) {
  const json j = json::parse(line);
  TaskInstance inst;
  inst.tokens = j.at("tokens").get<std::vector<int32_t>>();
  inst.segmap = SegmentMap::from_json_string(j.at("segments").dump());
  inst.gold_segment = j.at("gold_segment").get<int64_t>();
  inst.answer = j.at("answer").get<std::vector<int32_t>>();
  inst.seed = j.at("seed").get<uint64_t>();
  if (inst.segmap.size() != static_cast<int64_t>(inst.tokens.size()))
    throw std::invalid_argument("instance: segment map does not cover the tokens");
  if (inst.gold_segment < 0 || inst.gold_segment >= inst.segmap.document_count())
    throw std::invalid_argument("instance: gold segment out of range");
  return inst;
}

void write_instances_jsonl(const std::filesystem::path& path, std::span<const TaskInstance> set) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const TaskInstance& inst : set) os << instance_to_json_line(inst) << "\n";
}

std::vector<TaskInstance> read_instances_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<TaskInstance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    out.push_back(instance_from_json_line(line));
  }
  return out;
}

double EvalResult::accuracy_at(size_t idx) const {
  return total[idx] > 0 ? static_cast<double>(correct[idx]) / static_cast<double>(total[idx]) : 0.0;
}

double EvalResult::overall() const {
  int64_t t = 0, c = 0;
  for (size_t i = 0; i < total.size(); ++i) {
    t += total[i];
    c += correct[i];
  }
  return t > 0 ? static_cast<double>(c) / static_cast<double>(t) : 0.0;
}

std::string eval_csv(const EvalResult& result) {
  std::string out = "position,n,accuracy\n";
  for (size_t i = 0; i < result.positions.size(); ++i)
    out += std::to_string(result.positions[i]) + "," + std::to_string(result.total[i]) + "," +
           fmt_g9(result.accuracy_at(i)) + "\n";
  int64_t t = 0;
  for (int64_t n : result.total) t += n;
  out += "avg," + std::to_string(t) + "," + fmt_g9(result.overall()) + "\n";
  return out;
}

PlanSource PlanSource::none() { return PlanSource(); }

PlanSource PlanSource::fixed(InterventionPlan plan) {
  PlanSource s;
  s.kind_ = Kind::fixed;
  s.fixed_ = std::move(plan);
  return s;
}

PlanSource PlanSource::calibrated(CalibrationConfig cfg, InterventionPlan fixed_part) {
  cfg.validate();
  PlanSource s;
  s.kind_ = Kind::calibrated;
  s.cfg_ = cfg;
  s.fixed_ = std::move(fixed_part);
  return s;
}

InterventionPlan PlanSource::plan_for(const Model& model, const TaskInstance& inst) const {
  switch (kind_) {
    case Kind::none: return InterventionPlan{};
    case Kind::fixed: return fixed_;
    case Kind::calibrated: break;
  }
  // detection runs on an unintervened pass over the same prompt
  ForwardOptions opts;
  opts.capture_attention = true;
  const ForwardTrace trace = forward(model, inst.tokens, opts);
  const DenseSparsePartition partition =
      build_partition(trace.attention, inst.segmap, cfg_.top_p, cfg_.sigma);
  return merge_plans(build_calibration_plan(partition, cfg_), fixed_);
}

namespace {

struct InstanceOutcome {
  bool skipped = false;
  bool correct = false;
};

EvalResult bucket_outcomes(std::span<const TaskInstance> instances,
                           std::span<const InstanceOutcome> outcomes) {
  std::vector<int64_t> positions;
  for (const TaskInstance& inst : instances) positions.push_back(inst.gold_segment);
  std::sort(positions.begin(), positions.end());
  positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
  EvalResult result;
  result.positions = positions;
  result.total.assign(positions.size(), 0);
  result.correct.assign(positions.size(), 0);
  for (size_t i = 0; i < instances.size(); ++i) {
    if (outcomes[i].skipped) {
      ++result.skipped;
      continue;
    }
    const size_t idx = static_cast<size_t>(
        std::lower_bound(positions.begin(), positions.end(), instances[i].gold_segment) -
        positions.begin());
    ++result.total[idx];
    if (outcomes[i].correct) ++result.correct[idx];
  }
  return result;
}

void parallel_for(int64_t n, int64_t jobs, const std::function<void(int64_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  const int64_t workers = std::min<int64_t>(jobs, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int64_t w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      for (int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace

EvalResult evaluate(const Model& model, std::span<const TaskInstance> instances,
                    const PlanSource& plans, const EvalOptions& opts) {
  if (instances.empty()) throw std::invalid_argument("evaluate: empty instance list");
  const int64_t max_seq = model.config.max_seq;
  std::vector<InstanceOutcome> outcomes(instances.size());
  parallel_for(static_cast<int64_t>(instances.size()), opts.jobs, [&](int64_t i) {
    const TaskInstance& inst = instances[static_cast<size_t>(i)];
    const int64_t full_len =
        static_cast<int64_t>(inst.tokens.size() + inst.answer.size());
    if (full_len > max_seq) {
      std::cerr << "evaluate: skipping over-length instance (seed " << inst.seed << ", "
                << full_len << " > " << max_seq << " tokens)\n";
      outcomes[static_cast<size_t>(i)].skipped = true;
      return;
    }
    const InterventionPlan plan = plans.plan_for(model, inst);
    std::vector<int32_t> decoded;
    if (plan.empty()) {
      decoded = greedy_decode(model, inst.tokens, static_cast<int64_t>(inst.answer.size()));
    } else {
      CompiledPlan compiled(plan, model.config, full_len, opts.edit_final_row_only);
      ForwardOptions fopts = compiled.forward_options();
      if (!opts.apply_during_decode) {
        // plan applies to the first (prompt-only) step; later steps run clean
        std::vector<int32_t> tokens = inst.tokens;
        ForwardTrace first = forward(model, tokens, fopts);
        tokens.push_back(argmax_last(first.logits));
        decoded = greedy_decode(model, std::move(tokens),
                                static_cast<int64_t>(inst.answer.size()) - 1);
      } else {
        decoded = greedy_decode(model, inst.tokens, static_cast<int64_t>(inst.answer.size()),
                                fopts);
      }
    }
    const std::span<const int32_t> tail(decoded.data() + inst.tokens.size(), inst.answer.size());
    outcomes[static_cast<size_t>(i)].correct =
        std::equal(tail.begin(), tail.end(), inst.answer.begin());
  });
  return bucket_outcomes(instances, outcomes);
}

EvalResult evaluate_with(const NextTokenFn& next_token, std::span<const TaskInstance> instances,
                         int64_t max_seq) {
  if (instances.empty()) throw std::invalid_argument("evaluate: empty instance list");
  std::vector<InstanceOutcome> outcomes(instances.size());
  for (size_t i = 0; i < instances.size(); ++i) {
    const TaskInstance& inst = instances[i];
    if (static_cast<int64_t>(inst.tokens.size() + inst.answer.size()) > max_seq) {
      std::cerr << "evaluate: skipping over-length instance (seed " << inst.seed << ")\n";
      outcomes[i].skipped = true;
      continue;
    }
    std::vector<int32_t> tokens = inst.tokens;
    bool ok = true;
    for (int32_t want : inst.answer) {
      const int32_t got = next_token(tokens);
      tokens.push_back(got);
      if (got != want) ok = false;
    }
    outcomes[i].correct = ok;
  }
  return bucket_outcomes(instances, outcomes);
}

}  // namespace attnwave
