#pragma once

// Synthetic few-shot text-to-text task families over the closed vocabulary,
// plus the support/query and train/val/test sampling protocol and
// source/target partitioning.
//
// Tasks inside one family share generative structure (label lexicon, key/value
// lexicon, or substitution rule, all derived from family_seed); individual
// tasks see a seeded subset of that structure, controlled by `coverage`.

#include <algorithm>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "metaprompt/common.hpp"
#include "metaprompt/rng.hpp"
#include "metaprompt/vocab.hpp"

namespace metaprompt {

enum class Family { kClassification, kQaSpan, kTransformation };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::kClassification: return "classification";
    case Family::kQaSpan: return "qa_span";
    case Family::kTransformation: return "transformation";
  }
  return "?";
}

inline Family family_from_name(const std::string& s) {
  if (s == "classification") return Family::kClassification;
  if (s == "qa_span") return Family::kQaSpan;
  if (s == "transformation") return Family::kTransformation;
  throw ParseError("unknown task family: " + s);
}

struct Example {
  int id = 0;
  std::string input;
  std::string output;
};

struct Task {
  std::string id;
  Family family = Family::kClassification;
  std::uint64_t family_seed = 0;
  int num_classes = 0;                    // classification only
  std::vector<std::string> label_tokens;  // classification only
  std::vector<Example> pool;

  std::uint64_t pool_hash() const {
    std::uint64_t h = fnv1a64(std::string(family_name(family)));
    for (const Example& e : pool) {
      h = fnv1a64(e.input, h);
      h = fnv1a64(e.output, h);
    }
    return h;
  }
};

struct TaskGenParams {
  Family family = Family::kClassification;
  int vocab_size = 64;
  std::uint64_t family_seed = 1;
  int num_classes = 3;
  int input_len = 8;
  int pool_size = 600;
  double coverage = 0.6;  // fraction of the family lexicon this task draws on
  int word_offset = 0;    // word range assigned to this family
  int word_count = -1;    // -1: everything from word_offset on
};

namespace detail_taskgen {

constexpr int kQaPairs = 3;

inline int subset_size(double coverage, int n, int at_least) {
  const int k = static_cast<int>(std::lround(coverage * n));
  return std::max(at_least, std::min(n, k));
}

template <typename T>
inline std::vector<T> pick(Rng& rng, const std::vector<T>& from, int k) {
  std::vector<int> idx = rng.sample_indices(static_cast<int>(from.size()), k);
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i : idx) out.push_back(from[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace detail_taskgen

// Families are built from whole word groups (see kWordGroupSize): a
// classification class is one group, its first member being the label token
// and the rest the concept words; qa_span keys and values and the
// transformation domain/codomain are groups as well. The family seed permutes
// which groups play which role inside the family's word range.
inline Task generate_task(const TaskGenParams& p, std::uint64_t seed) {
  using namespace detail_taskgen;
  const Vocab vocab = Vocab::make(p.vocab_size);
  const int total_words = vocab.word_count();
  const int range_begin = p.word_offset;
  const int range_count =
      p.word_count < 0 ? total_words - p.word_offset : p.word_count;
  if (range_begin < 0 || range_count < 0 || range_begin + range_count > total_words) {
    throw std::invalid_argument("generate_task: word range exceeds vocabulary");
  }

  // Whole groups contained in the family's word range, in seeded order.
  std::vector<int> groups;
  {
    const int g_first = (range_begin + kWordGroupSize - 1) / kWordGroupSize;
    const int g_end = (range_begin + range_count) / kWordGroupSize;
    for (int g = g_first; g < g_end; ++g) groups.push_back(g);
    Rng family_rng(p.family_seed);
    family_rng.shuffle(groups);
  }
  auto require_groups = [&](int needed) {
    if (static_cast<int>(groups.size()) < needed) {
      throw std::invalid_argument(
          "vocabulary overflow: family range holds " +
          std::to_string(groups.size()) + " word groups, needs " +
          std::to_string(needed));
    }
  };
  auto group_word = [&](int slot, int member) {
    return vocab.word(groups[static_cast<std::size_t>(slot)] * kWordGroupSize + member);
  };
  auto group_words = [&](std::initializer_list<int> slots, int from_member) {
    std::vector<std::string> out;
    for (int s : slots) {
      for (int m = from_member; m < kWordGroupSize; ++m) out.push_back(group_word(s, m));
    }
    return out;
  };

  Task task;
  task.family = p.family;
  task.family_seed = p.family_seed;
  task.id = std::string(family_name(p.family)) + "_" +
            hash_hex(fnv1a64(p.family_seed)).substr(0, 4) + "_" +
            std::to_string(seed);
  Rng rng(derive_seed(p.family_seed, "task", seed));

  switch (p.family) {
    case Family::kClassification: {
      const int c = p.num_classes;
      if (c < 2 || c > 5) {
        throw std::invalid_argument("classification needs 2..5 classes");
      }
      require_groups(c + 1);  // one group per class plus distractors
      task.num_classes = c;
      std::vector<std::vector<std::string>> concepts;
      for (int k = 0; k < c; ++k) {
        task.label_tokens.push_back(group_word(k, 0));
        std::vector<std::string> set;
        for (int m = 1; m < kWordGroupSize; ++m) set.push_back(group_word(k, m));
        concepts.push_back(std::move(set));
      }
      std::vector<std::string> distractors;
      for (int s = c; s < static_cast<int>(groups.size()); ++s) {
        for (int m = 0; m < kWordGroupSize; ++m) distractors.push_back(group_word(s, m));
      }

      // Task-level subsets of the family lexicon.
      std::vector<std::vector<std::string>> task_concepts;
      for (const auto& set : concepts) {
        task_concepts.push_back(
            pick(rng, set, subset_size(p.coverage, static_cast<int>(set.size()), 1)));
      }
      std::vector<std::string> task_distractors = pick(
          rng, distractors,
          subset_size(p.coverage, static_cast<int>(distractors.size()), 3));

      const int signal = p.input_len >= 5 ? 3 : std::max(1, p.input_len / 2);
      for (int i = 0; i < p.pool_size; ++i) {
        const int cls = i % c;
        std::vector<std::string> toks;
        const auto& cw = task_concepts[static_cast<std::size_t>(cls)];
        for (int s = 0; s < signal; ++s) {
          toks.push_back(cw[static_cast<std::size_t>(rng.next_int(static_cast<int>(cw.size())))]);
        }
        while (static_cast<int>(toks.size()) < p.input_len) {
          toks.push_back(task_distractors[static_cast<std::size_t>(
              rng.next_int(static_cast<int>(task_distractors.size())))]);
        }
        std::vector<int> perm(toks.size());
        for (std::size_t k = 0; k < perm.size(); ++k) perm[k] = static_cast<int>(k);
        rng.shuffle(perm);
        std::string input;
        for (int k : perm) {
          if (!input.empty()) input += ' ';
          input += toks[static_cast<std::size_t>(k)];
        }
        task.pool.push_back(Example{i, input, task.label_tokens[static_cast<std::size_t>(cls)]});
      }
      break;
    }

    case Family::kQaSpan: {
      require_groups(4);
      std::vector<std::string> keys = group_words({0, 1}, 0);
      std::vector<std::string> values = group_words({2, 3}, 0);
      std::vector<std::string> task_keys = pick(
          rng, keys, subset_size(p.coverage, static_cast<int>(keys.size()), kQaPairs));
      std::vector<std::string> task_values = pick(
          rng, values, subset_size(p.coverage, static_cast<int>(values.size()), 2));

      for (int i = 0; i < p.pool_size; ++i) {
        std::vector<std::string> ks = pick(rng, task_keys, kQaPairs);
        std::string input;
        std::vector<std::string> vals(static_cast<std::size_t>(kQaPairs));
        for (int k = 0; k < kQaPairs; ++k) {
          vals[static_cast<std::size_t>(k)] = task_values[static_cast<std::size_t>(
              rng.next_int(static_cast<int>(task_values.size())))];
          if (!input.empty()) input += ' ';
          input += ks[static_cast<std::size_t>(k)] + ' ' + vals[static_cast<std::size_t>(k)];
        }
        const int q = rng.next_int(kQaPairs);
        input += ' ' + ks[static_cast<std::size_t>(q)];
        task.pool.push_back(Example{i, input, vals[static_cast<std::size_t>(q)]});
      }
      break;
    }

    case Family::kTransformation: {
      require_groups(4);
      std::vector<std::string> domain = group_words({0, 1}, 0);
      std::vector<std::string> codomain = group_words({2, 3}, 0);
      std::map<std::string, std::string> subst;
      for (std::size_t i = 0; i < domain.size(); ++i) subst[domain[i]] = codomain[i];
      std::vector<std::string> task_domain = pick(
          rng, domain, subset_size(p.coverage, static_cast<int>(domain.size()), 2));

      const int len = std::max(2, p.input_len);
      for (int i = 0; i < p.pool_size; ++i) {
        std::vector<std::string> toks;
        for (int k = 0; k < len; ++k) {
          toks.push_back(task_domain[static_cast<std::size_t>(
              rng.next_int(static_cast<int>(task_domain.size())))]);
        }
        std::string input;
        for (const auto& t : toks) {
          if (!input.empty()) input += ' ';
          input += t;
        }
        task.pool.push_back(Example{
            i, input, subst.at(toks.front()) + ' ' + subst.at(toks.back())});
      }
      break;
    }
  }
  return task;
}

// ---- few-shot sampling ----------------------------------------------------

struct TaskSplits {
  std::string task_id;
  Family family = Family::kClassification;
  int seed = 0;
  std::vector<Example> train;  // support when used upstream
  std::vector<Example> val;    // query when used upstream
  std::vector<Example> test;   // downstream only

  const std::vector<Example>& support() const { return train; }
  const std::vector<Example>& query() const { return val; }
};

enum class SplitRole { kUpstream, kDownstream };

constexpr int kTestSetSize = 200;
constexpr int kShotsPerClass = 16;    // classification train/support and val/query
constexpr int kShotsPerSet = 32;      // non-classification
constexpr int kShotsAll = -1;         // consume the whole remaining pool

namespace detail_taskgen {

inline std::vector<std::vector<int>> pool_by_class(const Task& task) {
  std::vector<std::vector<int>> groups(task.label_tokens.size());
  for (const Example& e : task.pool) {
    auto it = std::find(task.label_tokens.begin(), task.label_tokens.end(), e.output);
    if (it == task.label_tokens.end()) {
      throw std::invalid_argument("classification example with unknown label: " + e.output);
    }
    groups[static_cast<std::size_t>(it - task.label_tokens.begin())].push_back(e.id);
  }
  return groups;
}

}  // namespace detail_taskgen

// Samples disjoint splits. Downstream also carves a fixed test set that
// depends only on the task, so the 5 sampling seeds share it. `shots` of 0
// means the protocol default (16 per class / 32 per set); kShotsAll consumes
// the whole remaining pool, split evenly.
inline TaskSplits sample_fewshot(const Task& task, SplitRole role, int seed,
                                 int shots = 0) {
  TaskSplits splits;
  splits.task_id = task.id;
  splits.family = task.family;
  splits.seed = seed;

  const int n = static_cast<int>(task.pool.size());
  std::vector<bool> taken(static_cast<std::size_t>(n), false);

  if (role == SplitRole::kDownstream) {
    Rng test_rng(derive_seed(fnv1a64(task.id), "test-split"));
    if (n <= kTestSetSize) {
      throw std::invalid_argument("insufficient pool for test split: " + task.id);
    }
    for (int idx : test_rng.sample_indices(n, kTestSetSize)) {
      splits.test.push_back(task.pool[static_cast<std::size_t>(idx)]);
      taken[static_cast<std::size_t>(idx)] = true;
    }
  }

  Rng rng(derive_seed(fnv1a64(task.id), "fewshot",
                      static_cast<std::uint64_t>(seed)));
  std::vector<int> remaining;
  for (int i = 0; i < n; ++i) {
    if (!taken[static_cast<std::size_t>(i)]) remaining.push_back(i);
  }

  auto draw_from = [&](std::vector<int>& from, int k, std::vector<Example>& dst) {
    if (k > static_cast<int>(from.size())) {
      throw std::invalid_argument("insufficient pool for split: " + task.id);
    }
    std::vector<int> picked = detail_taskgen::pick(rng, from, k);
    std::set<int> gone(picked.begin(), picked.end());
    for (int idx : picked) dst.push_back(task.pool[static_cast<std::size_t>(idx)]);
    std::vector<int> rest;
    for (int idx : from) {
      if (!gone.count(idx)) rest.push_back(idx);
    }
    from = std::move(rest);
  };

  if (shots == kShotsAll) {
    rng.shuffle(remaining);
    const int half = static_cast<int>(remaining.size()) / 2;
    for (int i = 0; i < half; ++i) {
      splits.train.push_back(task.pool[static_cast<std::size_t>(remaining[static_cast<std::size_t>(i)])]);
    }
    for (int i = half; i < static_cast<int>(remaining.size()); ++i) {
      splits.val.push_back(task.pool[static_cast<std::size_t>(remaining[static_cast<std::size_t>(i)])]);
    }
    return splits;
  }

  if (task.family == Family::kClassification && !task.label_tokens.empty()) {
    const int per_class = shots > 0 ? shots : kShotsPerClass;
    auto groups = detail_taskgen::pool_by_class(task);
    std::vector<std::vector<int>> open(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (int idx : groups[g]) {
        if (!taken[static_cast<std::size_t>(idx)]) open[g].push_back(idx);
      }
    }
    for (auto& g : open) draw_from(g, per_class, splits.train);
    for (auto& g : open) draw_from(g, per_class, splits.val);
  } else {
    const int per_set = shots > 0 ? shots : kShotsPerSet;
    draw_from(remaining, per_set, splits.train);
    draw_from(remaining, per_set, splits.val);
  }
  return splits;
}

// ---- partitions -----------------------------------------------------------

struct Partition {
  std::string name;
  std::vector<std::string> source;
  std::vector<std::string> target;
};

struct PartitionSpec {
  std::string name;
  std::string mode = "matched";  // matched | mismatched | both | explicit
  Family source_family = Family::kClassification;
  Family target_family = Family::kClassification;
  int source_count = 8;
  int target_count = 3;
  std::uint64_t seed = 0;
  std::vector<std::string> source;  // explicit mode
  std::vector<std::string> target;
};

inline Partition make_partition(const PartitionSpec& spec,
                                const std::vector<Task>& registry) {
  Partition out;
  out.name = spec.name;

  auto ids_of = [&](Family f, const std::set<std::string>& excluded) {
    std::vector<std::string> ids;
    for (const Task& t : registry) {
      if (t.family == f && !excluded.count(t.id)) ids.push_back(t.id);
    }
    return ids;
  };
  auto exists = [&](const std::string& id) {
    return std::any_of(registry.begin(), registry.end(),
                       [&](const Task& t) { return t.id == id; });
  };

  if (spec.mode == "explicit") {
    for (const auto& id : spec.source) {
      if (!exists(id)) throw std::invalid_argument("unknown source task: " + id);
    }
    for (const auto& id : spec.target) {
      if (!exists(id)) throw std::invalid_argument("unknown target task: " + id);
    }
    out.source = spec.source;
    out.target = spec.target;
  } else {
    Rng rng(spec.seed);
    std::vector<std::string> target_pool = ids_of(spec.target_family, {});
    if (static_cast<int>(target_pool.size()) < spec.target_count) {
      throw std::invalid_argument("partition unsatisfiable: not enough " +
                                  std::string(family_name(spec.target_family)) +
                                  " tasks for targets");
    }
    out.target = detail_taskgen::pick(rng, target_pool, spec.target_count);
    std::set<std::string> used(out.target.begin(), out.target.end());

    std::vector<std::string> source_pool;
    if (spec.mode == "matched") {
      source_pool = ids_of(spec.target_family, used);
    } else if (spec.mode == "mismatched") {
      if (spec.source_family == spec.target_family) {
        throw std::invalid_argument("mismatched partition needs distinct families");
      }
      source_pool = ids_of(spec.source_family, used);
    } else if (spec.mode == "both") {
      source_pool = ids_of(spec.target_family, used);
      for (const auto& id : ids_of(spec.source_family, used)) source_pool.push_back(id);
      std::sort(source_pool.begin(), source_pool.end());
      source_pool.erase(std::unique(source_pool.begin(), source_pool.end()),
                        source_pool.end());
    } else {
      throw std::invalid_argument("unknown partition mode: " + spec.mode);
    }
    if (static_cast<int>(source_pool.size()) < spec.source_count) {
      throw std::invalid_argument("partition unsatisfiable: not enough source tasks");
    }
    out.source = detail_taskgen::pick(rng, source_pool, spec.source_count);
  }

  std::set<std::string> s(out.source.begin(), out.source.end());
  for (const auto& id : out.target) {
    if (s.count(id)) {
      throw std::invalid_argument("source/target overlap on task: " + id);
    }
  }
  return out;
}

// ---- JSONL persistence ------------------------------------------------------

inline void save_tasks(const std::vector<Task>& tasks,
                       const std::filesystem::path& path) {
  std::string out;
  for (const Task& t : tasks) {
    for (const Example& e : t.pool) {
      nlohmann::json j{{"task_id", t.id},
                       {"family", family_name(t.family)},
                       {"input", e.input},
                       {"output", e.output}};
      out += j.dump();
      out += '\n';
    }
  }
  write_file_atomic(path, out);
}

inline std::vector<Task> load_tasks(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  std::vector<Task> tasks;
  std::map<std::string, std::size_t> index;

  std::size_t line_no = 0, pos = 0;
  while (pos < content.size()) {
    std::size_t end = content.find('\n', pos);
    if (end == std::string::npos) end = content.size();
    const std::string line = content.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) +
                       ": " + e.what());
    }
    std::string id, fam, input, output;
    try {
      id = j.at("task_id").get<std::string>();
      fam = j.at("family").get<std::string>();
      input = j.at("input").get<std::string>();
      output = j.at("output").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) +
                       ": " + e.what());
    }

    auto it = index.find(id);
    if (it == index.end()) {
      Task t;
      t.id = id;
      t.family = family_from_name(fam);
      index.emplace(id, tasks.size());
      tasks.push_back(std::move(t));
      it = index.find(id);
    }
    Task& t = tasks[it->second];
    if (t.family != family_from_name(fam)) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) +
                       ": family differs from earlier lines of task " + id);
    }
    t.pool.push_back(Example{static_cast<int>(t.pool.size()), input, output});
  }

  // Recover the label set for loaded classification tasks.
  for (Task& t : tasks) {
    if (t.family != Family::kClassification) continue;
    std::set<std::string> labels;
    for (const Example& e : t.pool) labels.insert(e.output);
    t.label_tokens.assign(labels.begin(), labels.end());
    t.num_classes = static_cast<int>(labels.size());
  }
  return tasks;
}

}  // namespace metaprompt
