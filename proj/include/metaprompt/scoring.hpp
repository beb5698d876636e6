#pragma once

// Task metrics and greedy-decode scoring. Every metric maps to [0,1] so
// relative gains are comparable across families: classification uses exact
// match accuracy, extraction uses token F1, transformation uses sequence
// exact match.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "metaprompt/backbone.hpp"
#include "metaprompt/taskgen.hpp"

namespace metaprompt {

enum class Metric { kAccuracy, kTokenF1, kSequenceExactMatch };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::kAccuracy: return "accuracy";
    case Metric::kTokenF1: return "token_f1";
    case Metric::kSequenceExactMatch: return "exact_match";
  }
  return "?";
}

inline Metric metric_for(Family f) {
  switch (f) {
    case Family::kClassification: return Metric::kAccuracy;
    case Family::kQaSpan: return Metric::kTokenF1;
    case Family::kTransformation: return Metric::kSequenceExactMatch;
  }
  return Metric::kAccuracy;
}

namespace detail_scoring {

inline std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline double token_f1(const std::string& prediction, const std::string& reference) {
  const auto p = split_tokens(prediction);
  const auto r = split_tokens(reference);
  if (p.empty() && r.empty()) return 1.0;
  if (p.empty() || r.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : r) ++counts[t];
  int overlap = 0;
  for (const auto& t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  return 2.0 * overlap / static_cast<double>(p.size() + r.size());
}

}  // namespace detail_scoring

inline double pair_score(Metric m, const std::string& prediction,
                         const std::string& reference) {
  switch (m) {
    case Metric::kAccuracy:
    case Metric::kSequenceExactMatch:
      return prediction == reference ? 1.0 : 0.0;
    case Metric::kTokenF1:
      return detail_scoring::token_f1(prediction, reference);
  }
  return 0.0;
}

// Greedy-decodes every example and averages the metric. `prompt` may be null
// (promptless model, used by the fine-tuning path).
inline double score_examples(const FrozenBackbone& model, const Tensor* prompt,
                             const std::vector<Example>& examples, Metric metric) {
  if (examples.empty()) {
    throw std::invalid_argument("score_examples: empty example set");
  }
  std::vector<std::vector<int>> inputs;
  int max_ref = 1;
  inputs.reserve(examples.size());
  for (const Example& e : examples) {
    inputs.push_back(model.vocab.encode(e.input));
    max_ref = std::max(max_ref,
                       static_cast<int>(detail_scoring::split_tokens(e.output).size()));
  }
  auto decoded = greedy_decode(model, prompt, inputs, max_ref + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    total += pair_score(metric, model.vocab.decode(decoded[i]), examples[i].output);
  }
  return total / static_cast<double>(examples.size());
}

}  // namespace metaprompt
