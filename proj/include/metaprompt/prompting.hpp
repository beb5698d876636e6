#pragma once

// Soft-prompt parameterization and the downstream learners: prompt tuning of
// the embeddings against a frozen model, and the full fine-tuning baseline.
// Downstream optimization is plain constant-rate SGD; validation uses the
// task metric, and the returned parameters are the snapshot with the best
// validation score (earliest step on ties).

#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "metaprompt/backbone.hpp"
#include "metaprompt/rng.hpp"
#include "metaprompt/scoring.hpp"
#include "metaprompt/taskgen.hpp"

namespace metaprompt {

enum class PromptOrigin { kVocabInit, kMetaLearned, kLoaded };

inline const char* origin_name(PromptOrigin o) {
  switch (o) {
    case PromptOrigin::kVocabInit: return "vocab_init";
    case PromptOrigin::kMetaLearned: return "meta_learned";
    case PromptOrigin::kLoaded: return "loaded";
  }
  return "?";
}

inline PromptOrigin origin_from_name(const std::string& s) {
  if (s == "vocab_init") return PromptOrigin::kVocabInit;
  if (s == "meta_learned") return PromptOrigin::kMetaLearned;
  if (s == "loaded") return PromptOrigin::kLoaded;
  throw ParseError("unknown prompt origin: " + s);
}

struct PromptEmbeddings {
  int prompt_len = 100;  // default matches the standard prompt-tuning setup
  int dim = 0;
  std::vector<double> matrix;  // prompt_len x dim
  PromptOrigin origin = PromptOrigin::kVocabInit;

  void validate() const {
    if (prompt_len < 1) throw std::invalid_argument("prompt_len must be >= 1");
    if (static_cast<std::int64_t>(matrix.size()) !=
        static_cast<std::int64_t>(prompt_len) * dim) {
      throw std::invalid_argument("prompt matrix size mismatch");
    }
    check_finite(matrix, "prompt embeddings");
  }

  Tensor tensor() const { return Tensor::constant({prompt_len, dim}, matrix); }
};

struct PTConfig {
  double learning_rate = 0.3;
  int batch_size = 8;
  int total_steps = 3000;
  int eval_interval = 50;
  std::vector<double> lr_search_grid = {0.5, 0.4, 0.3, 0.2};

  void validate() const {
    if (learning_rate < 0.0) throw std::invalid_argument("negative learning rate");
    if (batch_size < 1 || total_steps < 0 || eval_interval < 1) {
      throw std::invalid_argument("PTConfig fields must be positive");
    }
    if (eval_interval > std::max(total_steps, 1)) {
      throw std::invalid_argument("eval_interval must not exceed total_steps");
    }
  }

  static PTConfig fine_tune_defaults() {
    PTConfig cfg;
    cfg.learning_rate = 3e-4;
    cfg.lr_search_grid = {5e-4, 3e-4, 2e-4, 1e-4};
    return cfg;
  }
};

struct TuneTrace {
  struct Point {
    int step = 0;
    double train_loss = 0.0;
    double val_score = 0.0;
    int snapshot = 0;
  };
  std::vector<Point> points;
  int best_step = 0;
};

// Best validation score, ties resolved toward the earliest step. Pure
// function of the trace so selection can be re-run on a stored trace.
inline int select_best_point(const std::vector<TuneTrace::Point>& points) {
  if (points.empty()) throw std::invalid_argument("empty tune trace");
  std::size_t best = 0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    if (points[i].val_score > points[best].val_score) best = i;
  }
  return static_cast<int>(best);
}

// Rows sampled uniformly without replacement from an embedding matrix.
inline std::vector<double> sample_embedding_rows(const Tensor& embeddings,
                                                 int count, std::uint64_t seed) {
  if (count > embeddings.rows()) {
    throw std::invalid_argument("cannot sample " + std::to_string(count) +
                                " rows from " + std::to_string(embeddings.rows()));
  }
  Rng rng(seed);
  std::vector<int> rows = rng.sample_indices(embeddings.rows(), count);
  const int d = embeddings.cols();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(count) * d);
  for (int r : rows) {
    const double* src = embeddings.values().data() + static_cast<std::size_t>(r) * d;
    out.insert(out.end(), src, src + d);
  }
  return out;
}

inline PromptEmbeddings init_prompt_from_vocab(const FrozenBackbone& model,
                                               int prompt_len, std::uint64_t seed) {
  if (prompt_len > model.config.vocab_size) {
    throw std::invalid_argument("prompt_len exceeds vocabulary size");
  }
  PromptEmbeddings p;
  p.prompt_len = prompt_len;
  p.dim = model.config.dim;
  p.matrix = sample_embedding_rows(model.token_embeddings, prompt_len, seed);
  p.origin = PromptOrigin::kVocabInit;
  p.validate();
  return p;
}

namespace detail_tuning {

inline TokenBatch batch_from(const Vocab& vocab, const std::vector<Example>& pool,
                             const std::vector<int>& idx) {
  std::vector<std::pair<std::string, std::string>> pairs;
  pairs.reserve(idx.size());
  for (int i : idx) {
    pairs.emplace_back(pool[static_cast<std::size_t>(i)].input,
                       pool[static_cast<std::size_t>(i)].output);
  }
  return make_token_batch(vocab, pairs);
}

inline TokenBatch full_batch(const Vocab& vocab, const std::vector<Example>& pool) {
  std::vector<int> idx(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) idx[i] = static_cast<int>(i);
  return batch_from(vocab, pool, idx);
}

}  // namespace detail_tuning

// Tunes only the prompt rows; the model parameters are read-only throughout.
// Evaluates on the validation split every eval_interval steps (and at step 0)
// and returns the snapshot with the best validation score.
inline std::pair<PromptEmbeddings, TuneTrace> prompt_tune(
    const FrozenBackbone& model, const PromptEmbeddings& init,
    const TaskSplits& splits, const PTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  init.validate();
  if (init.dim != model.config.dim) {
    throw std::invalid_argument("prompt width does not match model dim");
  }
  if (splits.train.empty() || splits.val.empty()) {
    throw std::invalid_argument("prompt_tune: empty train or val split");
  }

  const Metric metric = metric_for(splits.family);
  const TokenBatch train_probe = detail_tuning::full_batch(model.vocab, splits.train);
  Rng rng(seed);

  std::vector<double> phi = init.matrix;
  const Shape phi_shape{init.prompt_len, init.dim};
  std::vector<std::vector<double>> snapshots;
  TuneTrace trace;

  auto evaluate = [&](int step) {
    Tensor p = Tensor::constant(phi_shape, phi);
    TuneTrace::Point pt;
    pt.step = step;
    pt.train_loss = nll_loss_value(model, &p, train_probe);
    pt.val_score = score_examples(model, &p, splits.val, metric);
    pt.snapshot = static_cast<int>(snapshots.size());
    snapshots.push_back(phi);
    trace.points.push_back(pt);
  };

  evaluate(0);
  const int batch = std::min(cfg.batch_size, static_cast<int>(splits.train.size()));
  for (int step = 1; step <= cfg.total_steps; ++step) {
    const std::vector<int> idx =
        rng.sample_indices(static_cast<int>(splits.train.size()), batch);
    TokenBatch tb = detail_tuning::batch_from(model.vocab, splits.train, idx);

    Tape tape;
    BoundBackbone bb = bind_backbone(tape, model, false);
    Tensor p = tape.leaf(Tensor::constant(phi_shape, phi), true);
    try {
      Tensor loss = nll_loss_graph(bb, &p, tb);
      const Tensor grad = tape.grad(loss, {p}, false)[0];
      const std::vector<double>& g = grad.values();
      for (std::size_t i = 0; i < phi.size(); ++i) {
        phi[i] -= cfg.learning_rate * g[i];
      }
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(std::string(e.what()) + " (prompt tuning step " +
                           std::to_string(step) + ")");
    }
    if (step % cfg.eval_interval == 0) evaluate(step);
  }

  const int best = select_best_point(trace.points);
  trace.best_step = trace.points[static_cast<std::size_t>(best)].step;
  PromptEmbeddings out = init;
  out.matrix = snapshots[static_cast<std::size_t>(
      trace.points[static_cast<std::size_t>(best)].snapshot)];
  return {std::move(out), std::move(trace)};
}

inline std::vector<Tensor*> parameter_slots(FrozenBackbone& model) {
  std::vector<Tensor*> out{&model.token_embeddings, &model.positions};
  for (BackboneLayer& l : model.layers) {
    out.push_back(&l.wq);
    out.push_back(&l.wk);
    out.push_back(&l.wv);
    out.push_back(&l.wo);
    out.push_back(&l.w1);
    out.push_back(&l.w2);
  }
  out.push_back(&model.head);
  return out;
}

// Full-model baseline: tunes a deep working copy of every parameter with no
// prompt. The passed-in model is untouched.
inline std::pair<FrozenBackbone, TuneTrace> fine_tune(const FrozenBackbone& model,
                                                      const TaskSplits& splits,
                                                      const PTConfig& cfg,
                                                      std::uint64_t seed) {
  cfg.validate();
  if (splits.train.empty() || splits.val.empty()) {
    throw std::invalid_argument("fine_tune: empty train or val split");
  }

  const Metric metric = metric_for(splits.family);
  const TokenBatch train_probe = detail_tuning::full_batch(model.vocab, splits.train);
  Rng rng(seed);

  FrozenBackbone work = model;  // payloads shared; updates swap them out
  std::vector<FrozenBackbone> snapshots;
  TuneTrace trace;

  auto evaluate = [&](int step) {
    TuneTrace::Point pt;
    pt.step = step;
    pt.train_loss = nll_loss_value(work, nullptr, train_probe);
    pt.val_score = score_examples(work, nullptr, splits.val, metric);
    pt.snapshot = static_cast<int>(snapshots.size());
    snapshots.push_back(work);
    trace.points.push_back(pt);
  };

  evaluate(0);
  const int batch = std::min(cfg.batch_size, static_cast<int>(splits.train.size()));
  for (int step = 1; step <= cfg.total_steps; ++step) {
    const std::vector<int> idx =
        rng.sample_indices(static_cast<int>(splits.train.size()), batch);
    TokenBatch tb = detail_tuning::batch_from(model.vocab, splits.train, idx);

    Tape tape;
    BoundBackbone bb = bind_backbone(tape, work, true);
    std::vector<Tensor> params = bb.parameters();
    try {
      Tensor loss = nll_loss_graph(bb, nullptr, tb);
      std::vector<Tensor> grads = tape.grad(loss, params, false);
      std::vector<Tensor*> slots = parameter_slots(work);
      for (std::size_t i = 0; i < slots.size(); ++i) {
        std::vector<double> next = slots[i]->values();
        const std::vector<double>& g = grads[i].values();
        for (std::size_t k = 0; k < next.size(); ++k) {
          next[k] -= cfg.learning_rate * g[k];
        }
        *slots[i] = Tensor::constant(slots[i]->shape(), std::move(next));
      }
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(std::string(e.what()) + " (fine-tuning step " +
                           std::to_string(step) + ")");
    }
    if (step % cfg.eval_interval == 0) evaluate(step);
  }

  const int best = select_best_point(trace.points);
  trace.best_step = trace.points[static_cast<std::size_t>(best)].step;
  FrozenBackbone out = snapshots[static_cast<std::size_t>(
      trace.points[static_cast<std::size_t>(best)].snapshot)];
  return {std::move(out), std::move(trace)};
}

// ---- prompt persistence ----------------------------------------------------

inline nlohmann::json prompt_to_json(const PromptEmbeddings& p) {
  return nlohmann::json{{"schema", "metaprompt/prompt/v1"},
                        {"prompt_len", p.prompt_len},
                        {"dim", p.dim},
                        {"origin", origin_name(p.origin)},
                        {"matrix", p.matrix}};
}

inline PromptEmbeddings prompt_from_json(const nlohmann::json& j) {
  PromptEmbeddings p;
  p.prompt_len = j.at("prompt_len").get<int>();
  p.dim = j.at("dim").get<int>();
  p.origin = origin_from_name(j.at("origin").get<std::string>());
  p.matrix = j.at("matrix").get<std::vector<double>>();
  p.validate();
  return p;
}

inline void save_prompt(const PromptEmbeddings& p, const std::filesystem::path& path) {
  write_file_atomic(path, prompt_to_json(p).dump());
}

inline PromptEmbeddings load_prompt(const std::filesystem::path& path) {
  return prompt_from_json(nlohmann::json::parse(read_file(path)));
}

}  // namespace metaprompt
