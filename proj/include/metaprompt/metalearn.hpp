#pragma once

// Upstream learners that produce the meta-learned prompt initialization:
//
//   maml     one inner SGD step on a support batch, then an outer step whose
//            gradient flows through the inner update (exact second order);
//   fomaml   same, but the inner update is treated as a constant;
//   reptile  k inner SGD steps on pooled task data, then interpolation
//            toward the adapted parameters;
//   mtl      plain SGD over the union of all source data.
//
// The step rules are written against generic loss builders so they can be
// exercised on closed-form objectives as well as the model loss.

#include <chrono>
#include <functional>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "metaprompt/backbone.hpp"
#include "metaprompt/prompting.hpp"
#include "metaprompt/rng.hpp"
#include "metaprompt/taskgen.hpp"

namespace metaprompt {

enum class MetaMethod { kMaml, kFomaml, kReptile, kMtl };

inline const char* meta_method_name(MetaMethod m) {
  switch (m) {
    case MetaMethod::kMaml: return "maml";
    case MetaMethod::kFomaml: return "fomaml";
    case MetaMethod::kReptile: return "reptile";
    case MetaMethod::kMtl: return "mtl";
  }
  return "?";
}

inline MetaMethod meta_method_from_name(const std::string& s) {
  if (s == "maml") return MetaMethod::kMaml;
  if (s == "fomaml") return MetaMethod::kFomaml;
  if (s == "reptile") return MetaMethod::kReptile;
  if (s == "mtl") return MetaMethod::kMtl;
  throw ParseError("unknown meta method: " + s);
}

struct MetaConfig {
  MetaMethod method = MetaMethod::kMaml;
  double inner_lr = 3e-5;
  double outer_lr = 5e-1;   // doubles as the reptile interpolation weight
  int total_steps = 5000;
  int inner_batch_size = 2;  // 2 / 4 / 4 for maml / fomaml / reptile
  int inner_steps = 1;       // 1 / 1 / 10 for maml / fomaml / reptile
  int mtl_epochs = 20;
  int mtl_batch_size = 4;
  std::uint64_t seed = 0;

  static MetaConfig defaults_for(MetaMethod m) {
    MetaConfig cfg;
    cfg.method = m;
    switch (m) {
      case MetaMethod::kMaml:
        break;
      case MetaMethod::kFomaml:
        cfg.inner_batch_size = 4;
        break;
      case MetaMethod::kReptile:
        cfg.inner_batch_size = 4;
        cfg.inner_steps = 10;
        break;
      case MetaMethod::kMtl:
        cfg.inner_lr = 5e-1;
        break;
    }
    return cfg;
  }

  void validate() const {
    if (inner_lr < 0.0 || outer_lr <= 0.0) {
      throw std::invalid_argument("meta learning rates must be positive");
    }
    if (inner_steps < 1 || inner_batch_size < 1 || total_steps < 0 ||
        mtl_epochs < 1 || mtl_batch_size < 1) {
      throw std::invalid_argument("meta config counts must be positive");
    }
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"method", meta_method_name(method)},
                          {"inner_lr", inner_lr},
                          {"outer_lr", outer_lr},
                          {"total_steps", total_steps},
                          {"inner_batch_size", inner_batch_size},
                          {"inner_steps", inner_steps},
                          {"mtl_epochs", mtl_epochs},
                          {"mtl_batch_size", mtl_batch_size},
                          {"seed", seed}};
  }
};

struct MetaResult {
  PromptEmbeddings phi_star;
  std::vector<std::pair<int, double>> loss_curve;  // (step, outer loss)
  std::uint64_t config_hash = 0;
  double wall_time_seconds = 0.0;
};

// A differentiable objective in the prompt: given a tape and the prompt
// tensor on it, build and return the scalar loss.
using PromptLossFn = std::function<Tensor(Tape&, const Tensor&)>;

inline PromptLossFn make_nll_loss(const FrozenBackbone& model, TokenBatch batch) {
  return [&model, batch = std::move(batch)](Tape& tape, const Tensor& phi) {
    BoundBackbone bb = bind_backbone(tape, model, false);
    return nll_loss_graph(bb, &phi, batch);
  };
}

struct MetaStepStats {
  double inner_loss = 0.0;
  double outer_loss = 0.0;
};

// phi <- phi - beta * d/dphi [ support-adapted query loss ], with the inner
// adaptation phi' = phi - alpha * grad(support loss) recorded so the outer
// gradient carries the second-order term.
inline std::vector<double> maml_step_generic(const std::vector<double>& phi,
                                             const Shape& shape,
                                             const PromptLossFn& support_loss,
                                             const PromptLossFn& query_loss,
                                             double alpha, double beta,
                                             MetaStepStats* stats = nullptr) {
  Tape tape(true);
  Tensor p = tape.leaf(shape, phi, true);
  Tensor ls = support_loss(tape, p);
  Tensor gs = tape.grad(ls, {p}, true)[0];
  Tensor adapted = ops::add(p, ops::scale(gs, -alpha));
  Tensor lq = query_loss(tape, adapted);
  Tensor meta_grad = tape.grad(lq, {p}, false)[0];
  if (stats != nullptr) {
    stats->inner_loss = ls.scalar_value();
    stats->outer_loss = lq.scalar_value();
  }
  std::vector<double> out = phi;
  const std::vector<double>& g = meta_grad.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= beta * g[i];
  return out;
}

// First-order variant: the adapted prompt is re-seeded as a fresh leaf, so
// the outer gradient is taken at phi' and applied to phi.
inline std::vector<double> fomaml_step_generic(const std::vector<double>& phi,
                                               const Shape& shape,
                                               const PromptLossFn& support_loss,
                                               const PromptLossFn& query_loss,
                                               double alpha, double beta,
                                               MetaStepStats* stats = nullptr) {
  std::vector<double> adapted = phi;
  double inner_loss = 0.0;
  {
    Tape tape(false);
    Tensor p = tape.leaf(shape, phi, true);
    Tensor ls = support_loss(tape, p);
    inner_loss = ls.scalar_value();
    const Tensor gs = tape.grad(ls, {p}, false)[0];
    for (std::size_t i = 0; i < adapted.size(); ++i) {
      adapted[i] -= alpha * gs.values()[i];
    }
  }
  Tape tape(false);
  Tensor p_adapted = tape.leaf(shape, adapted, true);
  Tensor lq = query_loss(tape, p_adapted);
  const Tensor gq = tape.grad(lq, {p_adapted}, false)[0];
  if (stats != nullptr) {
    stats->inner_loss = inner_loss;
    stats->outer_loss = lq.scalar_value();
  }
  std::vector<double> out = phi;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= beta * gq.values()[i];
  return out;
}

// k plain SGD steps from phi, then phi <- phi + eps * (phi_k - phi).
inline std::vector<double> reptile_step_generic(
    const std::vector<double>& phi, const Shape& shape,
    const std::vector<PromptLossFn>& inner_losses, double alpha, double eps,
    MetaStepStats* stats = nullptr) {
  if (inner_losses.empty()) {
    throw std::invalid_argument("reptile step needs at least one inner batch");
  }
  std::vector<double> walk = phi;
  double loss_sum = 0.0;
  for (const PromptLossFn& loss_fn : inner_losses) {
    Tape tape(false);
    Tensor p = tape.leaf(shape, walk, true);
    Tensor loss = loss_fn(tape, p);
    loss_sum += loss.scalar_value();
    const Tensor g = tape.grad(loss, {p}, false)[0];
    for (std::size_t i = 0; i < walk.size(); ++i) {
      walk[i] -= alpha * g.values()[i];
    }
  }
  if (stats != nullptr) {
    stats->inner_loss = loss_sum / static_cast<double>(inner_losses.size());
    stats->outer_loss = stats->inner_loss;
  }
  std::vector<double> out = phi;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += eps * (walk[i] - out[i]);
  }
  return out;
}

// ---- model-bound step fronts -----------------------------------------------

struct Episode {
  TokenBatch support;
  TokenBatch query;
};

inline PromptEmbeddings maml_step(const PromptEmbeddings& phi,
                                  const FrozenBackbone& model,
                                  const Episode& episode, double alpha,
                                  double beta, MetaStepStats* stats = nullptr) {
  PromptEmbeddings out = phi;
  out.matrix = maml_step_generic(phi.matrix, {phi.prompt_len, phi.dim},
                                 make_nll_loss(model, episode.support),
                                 make_nll_loss(model, episode.query), alpha,
                                 beta, stats);
  return out;
}

inline PromptEmbeddings fomaml_step(const PromptEmbeddings& phi,
                                    const FrozenBackbone& model,
                                    const Episode& episode, double alpha,
                                    double beta, MetaStepStats* stats = nullptr) {
  PromptEmbeddings out = phi;
  out.matrix = fomaml_step_generic(phi.matrix, {phi.prompt_len, phi.dim},
                                   make_nll_loss(model, episode.support),
                                   make_nll_loss(model, episode.query), alpha,
                                   beta, stats);
  return out;
}

inline PromptEmbeddings reptile_step(const PromptEmbeddings& phi,
                                     const FrozenBackbone& model,
                                     const std::vector<TokenBatch>& inner_batches,
                                     double alpha, double eps,
                                     MetaStepStats* stats = nullptr) {
  std::vector<PromptLossFn> losses;
  losses.reserve(inner_batches.size());
  for (const TokenBatch& b : inner_batches) {
    losses.push_back(make_nll_loss(model, b));
  }
  PromptEmbeddings out = phi;
  out.matrix = reptile_step_generic(phi.matrix, {phi.prompt_len, phi.dim},
                                    losses, alpha, eps, stats);
  return out;
}

// ---- training drivers --------------------------------------------------------

// Upstream data: one sampled support/query split per source task.
struct SourceTask {
  std::string id;
  const Task* task = nullptr;
  TaskSplits splits;
};

inline std::vector<SourceTask> make_source_tasks(const std::vector<Task>& registry,
                                                 const std::vector<std::string>& ids,
                                                 std::uint64_t sampling_seed,
                                                 int shots = 0) {
  std::vector<SourceTask> out;
  for (const std::string& id : ids) {
    auto it = std::find_if(registry.begin(), registry.end(),
                           [&](const Task& t) { return t.id == id; });
    if (it == registry.end()) {
      throw std::invalid_argument("unknown source task: " + id);
    }
    SourceTask st;
    st.id = id;
    st.task = &*it;
    st.splits = sample_fewshot(
        *it, SplitRole::kUpstream,
        static_cast<int>(derive_seed(sampling_seed, id) % 100000), shots);
    out.push_back(std::move(st));
  }
  return out;
}

namespace detail_meta {

inline TokenBatch sample_batch(const Vocab& vocab, const std::vector<Example>& pool,
                               int batch_size, Rng& rng) {
  const int n = static_cast<int>(pool.size());
  const int k = std::min(batch_size, n);
  return detail_tuning::batch_from(vocab, pool, rng.sample_indices(n, k));
}

}  // namespace detail_meta

// Episodic meta-training: per step, sample one source task uniformly, then
// dispatch the method's update rule. Only the prompt moves.
inline MetaResult meta_train(const FrozenBackbone& model,
                             const PromptEmbeddings& init,
                             const std::vector<SourceTask>& sources,
                             const MetaConfig& cfg) {
  cfg.validate();
  init.validate();
  if (sources.empty()) throw std::invalid_argument("meta_train: no source tasks");
  if (cfg.method == MetaMethod::kMtl) {
    throw std::invalid_argument("meta_train: use mtl_train for multi-task learning");
  }

  const auto started = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  PromptEmbeddings phi = init;
  MetaResult result;
  result.loss_curve.reserve(static_cast<std::size_t>(cfg.total_steps));

  for (int step = 1; step <= cfg.total_steps; ++step) {
    const SourceTask& task = sources[static_cast<std::size_t>(
        rng.next_int(static_cast<int>(sources.size())))];
    MetaStepStats stats;
    try {
      switch (cfg.method) {
        case MetaMethod::kMaml:
        case MetaMethod::kFomaml: {
          Episode ep;
          ep.support = detail_meta::sample_batch(model.vocab, task.splits.support(),
                                                 cfg.inner_batch_size, rng);
          ep.query = detail_meta::sample_batch(model.vocab, task.splits.query(),
                                               cfg.inner_batch_size, rng);
          phi = cfg.method == MetaMethod::kMaml
                    ? maml_step(phi, model, ep, cfg.inner_lr, cfg.outer_lr, &stats)
                    : fomaml_step(phi, model, ep, cfg.inner_lr, cfg.outer_lr, &stats);
          break;
        }
        case MetaMethod::kReptile: {
          // Inner steps draw from the pooled support+query data.
          std::vector<Example> pooled = task.splits.support();
          pooled.insert(pooled.end(), task.splits.query().begin(),
                        task.splits.query().end());
          std::vector<TokenBatch> batches;
          batches.reserve(static_cast<std::size_t>(cfg.inner_steps));
          for (int k = 0; k < cfg.inner_steps; ++k) {
            batches.push_back(detail_meta::sample_batch(model.vocab, pooled,
                                                        cfg.inner_batch_size, rng));
          }
          phi = reptile_step(phi, model, batches, cfg.inner_lr, cfg.outer_lr, &stats);
          break;
        }
        case MetaMethod::kMtl:
          break;
      }
    } catch (const NonFiniteError& e) {
      throw NonFiniteError(std::string(e.what()) + " (meta step " +
                           std::to_string(step) + ", task " + task.id + ")");
    }
    result.loss_curve.emplace_back(step, stats.outer_loss);
  }

  phi.origin = PromptOrigin::kMetaLearned;
  result.phi_star = std::move(phi);
  result.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

// Multi-task baseline: one shared prompt trained by SGD over the union of all
// source examples (support and query), reshuffled every epoch.
inline MetaResult mtl_train(const FrozenBackbone& model,
                            const PromptEmbeddings& init,
                            const std::vector<SourceTask>& sources,
                            const MetaConfig& cfg) {
  cfg.validate();
  init.validate();
  if (sources.empty()) throw std::invalid_argument("mtl_train: no source tasks");

  const auto started = std::chrono::steady_clock::now();
  std::vector<Example> pooled;
  for (const SourceTask& st : sources) {
    pooled.insert(pooled.end(), st.splits.support().begin(), st.splits.support().end());
    pooled.insert(pooled.end(), st.splits.query().begin(), st.splits.query().end());
  }

  Rng rng(cfg.seed);
  std::vector<double> phi = init.matrix;
  const Shape shape{init.prompt_len, init.dim};
  MetaResult result;

  int step = 0;
  const int n = static_cast<int>(pooled.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.mtl_epochs; ++epoch) {
    rng.shuffle(order);
    for (int at = 0; at < n; at += cfg.mtl_batch_size) {
      const int hi = std::min(n, at + cfg.mtl_batch_size);
      std::vector<int> idx(order.begin() + at, order.begin() + hi);
      TokenBatch tb = detail_tuning::batch_from(model.vocab, pooled, idx);
      Tape tape(false);
      Tensor p = tape.leaf(shape, phi, true);
      double loss_value = 0.0;
      try {
        Tensor loss = nll_loss_graph(bind_backbone(tape, model, false), &p, tb);
        loss_value = loss.scalar_value();
        const Tensor g = tape.grad(loss, {p}, false)[0];
        for (std::size_t i = 0; i < phi.size(); ++i) {
          phi[i] -= cfg.inner_lr * g.values()[i];
        }
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(e.what()) + " (mtl epoch " +
                             std::to_string(epoch) + ")");
      }
      result.loss_curve.emplace_back(++step, loss_value);
    }
  }

  result.phi_star = init;
  result.phi_star.matrix = std::move(phi);
  result.phi_star.origin = PromptOrigin::kMetaLearned;
  result.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

// Persisted as a prompt file plus a JSON sidecar with provenance.
inline void save_meta_result(const MetaResult& r, const MetaConfig& cfg,
                             std::uint64_t backbone_checksum,
                             const std::filesystem::path& prompt_path,
                             const std::filesystem::path& sidecar_path) {
  save_prompt(r.phi_star, prompt_path);
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [step, loss] : r.loss_curve) {
    curve.push_back({{"step", step}, {"loss", loss}});
  }
  nlohmann::json j{{"schema", "metaprompt/meta-result/v1"},
                   {"config", cfg.to_json()},
                   {"config_hash", hash_hex(r.config_hash)},
                   {"backbone_checksum", hash_hex(backbone_checksum)},
                   {"wall_time_seconds", r.wall_time_seconds},
                   {"loss_curve", std::move(curve)}};
  write_file_atomic(sidecar_path, j.dump(2));
}

}  // namespace metaprompt
