#pragma once

// A tiny frozen text-to-text model: token + position embeddings, a stack of
// single-head causal self-attention blocks with tanh MLPs, and a vocabulary
// head. Input and output are concatenated with a separator token and trained
// teacher-forced; the loss is the mean negative log-likelihood per supervised
// token position. Soft prompt rows, when present, are prepended to the
// embedded sequence before the first layer.

#include <cmath>
#include <nlohmann/json.hpp>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "metaprompt/common.hpp"
#include "metaprompt/ops.hpp"
#include "metaprompt/rng.hpp"
#include "metaprompt/tape.hpp"
#include "metaprompt/vocab.hpp"

namespace metaprompt {

struct BackboneConfig {
  int dim = 32;
  int layers = 2;
  int vocab_size = 64;
  int max_seq_len = 64;
  std::uint64_t seed = 7;
};

struct BackboneLayer {
  Tensor wq, wk, wv, wo;  // [d,d]
  Tensor w1;              // [d,4d]
  Tensor w2;              // [4d,d]
};

class FrozenBackbone {
 public:
  BackboneConfig config;
  Vocab vocab;
  Tensor token_embeddings;  // [V,d]
  Tensor positions;         // [max_seq_len,d]
  std::vector<BackboneLayer> layers;
  Tensor head;  // [d,V]

  std::uint64_t checksum() const {
    std::uint64_t h = kFnvOffset;
    h = fnv1a64(token_embeddings.values(), h);
    h = fnv1a64(positions.values(), h);
    for (const BackboneLayer& l : layers) {
      h = fnv1a64(l.wq.values(), h);
      h = fnv1a64(l.wk.values(), h);
      h = fnv1a64(l.wv.values(), h);
      h = fnv1a64(l.wo.values(), h);
      h = fnv1a64(l.w1.values(), h);
      h = fnv1a64(l.w2.values(), h);
    }
    h = fnv1a64(head.values(), h);
    return h;
  }
};

namespace detail_backbone {

inline Tensor gaussian(Rng& rng, int rows, int cols, double sigma) {
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  for (double& x : v) x = sigma * rng.next_normal();
  return Tensor::constant({rows, cols}, std::move(v));
}

inline Tensor noisy_identity(Rng& rng, int n, double diag, double sigma) {
  std::vector<double> v(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      v[static_cast<std::size_t>(i) * n + j] =
          sigma * rng.next_normal() + (i == j ? diag : 0.0);
    }
  }
  return Tensor::constant({n, n}, std::move(v));
}

}  // namespace detail_backbone

// Words of one index group share a cluster direction in embedding space.
// This is the stand-in for the semantic structure a pre-trained model would
// bring: related tokens have correlated embeddings, and the task families
// are built over the same groups.
inline constexpr double kClusterWeight = 0.75;

// Deterministic in seed. The value/output projections start near the identity
// and the head starts as a scaled transpose of the token embeddings, so token
// content carried through attention lands on the matching logits; that is
// what gives prepended prompt rows real leverage over predictions. Scales are
// chosen so a fresh model still produces near-uniform logits, i.e. an initial
// per-token loss close to log(V).
inline FrozenBackbone init_backbone(const BackboneConfig& cfg) {
  if (cfg.dim < 1 || cfg.layers < 1 || cfg.vocab_size < 1) {
    throw std::invalid_argument("init_backbone: dim, layers, vocab_size must be >= 1");
  }
  FrozenBackbone b;
  b.config = cfg;
  b.vocab = Vocab::make(cfg.vocab_size);
  Rng rng(cfg.seed);
  const double d = static_cast<double>(cfg.dim);
  {
    const int words = std::max(0, cfg.vocab_size - Vocab::kNumSpecials);
    const int groups = (words + kWordGroupSize - 1) / kWordGroupSize;
    std::vector<std::vector<double>> centers;
    centers.reserve(static_cast<std::size_t>(groups));
    for (int g = 0; g < groups; ++g) {
      std::vector<double> u(static_cast<std::size_t>(cfg.dim));
      for (double& x : u) x = rng.next_normal();
      centers.push_back(std::move(u));
    }
    const double self = std::sqrt(1.0 - kClusterWeight * kClusterWeight);
    std::vector<double> e(static_cast<std::size_t>(cfg.vocab_size) * cfg.dim);
    for (int t = 0; t < cfg.vocab_size; ++t) {
      const int word = t - Vocab::kNumSpecials;
      for (int k = 0; k < cfg.dim; ++k) {
        double v = rng.next_normal();
        if (word >= 0) {
          v = self * v + kClusterWeight *
                             centers[static_cast<std::size_t>(word / kWordGroupSize)]
                                    [static_cast<std::size_t>(k)];
        }
        e[static_cast<std::size_t>(t) * cfg.dim + static_cast<std::size_t>(k)] = v;
      }
    }
    b.token_embeddings = Tensor::constant({cfg.vocab_size, cfg.dim}, std::move(e));
  }
  b.positions = detail_backbone::gaussian(rng, cfg.max_seq_len, cfg.dim, 0.3);
  for (int l = 0; l < cfg.layers; ++l) {
    BackboneLayer layer;
    layer.wq = detail_backbone::gaussian(rng, cfg.dim, cfg.dim, 1.0 / std::sqrt(d));
    layer.wk = detail_backbone::gaussian(rng, cfg.dim, cfg.dim, 1.0 / std::sqrt(d));
    layer.wv = detail_backbone::noisy_identity(rng, cfg.dim, 0.9, 0.25 / std::sqrt(d));
    layer.wo = detail_backbone::noisy_identity(rng, cfg.dim, 0.9, 0.25 / std::sqrt(d));
    layer.w1 = detail_backbone::gaussian(rng, cfg.dim, 4 * cfg.dim, 0.8 / std::sqrt(d));
    layer.w2 = detail_backbone::gaussian(rng, 4 * cfg.dim, cfg.dim, 0.4 / std::sqrt(4.0 * d));
    b.layers.push_back(std::move(layer));
  }
  // Embedding-tied head with a small random perturbation.
  {
    const double s = 0.35 / d;
    std::vector<double> h(static_cast<std::size_t>(cfg.dim) * cfg.vocab_size);
    const std::vector<double>& e = b.token_embeddings.values();
    for (int i = 0; i < cfg.dim; ++i) {
      for (int v = 0; v < cfg.vocab_size; ++v) {
        h[static_cast<std::size_t>(i) * cfg.vocab_size + v] =
            s * e[static_cast<std::size_t>(v) * cfg.dim + i] +
            (0.02 / std::sqrt(d)) * rng.next_normal();
      }
    }
    b.head = Tensor::constant({cfg.dim, cfg.vocab_size}, std::move(h));
  }
  return b;
}

inline FrozenBackbone init_backbone(int dim, int layers, int vocab_size,
                                    std::uint64_t seed) {
  BackboneConfig cfg;
  cfg.dim = dim;
  cfg.layers = layers;
  cfg.vocab_size = vocab_size;
  cfg.seed = seed;
  return init_backbone(cfg);
}

// Tokenized batch, row-major with PAD ragging. Output rows carry an EOS and a
// 0/1 mask selecting the positions that contribute to the loss.
struct TokenBatch {
  int batch = 0;
  int in_len = 0;
  int out_len = 0;
  std::vector<int> input_ids;      // batch x in_len
  std::vector<int> output_ids;     // batch x out_len
  std::vector<double> output_mask;  // batch x out_len
};

inline TokenBatch make_token_batch(
    const Vocab& vocab,
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("make_token_batch: empty batch");
  TokenBatch tb;
  tb.batch = static_cast<int>(pairs.size());
  std::vector<std::vector<int>> ins, outs;
  for (const auto& [in_text, out_text] : pairs) {
    ins.push_back(vocab.encode(in_text));
    std::vector<int> out = vocab.encode(out_text);
    out.push_back(Vocab::kEos);
    outs.push_back(std::move(out));
    tb.in_len = std::max(tb.in_len, static_cast<int>(ins.back().size()));
    tb.out_len = std::max(tb.out_len, static_cast<int>(outs.back().size()));
  }
  tb.input_ids.assign(static_cast<std::size_t>(tb.batch) * tb.in_len, Vocab::kPad);
  tb.output_ids.assign(static_cast<std::size_t>(tb.batch) * tb.out_len, Vocab::kPad);
  tb.output_mask.assign(static_cast<std::size_t>(tb.batch) * tb.out_len, 0.0);
  for (int b = 0; b < tb.batch; ++b) {
    const auto& in = ins[static_cast<std::size_t>(b)];
    const auto& out = outs[static_cast<std::size_t>(b)];
    for (std::size_t j = 0; j < in.size(); ++j) {
      tb.input_ids[static_cast<std::size_t>(b) * tb.in_len + j] = in[j];
    }
    for (std::size_t j = 0; j < out.size(); ++j) {
      tb.output_ids[static_cast<std::size_t>(b) * tb.out_len + j] = out[j];
      tb.output_mask[static_cast<std::size_t>(b) * tb.out_len + j] = 1.0;
    }
  }
  return tb;
}

inline void validate_batch(const TokenBatch& tb, int vocab_size) {
  for (int id : tb.input_ids) {
    if (id < 0 || id >= vocab_size) {
      throw std::invalid_argument("token id out of vocabulary range");
    }
  }
  for (int id : tb.output_ids) {
    if (id < 0 || id >= vocab_size) {
      throw std::invalid_argument("token id out of vocabulary range");
    }
  }
}

// Parameter handles used by one forward construction: either tape leaves
// (trainable or frozen) or detached constants for pure evaluation.
struct BoundBackbone {
  const FrozenBackbone* model = nullptr;
  Tensor embeddings, positions, head;
  std::vector<BackboneLayer> layers;

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out{embeddings, positions};
    for (const BackboneLayer& l : layers) {
      out.push_back(l.wq);
      out.push_back(l.wk);
      out.push_back(l.wv);
      out.push_back(l.wo);
      out.push_back(l.w1);
      out.push_back(l.w2);
    }
    out.push_back(head);
    return out;
  }
};

inline BoundBackbone bind_backbone(Tape& tape, const FrozenBackbone& b,
                                   bool trainable) {
  BoundBackbone bb;
  bb.model = &b;
  bb.embeddings = tape.leaf(b.token_embeddings, trainable);
  bb.positions = tape.leaf(b.positions, trainable);
  for (const BackboneLayer& l : b.layers) {
    bb.layers.push_back(BackboneLayer{
        tape.leaf(l.wq, trainable), tape.leaf(l.wk, trainable),
        tape.leaf(l.wv, trainable), tape.leaf(l.wo, trainable),
        tape.leaf(l.w1, trainable), tape.leaf(l.w2, trainable)});
  }
  bb.head = tape.leaf(b.head, trainable);
  return bb;
}

inline BoundBackbone bind_detached(const FrozenBackbone& b) {
  BoundBackbone bb;
  bb.model = &b;
  bb.embeddings = b.token_embeddings;
  bb.positions = b.positions;
  bb.layers = b.layers;
  bb.head = b.head;
  return bb;
}

namespace detail_backbone {

inline Tensor causal_mask(int len) {
  // Large negative (not -inf) above the diagonal keeps every tensor finite.
  std::vector<double> m(static_cast<std::size_t>(len) * len, 0.0);
  for (int i = 0; i < len; ++i) {
    for (int j = i + 1; j < len; ++j) {
      m[static_cast<std::size_t>(i) * len + j] = -1e9;
    }
  }
  return Tensor::constant({len, len}, std::move(m));
}

}  // namespace detail_backbone

// Hidden states for a batch of already-assembled token rows, with optional
// prompt rows prepended to every example. Returns [batch*seq_len, dim] where
// seq_len = prompt_len + fed_len.
inline Tensor transformer_states(const BoundBackbone& bb, const Tensor* prompt,
                                 const std::vector<int>& fed_ids, int batch,
                                 int fed_len) {
  const BackboneConfig& cfg = bb.model->config;
  const int prompt_len = prompt != nullptr ? prompt->rows() : 0;
  if (prompt != nullptr && prompt->cols() != cfg.dim) {
    throw std::invalid_argument("prompt width does not match model dim");
  }
  const int seq = prompt_len + fed_len;
  if (seq > cfg.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(seq) +
                                " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }

  std::vector<Tensor> rows;
  rows.reserve(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    std::vector<int> ids(fed_ids.begin() + static_cast<std::ptrdiff_t>(b) * fed_len,
                         fed_ids.begin() + static_cast<std::ptrdiff_t>(b + 1) * fed_len);
    Tensor emb = ops::gather_rows(bb.embeddings, ids);
    rows.push_back(prompt_len > 0 ? ops::concat_rows({*prompt, emb}) : emb);
  }
  Tensor x = batch == 1 ? rows[0] : ops::concat_rows(rows);

  std::vector<int> pos_ids(static_cast<std::size_t>(batch) * seq);
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < seq; ++i) {
      pos_ids[static_cast<std::size_t>(b) * seq + static_cast<std::size_t>(i)] = i;
    }
  }
  x = ops::add(x, ops::gather_rows(bb.positions, pos_ids));

  Tensor mask = detail_backbone::causal_mask(seq);
  if (x.on_tape()) mask = x.tape()->constant(mask);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.dim));

  for (const BackboneLayer& layer : bb.layers) {
    Tensor q = ops::matmul(x, layer.wq);
    Tensor k = ops::matmul(x, layer.wk);
    Tensor v = ops::matmul(x, layer.wv);
    std::vector<Tensor> ctx;
    ctx.reserve(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
      Tensor qb = ops::slice_rows(q, b * seq, (b + 1) * seq);
      Tensor kb = ops::slice_rows(k, b * seq, (b + 1) * seq);
      Tensor vb = ops::slice_rows(v, b * seq, (b + 1) * seq);
      Tensor scores = ops::scale(ops::matmul(qb, ops::transpose(kb)), inv_sqrt_d);
      Tensor att = ops::softmax_rows(ops::add(scores, mask));
      ctx.push_back(ops::matmul(att, vb));
    }
    Tensor c = batch == 1 ? ctx[0] : ops::concat_rows(ctx);
    x = ops::add(x, ops::matmul(c, layer.wo));
    Tensor h = ops::tanh(ops::matmul(x, layer.w1));
    x = ops::add(x, ops::matmul(h, layer.w2));
  }
  return x;
}

// Offset of the separator inside the assembled sequence; predictions for
// output position j are read at row sep + j.
inline int separator_position(int prompt_len, int in_len) {
  return prompt_len + 1 + in_len;
}

inline int fed_length(const TokenBatch& tb) { return tb.in_len + tb.out_len + 1; }

inline std::vector<int> assemble_fed_ids(const TokenBatch& tb) {
  const int fed_len = fed_length(tb);
  std::vector<int> fed(static_cast<std::size_t>(tb.batch) * fed_len, Vocab::kPad);
  for (int b = 0; b < tb.batch; ++b) {
    int* row = fed.data() + static_cast<std::size_t>(b) * fed_len;
    int pos = 0;
    row[pos++] = Vocab::kBos;
    for (int j = 0; j < tb.in_len; ++j) {
      row[pos++] = tb.input_ids[static_cast<std::size_t>(b) * tb.in_len + j];
    }
    row[pos++] = Vocab::kSep;
    for (int j = 0; j + 1 < tb.out_len; ++j) {  // teacher forcing: all but last
      row[pos++] = tb.output_ids[static_cast<std::size_t>(b) * tb.out_len + j];
    }
  }
  return fed;
}

// Teacher-forced mean NLL per supervised token. Gradient flows into the
// prompt (and into the parameters bound as trainable, for the fine-tuning
// path).
inline Tensor nll_loss_graph(const BoundBackbone& bb, const Tensor* prompt,
                             const TokenBatch& tb) {
  validate_batch(tb, bb.model->config.vocab_size);
  const int prompt_len = prompt != nullptr ? prompt->rows() : 0;
  const int fed_len = fed_length(tb);
  const int seq = prompt_len + fed_len;
  Tensor states = transformer_states(bb, prompt, assemble_fed_ids(tb), tb.batch,
                                     fed_len);
  const int sep = separator_position(prompt_len, tb.in_len);
  std::vector<int> label_rows;
  label_rows.reserve(static_cast<std::size_t>(tb.batch) * tb.out_len);
  for (int b = 0; b < tb.batch; ++b) {
    for (int j = 0; j < tb.out_len; ++j) {
      label_rows.push_back(b * seq + sep + j);
    }
  }
  Tensor outs = ops::gather_rows(states, label_rows);
  Tensor logits = ops::matmul(outs, bb.head);
  return ops::softmax_cross_entropy(logits, tb.output_ids, tb.output_mask);
}

// Convenience: loss of a frozen model for a detached prompt, off-tape.
inline double nll_loss_value(const FrozenBackbone& model, const Tensor* prompt,
                             const TokenBatch& tb) {
  BoundBackbone bb = bind_detached(model);
  return nll_loss_graph(bb, prompt, tb).scalar_value();
}

// Batched greedy decoding: argmax continuation after [BOS] input [SEP] until
// EOS or max_new_tokens. Returns the generated ids per row, EOS excluded.
inline std::vector<std::vector<int>> greedy_decode(
    const FrozenBackbone& model, const Tensor* prompt,
    const std::vector<std::vector<int>>& inputs, int max_new_tokens) {
  if (inputs.empty()) return {};
  const int batch = static_cast<int>(inputs.size());
  int in_len = 0;
  for (const auto& row : inputs) {
    in_len = std::max(in_len, static_cast<int>(row.size()));
  }
  const int prompt_len = prompt != nullptr ? prompt->rows() : 0;
  if (prompt_len + 1 + in_len + 1 + max_new_tokens > model.config.max_seq_len) {
    throw std::invalid_argument("decode length overflow: need " +
                                std::to_string(prompt_len + in_len + 2 + max_new_tokens) +
                                " > max_seq_len " +
                                std::to_string(model.config.max_seq_len));
  }

  BoundBackbone bb = bind_detached(model);
  std::vector<std::vector<int>> fed(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    auto& row = fed[static_cast<std::size_t>(b)];
    row.push_back(Vocab::kBos);
    for (int id : inputs[static_cast<std::size_t>(b)]) row.push_back(id);
    row.resize(static_cast<std::size_t>(1 + in_len), Vocab::kPad);
    row.push_back(Vocab::kSep);
  }

  std::vector<std::vector<int>> generated(static_cast<std::size_t>(batch));
  std::vector<bool> done(static_cast<std::size_t>(batch), false);
  const int vocab = model.config.vocab_size;

  for (int step = 0; step < max_new_tokens; ++step) {
    const int fed_len = static_cast<int>(fed[0].size());
    std::vector<int> flat;
    flat.reserve(static_cast<std::size_t>(batch) * fed_len);
    for (const auto& row : fed) flat.insert(flat.end(), row.begin(), row.end());
    Tensor states = transformer_states(bb, prompt, flat, batch, fed_len);
    const int seq = prompt_len + fed_len;
    std::vector<int> last_rows(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) last_rows[static_cast<std::size_t>(b)] = (b + 1) * seq - 1;
    Tensor logits = ops::matmul(ops::gather_rows(states, last_rows), bb.head);

    bool all_done = true;
    for (int b = 0; b < batch; ++b) {
      if (done[static_cast<std::size_t>(b)]) {
        fed[static_cast<std::size_t>(b)].push_back(Vocab::kPad);
        continue;
      }
      const double* row = logits.values().data() + static_cast<std::size_t>(b) * vocab;
      int best = 0;
      for (int j = 1; j < vocab; ++j) {
        if (row[j] > row[best]) best = j;
      }
      if (best == Vocab::kEos) {
        done[static_cast<std::size_t>(b)] = true;
      } else {
        generated[static_cast<std::size_t>(b)].push_back(best);
        all_done = false;
      }
      fed[static_cast<std::size_t>(b)].push_back(done[static_cast<std::size_t>(b)] ? Vocab::kPad : best);
    }
    if (all_done) break;
  }
  return generated;
}

// ---- serialization ------------------------------------------------------

inline nlohmann::json backbone_to_json(const FrozenBackbone& b) {
  nlohmann::json j;
  j["schema"] = "metaprompt/backbone/v1";
  j["config"] = {{"dim", b.config.dim},
                 {"layers", b.config.layers},
                 {"vocab_size", b.config.vocab_size},
                 {"max_seq_len", b.config.max_seq_len},
                 {"seed", b.config.seed}};
  j["checksum"] = hash_hex(b.checksum());
  j["vocab"] = b.vocab.tokens;
  j["embeddings"] = b.token_embeddings.values();
  j["positions"] = b.positions.values();
  nlohmann::json layers = nlohmann::json::array();
  for (const BackboneLayer& l : b.layers) {
    layers.push_back({{"wq", l.wq.values()},
                      {"wk", l.wk.values()},
                      {"wv", l.wv.values()},
                      {"wo", l.wo.values()},
                      {"w1", l.w1.values()},
                      {"w2", l.w2.values()}});
  }
  j["layers"] = std::move(layers);
  j["head"] = b.head.values();
  return j;
}

inline FrozenBackbone backbone_from_json(const nlohmann::json& j) {
  FrozenBackbone b;
  const auto& c = j.at("config");
  b.config.dim = c.at("dim").get<int>();
  b.config.layers = c.at("layers").get<int>();
  b.config.vocab_size = c.at("vocab_size").get<int>();
  b.config.max_seq_len = c.at("max_seq_len").get<int>();
  b.config.seed = c.at("seed").get<std::uint64_t>();
  b.vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
  const int d = b.config.dim;
  auto mat = [&](const nlohmann::json& arr, int rows, int cols) {
    return Tensor::constant({rows, cols}, arr.get<std::vector<double>>());
  };
  b.token_embeddings = mat(j.at("embeddings"), b.config.vocab_size, d);
  b.positions = mat(j.at("positions"), b.config.max_seq_len, d);
  for (const auto& l : j.at("layers")) {
    b.layers.push_back(BackboneLayer{mat(l.at("wq"), d, d), mat(l.at("wk"), d, d),
                                     mat(l.at("wv"), d, d), mat(l.at("wo"), d, d),
                                     mat(l.at("w1"), d, 4 * d),
                                     mat(l.at("w2"), 4 * d, d)});
  }
  b.head = mat(j.at("head"), d, b.config.vocab_size);
  const std::string stored = j.at("checksum").get<std::string>();
  if (stored != hash_hex(b.checksum())) {
    throw ParseError("backbone checksum mismatch: file is corrupt or was edited");
  }
  return b;
}

inline void save_backbone(const FrozenBackbone& b, const std::filesystem::path& path) {
  write_file_atomic(path, backbone_to_json(b).dump());
}

inline FrozenBackbone load_backbone(const std::filesystem::path& path) {
  return backbone_from_json(nlohmann::json::parse(read_file(path)));
}

}  // namespace metaprompt
