#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "textsep/audio.hpp"
#include "textsep/embed.hpp"
#include "textsep/errors.hpp"
#include "textsep/ops.hpp"
#include "textsep/rng.hpp"
#include "textsep/tensor.hpp"

namespace textsep::model {

// Prompt-to-stream matcher: per-modality adapters, residual cross-attention
// pooling both sequences to one vector each, dot-product logits softmaxed
// across the candidate set, trained with binary cross-entropy.

struct TsrConfig {
  std::int64_t emb_dim = 512;   // provider dim; adapters map emb -> emb
  std::int64_t hidden = 2048;   // adapter hidden width
  std::int64_t attn_dim = 512;  // query/key width
  int heads = 1;
  int k_neg = 2;  // extra cross-example negatives per prompt during training
};

inline void validate(const TsrConfig& c) {
  if (c.emb_dim < 1 || c.hidden < 1 || c.attn_dim < 1) {
    throw ConfigError("tsr: dimensions must be positive");
  }
  if (c.heads != 1) throw ConfigError("tsr: heads must be 1");
  if (c.k_neg < 0) throw ConfigError("tsr: k_neg must be >= 0");
}

inline nlohmann::json to_json(const TsrConfig& c) {
  return {{"emb_dim", c.emb_dim},
          {"hidden", c.hidden},
          {"attn_dim", c.attn_dim},
          {"heads", c.heads},
          {"k_neg", c.k_neg}};
}

inline TsrConfig tsr_from_json(const nlohmann::json& j) {
  TsrConfig c;
  c.emb_dim = j.value("emb_dim", c.emb_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.attn_dim = j.value("attn_dim", c.attn_dim);
  c.heads = j.value("heads", c.heads);
  c.k_neg = j.value("k_neg", c.k_neg);
  return c;
}

// One contrastive group: a prompt sequence against J candidate sequences,
// exactly one of which is the paired target.
struct MatchBatch {
  std::vector<std::vector<float>> prompt;                   // [n_tok][emb]
  std::vector<std::vector<std::vector<float>>> candidates;  // J x [n_frame][emb]
  std::vector<int> labels;                                  // exactly one 1
  int positive = -1;
};

inline MatchBatch make_training_batch(const embed::TextEmbedding& prompt,
                                      const embed::AudioEmbedding& target,
                                      const std::vector<const embed::AudioEmbedding*>& interferers,
                                      const std::vector<const embed::AudioEmbedding*>& negative_pool,
                                      int k_neg, Rng& rng) {
  if (k_neg > 0 && negative_pool.empty()) {
    throw DataError("make_training_batch: k_neg > 0 but the negative pool is empty");
  }
  if (interferers.empty() && k_neg == 0) {
    throw DataError("make_training_batch: no negatives available");
  }
  MatchBatch batch;
  batch.prompt = prompt.tokens;

  std::vector<const std::vector<std::vector<float>>*> seqs;
  seqs.push_back(&target.frames);
  for (const auto* v : interferers) seqs.push_back(&v->frames);
  for (int k = 0; k < k_neg; ++k) {
    const auto idx = rng.uniform_int(static_cast<std::int64_t>(negative_pool.size()));
    seqs.push_back(&negative_pool[static_cast<std::size_t>(idx)]->frames);
  }

  std::vector<int> order(seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  for (std::size_t j = 0; j < order.size(); ++j) {
    batch.candidates.push_back(*seqs[static_cast<std::size_t>(order[j])]);
    batch.labels.push_back(order[j] == 0 ? 1 : 0);
    if (order[j] == 0) batch.positive = static_cast<int>(j);
  }
  return batch;
}

template <typename T>
class Tsr {
 public:
  Tsr(TsrConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    Rng rng(derive_seed(seed, hash_str("tsr")));
    auto dense = [&](const std::string& name, std::int64_t out, std::int64_t in, bool zero) {
      auto w = diff::Tensor<T>::zeros({out, in});
      if (!zero) diff::init_fan_in(w, rng, in);
      return params_.add(name + ".weight", w);
    };
    auto bias = [&](const std::string& name, std::int64_t out) {
      return params_.add(name + ".bias", diff::Tensor<T>::zeros({out}));
    };

    t_w1_ = dense("text.adapter1", cfg_.hidden, cfg_.emb_dim, false);
    t_b1_ = bias("text.adapter1", cfg_.hidden);
    t_w2_ = dense("text.adapter2", cfg_.emb_dim, cfg_.hidden, false);
    t_b2_ = bias("text.adapter2", cfg_.emb_dim);
    s_w1_ = dense("audio.adapter1", cfg_.hidden, cfg_.emb_dim, false);
    s_b1_ = bias("audio.adapter1", cfg_.hidden);
    s_w2_ = dense("audio.adapter2", cfg_.emb_dim, cfg_.hidden, false);
    s_b2_ = bias("audio.adapter2", cfg_.emb_dim);

    t_q_ = dense("text.q", cfg_.attn_dim, cfg_.emb_dim, false);
    t_qb_ = bias("text.q", cfg_.attn_dim);
    t_k_ = dense("text.k", cfg_.attn_dim, cfg_.emb_dim, false);
    t_kb_ = bias("text.k", cfg_.attn_dim);
    s_q_ = dense("audio.q", cfg_.attn_dim, cfg_.emb_dim, false);
    s_qb_ = bias("audio.q", cfg_.attn_dim);
    s_k_ = dense("audio.k", cfg_.attn_dim, cfg_.emb_dim, false);
    s_kb_ = bias("audio.k", cfg_.attn_dim);
    // V maps start at zero so the block initially reduces to pooled adapters.
    t_v_ = dense("text.v", cfg_.emb_dim, cfg_.emb_dim, true);
    t_vb_ = bias("text.v", cfg_.emb_dim);
    s_v_ = dense("audio.v", cfg_.emb_dim, cfg_.emb_dim, true);
    s_vb_ = bias("audio.v", cfg_.emb_dim);
  }

  const TsrConfig& config() const { return cfg_; }
  diff::ParameterStore<T>& params() { return params_; }
  const diff::ParameterStore<T>& params() const { return params_; }

  // Raw [n, emb] sequence tensor from provider output.
  diff::Tensor<T> seq_tensor(const std::vector<std::vector<float>>& seq) const {
    if (seq.empty()) throw DataError("tsr: empty embedding sequence");
    const std::int64_t n = static_cast<std::int64_t>(seq.size());
    auto t = diff::Tensor<T>::zeros({n, cfg_.emb_dim});
    for (std::int64_t i = 0; i < n; ++i) {
      const auto& row = seq[static_cast<std::size_t>(i)];
      if (static_cast<std::int64_t>(row.size()) != cfg_.emb_dim) {
        throw ShapeError("tsr: embedding dim mismatch: got " + std::to_string(row.size()) +
                         ", expected " + std::to_string(cfg_.emb_dim));
      }
      for (std::int64_t j = 0; j < cfg_.emb_dim; ++j) {
        t.values()[static_cast<std::size_t>(i * cfg_.emb_dim + j)] = static_cast<T>(row[static_cast<std::size_t>(j)]);
      }
    }
    return t;
  }

  diff::Tensor<T> adapt_text(const diff::Tensor<T>& x) const {
    using namespace diff;
    return linear(relu(linear(x, t_w1_, t_b1_)), t_w2_, t_b2_);
  }

  diff::Tensor<T> adapt_audio(const diff::Tensor<T>& x) const {
    using namespace diff;
    return linear(relu(linear(x, s_w1_, s_b1_)), s_w2_, s_b2_);
  }

  // Adapted sequences [n_t, emb] and [n_s, emb] -> pooled (M_t, M_s) pair,
  // each [emb]. The shared residual term M_o sums both cross-attention
  // directions after mean-pooling over query positions.
  std::pair<diff::Tensor<T>, diff::Tensor<T>> residual_cross_attention(
      const diff::Tensor<T>& xt, const diff::Tensor<T>& xs) const {
    using namespace diff;
    if (xt.ndim() != 2 || xs.ndim() != 2 || xt.dim(0) < 1 || xs.dim(0) < 1) {
      throw ShapeError("tsr attention: need non-empty [n, emb] sequences");
    }
    auto qt = linear(xt, t_q_, t_qb_);
    auto kt = linear(xt, t_k_, t_kb_);
    auto vt = linear(xt, t_v_, t_vb_);
    auto qs = linear(xs, s_q_, s_qb_);
    auto ks = linear(xs, s_k_, s_kb_);
    auto vs = linear(xs, s_v_, s_vb_);
    auto text_reads_audio = mean_axis0(scaled_dot_attention(qt, ks, vs));
    auto audio_reads_text = mean_axis0(scaled_dot_attention(qs, kt, vt));
    auto m_o = add(text_reads_audio, audio_reads_text);
    return {add(mean_axis0(xt), m_o), add(mean_axis0(xs), m_o)};
  }

  // Probabilities over candidates for one prompt. Index i of the result
  // aligns with candidates[i]; permutation-equivariant by construction.
  diff::Tensor<T> match_logits(const diff::Tensor<T>& prompt_seq,
                               const std::vector<diff::Tensor<T>>& candidate_seqs) const {
    using namespace diff;
    if (candidate_seqs.empty()) throw DataError("match_logits: no candidates");
    auto xt = adapt_text(prompt_seq);
    std::vector<Tensor<T>> logits;
    for (const auto& cand : candidate_seqs) {
      auto xs = adapt_audio(cand);
      auto [mt, ms] = residual_cross_attention(xt, xs);
      logits.push_back(sum(mul(mt, ms)));
    }
    return softmax(stack_scalars(logits), 0);
  }

  // Mean binary cross-entropy of the probability vector against 0/1 labels.
  diff::Tensor<T> tsr_loss(const diff::Tensor<T>& probs, const std::vector<int>& labels) const {
    using namespace diff;
    if (probs.ndim() != 1 || probs.dim(0) != static_cast<std::int64_t>(labels.size())) {
      throw ShapeError("tsr_loss: probs/labels length mismatch");
    }
    constexpr double kEps = 1e-7;
    auto p = clamp(probs, kEps, 1.0 - kEps);
    auto y = Tensor<T>::zeros({probs.dim(0)});
    auto y1 = Tensor<T>::zeros({probs.dim(0)});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != 0 && labels[i] != 1) throw DataError("tsr_loss: labels must be 0/1");
      y.values()[i] = static_cast<T>(labels[i]);
      y1.values()[i] = static_cast<T>(1 - labels[i]);
    }
    auto term = add(mul(y, log_op(p)), mul(y1, log_op(scalar_add(neg(p), 1.0))));
    return neg(mean(term));
  }

  diff::Tensor<T> batch_probs(const MatchBatch& batch) const {
    std::vector<diff::Tensor<T>> cands;
    for (const auto& c : batch.candidates) cands.push_back(seq_tensor(c));
    return match_logits(seq_tensor(batch.prompt), cands);
  }

  // Inference: pick the stream whose audio embedding best matches the prompt.
  // Ties break to the lowest index.
  std::pair<int, std::vector<double>> select_stream(
      const embed::TextEmbedding& prompt,
      const std::vector<embed::AudioEmbedding>& streams) const {
    if (streams.empty()) throw DataError("select_stream: empty candidate list");
    diff::NoGradGuard guard;
    std::vector<diff::Tensor<T>> cands;
    for (const auto& s : streams) cands.push_back(seq_tensor(s.frames));
    auto probs = match_logits(seq_tensor(prompt.tokens), cands);
    std::vector<double> y(probs.values().begin(), probs.values().end());
    int best = 0;
    for (std::size_t i = 1; i < y.size(); ++i) {
      if (y[i] > y[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return {best, y};
  }

 private:
  TsrConfig cfg_;
  diff::ParameterStore<T> params_;
  diff::Tensor<T> t_w1_, t_b1_, t_w2_, t_b2_;
  diff::Tensor<T> s_w1_, s_b1_, s_w2_, s_b2_;
  diff::Tensor<T> t_q_, t_qb_, t_k_, t_kb_, t_v_, t_vb_;
  diff::Tensor<T> s_q_, s_qb_, s_k_, s_kb_, s_v_, s_vb_;
};

}  // namespace textsep::model
