#pragma once

// Text and audio embedding providers. The built-in providers are cheap,
// deterministic stand-ins with the same interface contract as a real
// pretrained encoder: a pooled unit-L2 vector plus a per-token / per-frame
// sequence. A JSONL-backed provider swaps in precomputed vectors.

#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "textsep/audio.hpp"
#include "textsep/errors.hpp"
#include "textsep/rng.hpp"

namespace textsep::embed {

struct TextEmbedding {
  std::vector<float> pooled;                // unit L2
  std::vector<std::vector<float>> tokens;   // per-token vectors, prompt order
  std::string provider_id;
};

struct AudioEmbedding {
  std::vector<float> pooled;                // unit L2
  std::vector<std::vector<float>> frames;   // per-analysis-window vectors
  std::string provider_id;
};

inline std::vector<std::string> whitespace_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline void l2_normalize(std::vector<float>& v, const char* what) {
  double norm = 0.0;
  for (float x : v) norm += static_cast<double>(x) * x;
  norm = std::sqrt(norm);
  if (norm < 1e-12) throw DataError(std::string(what) + ": zero-norm embedding");
  for (float& x : v) x = static_cast<float>(x / norm);
}

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  return dot / std::sqrt(na * nb + 1e-24);
}

class TextProvider {
 public:
  virtual ~TextProvider() = default;
  virtual int dim() const = 0;
  virtual std::string id() const = 0;
  virtual TextEmbedding embed_text(const std::string& prompt) const = 0;
};

class AudioProvider {
 public:
  virtual ~AudioProvider() = default;
  virtual int dim() const = 0;
  virtual std::string id() const = 0;
  // key identifies the clip for providers that look embeddings up rather
  // than compute them; computing providers ignore it.
  virtual AudioEmbedding embed_audio(const audio::AudioSignal& signal,
                                     const std::string& key = "") const = 0;
};

// Deterministic text stub: each distinct token maps to a fixed Gaussian
// vector derived from (seed, token); the pooled vector is the normalized
// token mean, so it is invariant to token order.
class HashTextProvider : public TextProvider {
 public:
  explicit HashTextProvider(std::uint64_t seed, int dim = 512) : seed_(seed), dim_(dim) {
    if (dim < 1) throw ConfigError("HashTextProvider: dim must be positive");
  }

  int dim() const override { return dim_; }
  std::string id() const override { return "hash-text-v1"; }

  std::vector<float> token_vector(const std::string& token) const {
    Rng rng(derive_seed(seed_, hash_str(token)));
    std::vector<float> v(static_cast<std::size_t>(dim_));
    for (auto& x : v) x = static_cast<float>(rng.gaussian());
    return v;
  }

  TextEmbedding embed_text(const std::string& prompt) const override {
    auto toks = whitespace_tokens(prompt);
    if (toks.empty()) throw DataError("embed_text: prompt has no tokens");
    TextEmbedding out;
    out.provider_id = id();
    out.pooled.assign(static_cast<std::size_t>(dim_), 0.0f);
    for (const auto& t : toks) {
      out.tokens.push_back(token_vector(t));
      for (std::size_t i = 0; i < out.pooled.size(); ++i) out.pooled[i] += out.tokens.back()[i];
    }
    for (auto& x : out.pooled) x /= static_cast<float>(toks.size());
    l2_normalize(out.pooled, "embed_text");
    return out;
  }

 private:
  std::uint64_t seed_;
  int dim_;
};

// Deterministic audio stub: 32 ms non-overlapping windows, magnitude
// triangular filterbank, log compression, then a fixed seeded projection to
// the embedding dimension. No learned state anywhere.
class FilterbankAudioProvider : public AudioProvider {
 public:
  explicit FilterbankAudioProvider(std::uint64_t seed, int dim = 512, int bands = 64)
      : seed_(seed), dim_(dim), bands_(bands) {
    if (dim < 1 || bands < 2) throw ConfigError("FilterbankAudioProvider: bad dim/bands");
    Rng rng(derive_seed(seed_, 0xf117e2));
    projection_.resize(static_cast<std::size_t>(dim_) * bands_);
    const double scale = 1.0 / std::sqrt(static_cast<double>(bands_));
    for (auto& v : projection_) v = scale * rng.gaussian();
  }

  int dim() const override { return dim_; }
  int bands() const { return bands_; }
  std::string id() const override { return "filterbank-audio-v1"; }

  AudioEmbedding embed_audio(const audio::AudioSignal& signal,
                             const std::string& /*key*/ = "") const override {
    audio::validate(signal, "embed_audio");
    const std::int64_t window = std::llround(signal.sample_rate * 0.032);
    if (signal.length() < window) {
      throw DataError("embed_audio: signal shorter than one 32 ms analysis window");
    }
    const std::int64_t n_frames = signal.length() / window;
    const auto& tables = dft_tables(window);
    const std::int64_t n_bins = window / 2 + 1;

    AudioEmbedding out;
    out.provider_id = id();
    out.pooled.assign(static_cast<std::size_t>(dim_), 0.0f);
    std::vector<double> mags(static_cast<std::size_t>(n_bins));
    std::vector<double> fb(static_cast<std::size_t>(bands_));
    for (std::int64_t f = 0; f < n_frames; ++f) {
      const float* x = signal.samples.data() + f * window;
      for (std::int64_t k = 0; k < n_bins; ++k) {
        const double* ct = tables.cos.data() + k * window;
        const double* st = tables.sin.data() + k * window;
        double re = 0.0, im = 0.0;
        for (std::int64_t t = 0; t < window; ++t) {
          re += ct[t] * x[t];
          im += st[t] * x[t];
        }
        mags[static_cast<std::size_t>(k)] = std::sqrt(re * re + im * im);
      }
      triangular_bands(mags, fb);
      std::vector<float> frame(static_cast<std::size_t>(dim_));
      for (int i = 0; i < dim_; ++i) {
        const double* p = projection_.data() + static_cast<std::size_t>(i) * bands_;
        double acc = 0.0;
        for (int b = 0; b < bands_; ++b) acc += p[b] * fb[static_cast<std::size_t>(b)];
        frame[static_cast<std::size_t>(i)] = static_cast<float>(acc);
        out.pooled[static_cast<std::size_t>(i)] += static_cast<float>(acc);
      }
      out.frames.push_back(std::move(frame));
    }
    for (auto& v : out.pooled) v /= static_cast<float>(n_frames);
    l2_normalize(out.pooled, "embed_audio");
    return out;
  }

 private:
  struct DftTables {
    std::vector<double> cos, sin;
  };

  const DftTables& dft_tables(std::int64_t window) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = tables_.find(window);
    if (it != tables_.end()) return it->second;
    DftTables t;
    const std::int64_t n_bins = window / 2 + 1;
    t.cos.resize(static_cast<std::size_t>(n_bins * window));
    t.sin.resize(static_cast<std::size_t>(n_bins * window));
    for (std::int64_t k = 0; k < n_bins; ++k) {
      for (std::int64_t i = 0; i < window; ++i) {
        const double a = 2.0 * M_PI * static_cast<double>(k) * static_cast<double>(i) /
                         static_cast<double>(window);
        t.cos[static_cast<std::size_t>(k * window + i)] = std::cos(a);
        t.sin[static_cast<std::size_t>(k * window + i)] = -std::sin(a);
      }
    }
    return tables_.emplace(window, std::move(t)).first->second;
  }

  // Triangular magnitude bands over linearly spaced edges, log-compressed.
  void triangular_bands(const std::vector<double>& mags, std::vector<double>& fb) const {
    const std::int64_t n_bins = static_cast<std::int64_t>(mags.size());
    for (int b = 0; b < bands_; ++b) {
      const double lo = static_cast<double>(b) / (bands_ + 1) * (n_bins - 1);
      const double mid = static_cast<double>(b + 1) / (bands_ + 1) * (n_bins - 1);
      const double hi = static_cast<double>(b + 2) / (bands_ + 1) * (n_bins - 1);
      double acc = 0.0;
      for (std::int64_t k = static_cast<std::int64_t>(lo); k <= static_cast<std::int64_t>(hi) && k < n_bins; ++k) {
        const double kk = static_cast<double>(k);
        double wgt = 0.0;
        if (kk >= lo && kk < mid) {
          wgt = (kk - lo) / (mid - lo);
        } else if (kk >= mid && kk <= hi) {
          wgt = (hi - kk) / (hi - mid);
        }
        acc += wgt * mags[static_cast<std::size_t>(k)];
      }
      fb[static_cast<std::size_t>(b)] = std::log(1e-8 + acc);
    }
  }

  std::uint64_t seed_;
  int dim_;
  int bands_;
  std::vector<double> projection_;  // dim x bands, row-major
  mutable std::mutex mutex_;
  mutable std::map<std::int64_t, DftTables> tables_;
};

// JSONL-backed provider: one {"key": ..., "vector": [...]} object per line.
// Text lookups use the prompt string as the key; audio lookups use the
// caller-supplied key (typically the clip path or id).
class PrecomputedProvider : public TextProvider, public AudioProvider {
 public:
  explicit PrecomputedProvider(const std::string& jsonl_path) : path_(jsonl_path) {
    std::ifstream f(jsonl_path);
    if (!f) throw FileError("PrecomputedProvider: cannot open '" + jsonl_path + "'");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("PrecomputedProvider: bad JSON on line " + std::to_string(lineno) +
                          " of '" + jsonl_path + "': " + e.what());
      }
      if (!j.contains("key") || !j.contains("vector")) {
        throw FormatError("PrecomputedProvider: line " + std::to_string(lineno) +
                          " lacks key/vector fields");
      }
      const auto key = j["key"].get<std::string>();
      auto vec = j["vector"].get<std::vector<float>>();
      if (dim_ == 0) {
        dim_ = static_cast<int>(vec.size());
        if (dim_ == 0) throw FormatError("PrecomputedProvider: empty vector for key '" + key + "'");
      } else if (static_cast<int>(vec.size()) != dim_) {
        throw FormatError("PrecomputedProvider: key '" + key + "' has dimension " +
                          std::to_string(vec.size()) + ", expected " + std::to_string(dim_));
      }
      if (!table_.emplace(key, std::move(vec)).second) {
        throw FormatError("PrecomputedProvider: duplicate key '" + key + "'");
      }
    }
    if (table_.empty()) throw FormatError("PrecomputedProvider: '" + jsonl_path + "' has no entries");
  }

  int dim() const override { return dim_; }
  std::string id() const override { return "precomputed:" + path_; }

  TextEmbedding embed_text(const std::string& prompt) const override {
    const auto& v = lookup(prompt);
    TextEmbedding out;
    out.provider_id = id();
    out.pooled = v;
    l2_normalize(out.pooled, "embed_text");
    out.tokens = {out.pooled};
    return out;
  }

  AudioEmbedding embed_audio(const audio::AudioSignal&, const std::string& key = "") const override {
    if (key.empty()) throw DataError("PrecomputedProvider: audio lookup requires a key");
    const auto& v = lookup(key);
    AudioEmbedding out;
    out.provider_id = id();
    out.pooled = v;
    l2_normalize(out.pooled, "embed_audio");
    out.frames = {out.pooled};
    return out;
  }

 private:
  const std::vector<float>& lookup(const std::string& key) const {
    auto it = table_.find(key);
    if (it == table_.end()) {
      throw DataError("PrecomputedProvider: no embedding for key '" + key + "'");
    }
    return it->second;
  }

  std::string path_;
  int dim_ = 0;
  std::unordered_map<std::string, std::vector<float>> table_;
};

// Memoizes provider results. Audio entries are keyed by the caller's clip
// key, so distinct clips must use distinct keys.
class EmbeddingCache {
 public:
  const TextEmbedding& text(const TextProvider& provider, const std::string& prompt) {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = text_.find(prompt);
    if (it != text_.end()) return it->second;
    return text_.emplace(prompt, provider.embed_text(prompt)).first->second;
  }

  const AudioEmbedding& audio(const AudioProvider& provider, const audio::AudioSignal& signal,
                              const std::string& key) {
    if (key.empty()) throw DataError("EmbeddingCache: audio entries need a non-empty key");
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = audio_.find(key);
    if (it != audio_.end()) return it->second;
    return audio_.emplace(key, provider.embed_audio(signal, key)).first->second;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return text_.size() + audio_.size();
  }

 private:
  mutable std::mutex mutex_;
  std::unordered_map<std::string, TextEmbedding> text_;
  std::unordered_map<std::string, AudioEmbedding> audio_;
};

}  // namespace textsep::embed
