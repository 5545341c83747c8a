#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "textsep/audio.hpp"
#include "textsep/errors.hpp"
#include "textsep/rng.hpp"

namespace textsep::corpus {

// Synthetic paired text-speech corpus. Every utterance is a sequence of
// narrowband tokens (distinct carrier frequency + chirp + envelope per token)
// rendered through a speaker's harmonic profile, so a prompt that names tokens
// is predictive of the target's spectrum without being time-aligned to it.

// ---------------------------------------------------------------------------
// Token vocabulary

struct TokenRenderRule {
  std::string token;
  double center_hz = 0.0;    // carrier frequency
  double chirp = 0.0;        // relative sweep across the token, in [-0.12, 0.12]
  double attack_frac = 0.1;  // attack portion of the active region
};

struct TokenVocabulary {
  std::vector<TokenRenderRule> rules;
  std::unordered_map<std::string, std::size_t> index;

  std::size_t size() const { return rules.size(); }

  const TokenRenderRule& rule(const std::string& token) const {
    auto it = index.find(token);
    if (it == index.end()) throw DataError("vocabulary: unknown token '" + token + "'");
    return rules[it->second];
  }

  static TokenVocabulary make(std::uint64_t seed, std::size_t size = 64, int sample_rate = 8000);
};

namespace detail {

// Bit-reversal permutation of [0, n), compacted when n is not a power of two.
// Consecutive token indices land far apart on the frequency grid, so any two
// low-index tokens (the ones tests compare) are spectrally well separated.
inline std::vector<std::size_t> bit_reversed_order(std::size_t n) {
  std::size_t bits = 0;
  while ((std::size_t(1) << bits) < n) ++bits;
  const std::size_t p = std::size_t(1) << bits;
  std::vector<std::size_t> order;
  order.reserve(n);
  for (std::size_t j = 0; j < p; ++j) {
    std::size_t r = 0;
    for (std::size_t b = 0; b < bits; ++b) r |= ((j >> b) & 1u) << (bits - 1 - b);
    if (r < n) order.push_back(r);
  }
  if (order.empty()) order.push_back(0);
  return order;
}

}  // namespace detail

inline TokenVocabulary TokenVocabulary::make(std::uint64_t seed, std::size_t size,
                                             int sample_rate) {
  static constexpr const char* kConsonants[16] = {"b", "d", "f", "g", "h", "j", "k", "l",
                                                  "m", "n", "p", "r", "s", "t", "v", "z"};
  static constexpr const char* kVowels[4] = {"a", "e", "i", "o"};
  if (size == 0 || size > 64) throw ConfigError("vocabulary: size must be in [1, 64]");
  if (sample_rate <= 0) throw ConfigError("vocabulary: sample_rate must be positive");

  TokenVocabulary v;
  const double f_min = 300.0;
  const double f_max = 0.385 * sample_rate;  // comfortably under Nyquist/1.2
  if (f_max <= f_min) throw ConfigError("vocabulary: sample rate too low for token band");

  const std::vector<std::size_t> slot = detail::bit_reversed_order(size);
  for (std::size_t i = 0; i < size; ++i) {
    Rng rng(derive_seed(seed, 0x70c + i));
    const double frac = size == 1 ? 0.0
                                  : static_cast<double>(slot[i]) / static_cast<double>(size - 1);
    TokenRenderRule r;
    r.token = std::string(kConsonants[i / 4]) + kVowels[i % 4];
    // Log-spaced grid with +-0.4% jitter; grid gaps are ~3.8% at size 64, so
    // jittered centers stay pairwise distinct.
    r.center_hz = f_min * std::pow(f_max / f_min, frac) * (1.0 + rng.uniform(-0.004, 0.004));
    r.chirp = rng.uniform(-0.12, 0.12);
    r.attack_frac = rng.uniform(0.08, 0.2);
    v.index[r.token] = v.rules.size();
    v.rules.push_back(std::move(r));
  }
  return v;
}

// ---------------------------------------------------------------------------
// Speakers

struct SpeakerProfile {
  std::string speaker_id;
  double pitch_base = 0.0;               // Hz, amplitude-modulation rate
  std::vector<double> harmonic_weights;  // weights of carrier harmonics 1..3
  double am_depth = 0.35;

  static SpeakerProfile make(const std::string& speaker_id, std::uint64_t seed) {
    SpeakerProfile p;
    p.speaker_id = speaker_id;
    Rng rng(hash_str(speaker_id, derive_seed(seed, 0x5bea)));
    p.pitch_base = rng.uniform(80.0, 260.0);
    double total = 0.0;
    for (int h = 0; h < 3; ++h) {
      p.harmonic_weights.push_back(rng.uniform(0.2, 1.0));
      total += p.harmonic_weights.back();
    }
    for (double& w : p.harmonic_weights) w /= total;
    return p;
  }
};

// ---------------------------------------------------------------------------
// Rendering

inline audio::AudioSignal render_utterance(const TokenVocabulary& vocab,
                                           const std::vector<std::string>& tokens,
                                           const SpeakerProfile& profile, double duration,
                                           int sample_rate, std::uint64_t seed) {
  if (tokens.empty()) throw DataError("render_utterance: empty token list");
  if (duration < 0.25) throw ConfigError("render_utterance: duration must be >= 0.25 s");
  if (sample_rate <= 0) throw ConfigError("render_utterance: sample_rate must be positive");

  const std::int64_t n = std::llround(duration * sample_rate);
  const std::int64_t slot = n / static_cast<std::int64_t>(tokens.size());
  if (slot < 16) throw ConfigError("render_utterance: too many tokens for the duration");
  const std::int64_t active = std::max<std::int64_t>(16, std::llround(0.92 * slot));

  constexpr double kTau = 6.283185307179586476925286766559;
  std::vector<double> buf(static_cast<std::size_t>(n), 0.0);

  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const TokenRenderRule& rule = vocab.rule(tokens[k]);
    Rng rng(derive_seed(seed, 0x757 + k));
    const double fc = rule.center_hz * (1.0 + rng.uniform(-0.004, 0.004));
    const double phase_pitch = rng.uniform(0.0, kTau);
    double phase_h[3];
    for (int h = 0; h < 3; ++h) phase_h[h] = rng.uniform(0.0, kTau);

    const std::int64_t attack = std::max<std::int64_t>(1, std::llround(rule.attack_frac * active));
    const std::int64_t release = std::max<std::int64_t>(1, std::llround(0.1 * active));
    const double t_active = static_cast<double>(active) / sample_rate;
    const double* w = profile.harmonic_weights.data();
    double* dst = buf.data() + static_cast<std::int64_t>(k) * slot;

    for (std::int64_t j = 0; j < active; ++j) {
      const double u = static_cast<double>(j) / static_cast<double>(active);
      const double t = static_cast<double>(j) / sample_rate;
      // f(u) = fc * (1 + chirp * (u - 1/2)); theta is its integral over time.
      const double theta = kTau * fc * t_active * (u + rule.chirp * (0.5 * u * u - 0.5 * u));
      const double f_inst = fc * (1.0 + rule.chirp * (u - 0.5));

      double s = 0.0;
      for (int h = 1; h <= 3; ++h) {
        if (f_inst * h >= 0.475 * sample_rate) break;  // drop harmonics near Nyquist
        s += w[h - 1] * std::sin(h * theta + phase_h[h - 1]);
      }

      double env = 1.0;
      if (j < attack) {
        env = 0.5 * (1.0 - std::cos(kTau / 2.0 * static_cast<double>(j) / attack));
      } else if (j >= active - release) {
        env = 0.5 * (1.0 - std::cos(kTau / 2.0 * static_cast<double>(active - j) / release));
      }
      const double am =
          (1.0 + profile.am_depth * std::sin(kTau * profile.pitch_base * t + phase_pitch)) /
          (1.0 + profile.am_depth);
      dst[j] += s * env * am;
    }
  }

  double peak = 0.0;
  for (double v : buf) peak = std::max(peak, std::fabs(v));
  const double scale = peak > 0.0 ? 0.7 / peak : 0.0;

  audio::AudioSignal out;
  out.sample_rate = sample_rate;
  out.samples.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    out.samples[i] = static_cast<float>(buf[i] * scale);
  }
  return out;
}

// Pseudo-random noise through a one-pole lowpass (~800 Hz), normalized to
// rms 0.1 before SDR scaling.
inline audio::AudioSignal make_noise(std::int64_t length, int sample_rate, std::uint64_t seed) {
  if (length <= 0) throw ConfigError("make_noise: length must be positive");
  if (sample_rate <= 0) throw ConfigError("make_noise: sample_rate must be positive");
  Rng rng(seed);
  const double a = std::exp(-2.0 * 3.14159265358979323846 * 800.0 / sample_rate);
  std::vector<double> buf(static_cast<std::size_t>(length));
  double y = 0.0;
  for (auto& v : buf) {
    y = a * y + (1.0 - a) * rng.gaussian();
    v = y;
  }
  double acc = 0.0;
  for (double v : buf) acc += v * v;
  const double r = std::sqrt(acc / static_cast<double>(length));
  const double scale = r > 0.0 ? 0.1 / r : 0.0;

  audio::AudioSignal out;
  out.sample_rate = sample_rate;
  out.samples.resize(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    out.samples[i] = static_cast<float>(buf[i] * scale);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mixing

// Scale for an interferer so that 20*log10(rms(target) / (alpha*rms(interferer)))
// equals sdr_db exactly.
inline double alpha_for_sdr(const audio::AudioSignal& target, const audio::AudioSignal& interferer,
                            double sdr_db) {
  const double rt = audio::rms(target);
  const double ri = audio::rms(interferer);
  if (rt <= 0.0 || ri <= 0.0) throw DataError("alpha_for_sdr: zero-energy input");
  return rt / (ri * std::pow(10.0, sdr_db / 20.0));
}

struct MixtureExample {
  audio::AudioSignal target;
  std::vector<audio::AudioSignal> interferers;  // unscaled; alphas apply at mix time
  std::vector<double> alphas;
  std::vector<double> sdrs;  // requested dB per interferer
  std::optional<audio::AudioSignal> noise;
  double noise_alpha = 0.0;
  double noise_sdr = 0.0;
  audio::AudioSignal mixture;
  std::string prompt;
  std::vector<std::string> prompt_tokens;
  std::vector<std::string> speaker_ids;  // target first, then interferers
};

inline MixtureExample make_mixture(audio::AudioSignal target,
                                   std::vector<audio::AudioSignal> interferers,
                                   std::vector<double> sdrs,
                                   std::optional<audio::AudioSignal> noise = std::nullopt,
                                   double noise_sdr = 0.0, std::string prompt = {}) {
  if (sdrs.size() != interferers.size()) {
    throw DataError("make_mixture: sdrs and interferers must have equal length");
  }
  if (interferers.empty() && !noise.has_value()) {
    throw DataError("make_mixture: need at least one interferer or noise");
  }
  const std::int64_t n = target.length();
  const int sr = target.sample_rate;
  auto check = [&](const audio::AudioSignal& s, const char* what) {
    if (s.length() != n || s.sample_rate != sr) {
      throw DataError(std::string("make_mixture: ") + what + " length/rate mismatch");
    }
  };
  for (const auto& v : interferers) check(v, "interferer");
  if (noise) check(*noise, "noise");

  MixtureExample ex;
  ex.sdrs = std::move(sdrs);
  for (std::size_t i = 0; i < interferers.size(); ++i) {
    ex.alphas.push_back(alpha_for_sdr(target, interferers[i], ex.sdrs[i]));
  }
  if (noise) {
    ex.noise_sdr = noise_sdr;
    ex.noise_alpha = alpha_for_sdr(target, *noise, noise_sdr);
  }

  // Mix in double, store float32. Reconstruction from the stored float
  // constituents then differs only by the final rounding, well under 1e-6.
  std::vector<double> acc(static_cast<std::size_t>(n));
  for (std::int64_t k = 0; k < n; ++k) acc[static_cast<std::size_t>(k)] = target.samples[static_cast<std::size_t>(k)];
  for (std::size_t i = 0; i < interferers.size(); ++i) {
    const double a = ex.alphas[i];
    for (std::int64_t k = 0; k < n; ++k) {
      acc[static_cast<std::size_t>(k)] += a * static_cast<double>(interferers[i].samples[static_cast<std::size_t>(k)]);
    }
  }
  if (noise) {
    for (std::int64_t k = 0; k < n; ++k) {
      acc[static_cast<std::size_t>(k)] += ex.noise_alpha * static_cast<double>(noise->samples[static_cast<std::size_t>(k)]);
    }
  }

  ex.mixture.sample_rate = sr;
  ex.mixture.samples.resize(static_cast<std::size_t>(n));
  for (std::int64_t k = 0; k < n; ++k) {
    ex.mixture.samples[static_cast<std::size_t>(k)] = static_cast<float>(acc[static_cast<std::size_t>(k)]);
  }
  ex.target = std::move(target);
  ex.interferers = std::move(interferers);
  ex.noise = std::move(noise);
  ex.prompt = std::move(prompt);
  return ex;
}

// ---------------------------------------------------------------------------
// Corpus generation

struct CorpusConfig {
  std::string out_dir;
  int n_train = 2000;
  int n_valid = 200;
  int n_test = 200;
  int sample_rate = 8000;
  double duration = 1.0;  // seconds
  int interferers = 1;    // 1 -> 2-mix, 2 -> 3-mix
  int speakers_train = 50;
  int speakers_valid = 5;
  int speakers_test = 4;
  int vocab_size = 64;
  int tokens_per_utterance = 8;
  double prompt_fraction = 0.5;
  bool token_overlap = false;  // allow interferers to speak prompt tokens
  double sdr_min = -3.0;
  double sdr_max = 3.0;
  bool noise = false;
  double noise_sdr_min = -3.0;
  double noise_sdr_max = 3.0;
  int workers = 1;
};

inline void validate(const CorpusConfig& c) {
  if (c.out_dir.empty()) throw ConfigError("corpus: out_dir is required");
  if (c.n_train < 0 || c.n_valid < 0 || c.n_test < 0 || c.n_train + c.n_valid + c.n_test == 0) {
    throw ConfigError("corpus: split sizes must be non-negative and not all zero");
  }
  if (c.interferers < 1 || c.interferers > 2) throw ConfigError("corpus: interferers must be 1 or 2");
  if (c.speakers_train < 1 || c.speakers_valid < 1 || c.speakers_test < 1) {
    throw ConfigError("corpus: insufficient speakers for disjoint pools");
  }
  if (c.duration < 0.25) throw ConfigError("corpus: duration must be >= 0.25 s");
  if (c.sample_rate <= 0) throw ConfigError("corpus: sample_rate must be positive");
  if (c.vocab_size < 2 || c.vocab_size > 64) throw ConfigError("corpus: vocab_size must be in [2, 64]");
  if (c.tokens_per_utterance < 2 || c.tokens_per_utterance > c.vocab_size) {
    throw ConfigError("corpus: tokens_per_utterance must be in [2, vocab_size]");
  }
  if (c.prompt_fraction <= 0.0 || c.prompt_fraction > 1.0) {
    throw ConfigError("corpus: prompt_fraction must be in (0, 1]");
  }
  if (c.sdr_min > c.sdr_max || c.noise_sdr_min > c.noise_sdr_max) {
    throw ConfigError("corpus: SDR range must have min <= max");
  }
  if (c.workers < 1) throw ConfigError("corpus: workers must be >= 1");
  if (!c.token_overlap) {
    const int prompt_len = std::max(1, static_cast<int>(std::llround(
        c.prompt_fraction * c.tokens_per_utterance)));
    if (c.vocab_size - prompt_len < c.tokens_per_utterance) {
      throw ConfigError("corpus: vocabulary too small for prompt-disjoint interferers");
    }
  }
}

inline nlohmann::json to_json(const CorpusConfig& c) {
  return {{"out_dir", c.out_dir},
          {"n_train", c.n_train},
          {"n_valid", c.n_valid},
          {"n_test", c.n_test},
          {"sample_rate", c.sample_rate},
          {"duration", c.duration},
          {"interferers", c.interferers},
          {"speakers_train", c.speakers_train},
          {"speakers_valid", c.speakers_valid},
          {"speakers_test", c.speakers_test},
          {"vocab_size", c.vocab_size},
          {"tokens_per_utterance", c.tokens_per_utterance},
          {"prompt_fraction", c.prompt_fraction},
          {"token_overlap", c.token_overlap},
          {"sdr_min", c.sdr_min},
          {"sdr_max", c.sdr_max},
          {"noise", c.noise},
          {"noise_sdr_min", c.noise_sdr_min},
          {"noise_sdr_max", c.noise_sdr_max},
          {"workers", c.workers}};
}

inline CorpusConfig corpus_from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.out_dir = j.value("out_dir", c.out_dir);
  c.n_train = j.value("n_train", c.n_train);
  c.n_valid = j.value("n_valid", c.n_valid);
  c.n_test = j.value("n_test", c.n_test);
  c.sample_rate = j.value("sample_rate", c.sample_rate);
  c.duration = j.value("duration", c.duration);
  c.interferers = j.value("interferers", c.interferers);
  c.speakers_train = j.value("speakers_train", c.speakers_train);
  c.speakers_valid = j.value("speakers_valid", c.speakers_valid);
  c.speakers_test = j.value("speakers_test", c.speakers_test);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.tokens_per_utterance = j.value("tokens_per_utterance", c.tokens_per_utterance);
  c.prompt_fraction = j.value("prompt_fraction", c.prompt_fraction);
  c.token_overlap = j.value("token_overlap", c.token_overlap);
  c.sdr_min = j.value("sdr_min", c.sdr_min);
  c.sdr_max = j.value("sdr_max", c.sdr_max);
  c.noise = j.value("noise", c.noise);
  c.noise_sdr_min = j.value("noise_sdr_min", c.noise_sdr_min);
  c.noise_sdr_max = j.value("noise_sdr_max", c.noise_sdr_max);
  c.workers = j.value("workers", c.workers);
  return c;
}

namespace detail {

struct SplitPlan {
  std::string name;
  int count = 0;
  int speaker_lo = 0;  // global speaker index range [lo, hi)
  int speaker_hi = 0;
};

inline std::string speaker_name(int global_index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "spk%03d", global_index);
  return buf;
}

inline std::string example_id(const std::string& split, int index_in_split) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "-%06d", index_in_split);
  return split + buf;
}

}  // namespace detail

// One generated example, already written to disk; `line` is its manifest row.
struct GeneratedExample {
  std::string line;
};

inline std::string generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
  validate(config);
  namespace fs = std::filesystem;

  const TokenVocabulary vocab =
      TokenVocabulary::make(derive_seed(seed, 1), static_cast<std::size_t>(config.vocab_size),
                            config.sample_rate);

  const std::vector<detail::SplitPlan> splits = {
      {"train", config.n_train, 0, config.speakers_train},
      {"valid", config.n_valid, config.speakers_train, config.speakers_train + config.speakers_valid},
      {"test", config.n_test, config.speakers_train + config.speakers_valid,
       config.speakers_train + config.speakers_valid + config.speakers_test},
  };

  fs::create_directories(config.out_dir);
  for (const auto& sp : splits) {
    if (sp.count > 0) fs::create_directories(fs::path(config.out_dir) / "audio" / sp.name);
  }

  struct Job {
    const detail::SplitPlan* split;
    int index_in_split;
    int global_index;
  };
  std::vector<Job> jobs;
  int g = 0;
  for (const auto& sp : splits) {
    for (int i = 0; i < sp.count; ++i) jobs.push_back({&sp, i, g++});
  }

  std::vector<std::string> lines(jobs.size());
  const std::int64_t n_samples = std::llround(config.duration * config.sample_rate);

  auto run_job = [&](const Job& job) {
    const detail::SplitPlan& sp = *job.split;
    const std::uint64_t ex_seed = derive_seed(seed, 0x1000 + static_cast<std::uint64_t>(job.global_index));
    Rng rng(ex_seed);

    const int pool = sp.speaker_hi - sp.speaker_lo;
    const int target_spk = sp.speaker_lo + static_cast<int>(rng.uniform_int(pool));
    std::vector<int> interferer_spks;
    if (pool > config.interferers) {
      // Distinct speakers throughout. Draw without replacement, skipping the target.
      std::vector<int> others;
      for (int s = sp.speaker_lo; s < sp.speaker_hi; ++s) {
        if (s != target_spk) others.push_back(s);
      }
      rng.shuffle(others);
      interferer_spks.assign(others.begin(), others.begin() + config.interferers);
    } else {
      // Pool too small for distinct speakers (boundary 1/1/1 pools): reuse with
      // replacement rather than failing.
      for (int i = 0; i < config.interferers; ++i) {
        interferer_spks.push_back(sp.speaker_lo + static_cast<int>(rng.uniform_int(pool)));
      }
    }

    // Target token sequence and prompt (shuffled strict subset).
    const auto idx = rng.sample_indices(config.vocab_size, config.tokens_per_utterance);
    std::vector<std::string> target_tokens;
    for (auto i : idx) target_tokens.push_back(vocab.rules[static_cast<std::size_t>(i)].token);
    int prompt_len = std::max(1, static_cast<int>(std::llround(
        config.prompt_fraction * config.tokens_per_utterance)));
    prompt_len = std::min<int>(prompt_len, config.tokens_per_utterance);
    if (config.tokens_per_utterance >= 2) {
      prompt_len = std::min(prompt_len, config.tokens_per_utterance - 1);
    }
    std::vector<std::string> prompt_tokens = target_tokens;
    rng.shuffle(prompt_tokens);
    prompt_tokens.resize(static_cast<std::size_t>(prompt_len));
    std::string prompt;
    for (const auto& t : prompt_tokens) {
      if (!prompt.empty()) prompt += ' ';
      prompt += t;
    }

    // Interferer token sequences, avoiding prompt tokens unless overlap is on.
    std::unordered_set<std::string> banned(prompt_tokens.begin(), prompt_tokens.end());
    std::vector<std::vector<std::string>> interferer_tokens;
    for (int i = 0; i < config.interferers; ++i) {
      std::vector<std::string> allowed;
      for (const auto& r : vocab.rules) {
        if (config.token_overlap || !banned.count(r.token)) allowed.push_back(r.token);
      }
      const auto pick = rng.sample_indices(static_cast<std::int64_t>(allowed.size()),
                                           config.tokens_per_utterance);
      std::vector<std::string> toks;
      for (auto p : pick) toks.push_back(allowed[static_cast<std::size_t>(p)]);
      interferer_tokens.push_back(std::move(toks));
    }

    std::vector<double> sdrs;
    for (int i = 0; i < config.interferers; ++i) {
      sdrs.push_back(rng.uniform(config.sdr_min, config.sdr_max));
    }
    const double noise_sdr =
        config.noise ? rng.uniform(config.noise_sdr_min, config.noise_sdr_max) : 0.0;

    audio::AudioSignal target = render_utterance(
        vocab, target_tokens, SpeakerProfile::make(detail::speaker_name(target_spk), seed),
        config.duration, config.sample_rate, derive_seed(ex_seed, 1));
    std::vector<audio::AudioSignal> interferers;
    for (int i = 0; i < config.interferers; ++i) {
      interferers.push_back(render_utterance(
          vocab, interferer_tokens[static_cast<std::size_t>(i)],
          SpeakerProfile::make(detail::speaker_name(interferer_spks[static_cast<std::size_t>(i)]), seed),
          config.duration, config.sample_rate, derive_seed(ex_seed, 2 + static_cast<std::uint64_t>(i))));
    }
    std::optional<audio::AudioSignal> noise;
    if (config.noise) {
      noise = make_noise(n_samples, config.sample_rate, derive_seed(ex_seed, 0x40));
    }

    MixtureExample ex = make_mixture(std::move(target), std::move(interferers), std::move(sdrs),
                                     std::move(noise), noise_sdr, prompt);
    ex.prompt_tokens = prompt_tokens;
    ex.speaker_ids.push_back(detail::speaker_name(target_spk));
    for (int s : interferer_spks) ex.speaker_ids.push_back(detail::speaker_name(s));

    const std::string id = detail::example_id(sp.name, job.index_in_split);
    const std::string rel_base = "audio/" + sp.name + "/" + id;
    const fs::path base = fs::path(config.out_dir) / rel_base;

    audio::write_wav(ex.mixture, base.string() + ".mix.wav");
    audio::write_wav(ex.target, base.string() + ".s0.wav");
    std::vector<std::string> interferer_paths;
    for (std::size_t i = 0; i < ex.interferers.size(); ++i) {
      const std::string rel = rel_base + ".v" + std::to_string(i + 1) + ".wav";
      audio::write_wav(ex.interferers[i], (fs::path(config.out_dir) / rel).string());
      interferer_paths.push_back(rel);
    }
    std::string noise_path;
    if (ex.noise) {
      noise_path = rel_base + ".noise.wav";
      audio::write_wav(*ex.noise, (fs::path(config.out_dir) / noise_path).string());
    }

    nlohmann::json j;
    j["id"] = id;
    j["split"] = sp.name;
    j["mixture_path"] = rel_base + ".mix.wav";
    j["target_path"] = rel_base + ".s0.wav";
    j["interferer_paths"] = interferer_paths;
    j["alphas"] = ex.alphas;
    j["sdrs"] = ex.sdrs;
    if (ex.noise) {
      j["noise_path"] = noise_path;
      j["noise_alpha"] = ex.noise_alpha;
      j["noise_sdr"] = ex.noise_sdr;
    }
    j["prompt"] = ex.prompt;
    j["prompt_tokens"] = ex.prompt_tokens;
    j["speaker_ids"] = ex.speaker_ids;
    // Not required by consumers, but lets audits check prompt predictiveness
    // (prompt tokens spoken by the target, by no interferer) from disk.
    j["target_tokens"] = target_tokens;
    j["interferer_tokens"] = interferer_tokens;
    lines[static_cast<std::size_t>(job.global_index)] = j.dump();
  };

  if (config.workers <= 1 || jobs.size() <= 1) {
    for (const auto& job : jobs) run_job(job);
  } else {
    // Examples are independent; each derives its own seed from its index, so
    // the output is identical for any worker count.
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        run_job(jobs[i]);
      }
    };
    std::vector<std::thread> threads;
    const int n_threads = std::min<int>(config.workers, static_cast<int>(jobs.size()));
    threads.reserve(static_cast<std::size_t>(n_threads));
    for (int i = 0; i < n_threads; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  const fs::path manifest_path = fs::path(config.out_dir) / "manifest.jsonl";
  std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("corpus: cannot write " + manifest_path.string());
  for (const auto& line : lines) out << line << '\n';
  out.close();
  if (!out) throw FileError("corpus: failed writing " + manifest_path.string());
  return manifest_path.string();
}

// ---------------------------------------------------------------------------
// Manifest loading

struct ManifestEntry {
  std::string id;
  std::string split;
  std::string mixture_path;
  std::string target_path;
  std::vector<std::string> interferer_paths;
  std::vector<double> alphas;
  std::vector<double> sdrs;
  bool has_noise = false;
  std::string noise_path;
  double noise_alpha = 0.0;
  double noise_sdr = 0.0;
  std::string prompt;
  std::vector<std::string> prompt_tokens;
  std::vector<std::string> speaker_ids;
  std::vector<std::string> target_tokens;
  std::vector<std::vector<std::string>> interferer_tokens;
};

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("manifest: cannot open " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest: bad JSON at " + path + ":" + std::to_string(line_no) + ": " +
                        e.what());
    }
    try {
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      e.split = j.at("split").get<std::string>();
      e.mixture_path = j.at("mixture_path").get<std::string>();
      e.target_path = j.at("target_path").get<std::string>();
      e.interferer_paths = j.at("interferer_paths").get<std::vector<std::string>>();
      e.alphas = j.at("alphas").get<std::vector<double>>();
      e.sdrs = j.at("sdrs").get<std::vector<double>>();
      if (j.contains("noise_path")) {
        e.has_noise = true;
        e.noise_path = j.at("noise_path").get<std::string>();
        e.noise_alpha = j.value("noise_alpha", 0.0);
        e.noise_sdr = j.value("noise_sdr", 0.0);
      }
      e.prompt = j.at("prompt").get<std::string>();
      e.prompt_tokens = j.at("prompt_tokens").get<std::vector<std::string>>();
      e.speaker_ids = j.at("speaker_ids").get<std::vector<std::string>>();
      if (j.contains("target_tokens")) {
        e.target_tokens = j.at("target_tokens").get<std::vector<std::string>>();
      }
      if (j.contains("interferer_tokens")) {
        e.interferer_tokens = j.at("interferer_tokens").get<std::vector<std::vector<std::string>>>();
      }
      if (e.alphas.size() != e.interferer_paths.size() || e.sdrs.size() != e.interferer_paths.size()) {
        throw FormatError("manifest: alphas/sdrs/interferer_paths lengths differ at line " +
                          std::to_string(line_no));
      }
      entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest: missing or mistyped field at " + path + ":" +
                        std::to_string(line_no) + ": " + e.what());
    }
  }
  if (entries.empty()) throw FormatError("manifest: no entries in " + path);
  return entries;
}

// Manifest paths are relative to the manifest's directory.
inline std::string resolve_path(const std::string& manifest_path, const std::string& rel) {
  namespace fs = std::filesystem;
  fs::path p(rel);
  if (p.is_absolute()) return rel;
  return (fs::path(manifest_path).parent_path() / p).string();
}

inline std::vector<ManifestEntry> load_split(const std::string& manifest_path,
                                             const std::string& split) {
  auto all = load_manifest(manifest_path);
  std::vector<ManifestEntry> out;
  for (auto& e : all) {
    if (e.split == split) out.push_back(std::move(e));
  }
  if (out.empty()) throw DataError("manifest: no entries for split '" + split + "'");
  return out;
}

// ---------------------------------------------------------------------------
// Decoded example: audio pulled off disk with mixing gains applied, ready for
// training or scoring. Interferers and noise carry the gain they had inside
// the mixture; the target entered the mix at unit gain.

struct LoadedExample {
  std::string id;
  std::string prompt;
  std::vector<std::string> prompt_tokens;
  int sample_rate = 0;
  std::vector<float> mixture;
  std::vector<float> target;
  std::vector<std::vector<float>> interferers;  // scaled by their alphas
  std::vector<double> interferer_sdrs;          // requested SDRs, for binning
  std::vector<float> noise;                     // scaled; empty when absent
};

inline LoadedExample load_example(const std::string& manifest_path, const ManifestEntry& e) {
  LoadedExample out;
  out.id = e.id;
  out.prompt = e.prompt;
  out.prompt_tokens = e.prompt_tokens;
  out.interferer_sdrs = e.sdrs;

  auto mix = audio::read_wav(resolve_path(manifest_path, e.mixture_path));
  auto tgt = audio::read_wav(resolve_path(manifest_path, e.target_path));
  out.sample_rate = mix.sample_rate;
  out.mixture = std::move(mix.samples);
  out.target = std::move(tgt.samples);
  if (out.target.size() != out.mixture.size()) {
    throw DataError("load_example: target/mixture length mismatch in '" + e.id + "'");
  }
  for (std::size_t i = 0; i < e.interferer_paths.size(); ++i) {
    auto sig = audio::read_wav(resolve_path(manifest_path, e.interferer_paths[i]));
    const float a = static_cast<float>(e.alphas[i]);
    for (auto& v : sig.samples) v *= a;
    if (sig.samples.size() != out.mixture.size()) {
      throw DataError("load_example: interferer length mismatch in '" + e.id + "'");
    }
    out.interferers.push_back(std::move(sig.samples));
  }
  if (e.has_noise) {
    auto sig = audio::read_wav(resolve_path(manifest_path, e.noise_path));
    const float a = static_cast<float>(e.noise_alpha);
    for (auto& v : sig.samples) v *= a;
    out.noise = std::move(sig.samples);
  }
  return out;
}

// Loads every example of a split. `limit` of 0 means all.
inline std::vector<LoadedExample> load_examples(const std::string& manifest_path,
                                                const std::string& split, std::size_t limit = 0) {
  auto entries = load_split(manifest_path, split);
  if (limit > 0 && entries.size() > limit) entries.resize(limit);
  std::vector<LoadedExample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(load_example(manifest_path, e));
  return out;
}

}  // namespace textsep::corpus
