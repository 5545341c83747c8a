#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "textsep/audio.hpp"
#include "textsep/dprnn_block.hpp"
#include "textsep/errors.hpp"
#include "textsep/losses.hpp"
#include "textsep/ops.hpp"
#include "textsep/ops_nn.hpp"
#include "textsep/rng.hpp"
#include "textsep/tensor.hpp"

namespace textsep::model {

// Blind separator: same encoder/dual-path trunk as the extractor but without
// a text path; a 1x1 bottleneck conv replaces the fusion stack and the mask
// head emits one mask per output stream.

struct SepConfig {
  int streams = 2;
  std::int64_t latent_channels = 256;
  std::int64_t bottleneck_channels = 64;
  std::int64_t hidden_channels = 128;
  std::int64_t kernel = 40;
  int repeats = 6;
  std::int64_t chunk = 80;
};

inline void validate(const SepConfig& c) {
  if (c.streams < 2 || c.streams > 4) throw ConfigError("separator: streams must be in [2, 4]");
  if (c.latent_channels < 1 || c.bottleneck_channels < 1 || c.hidden_channels < 1 ||
      c.repeats < 1) {
    throw ConfigError("separator: all dimensions must be positive");
  }
  if (c.kernel < 2 || c.kernel % 2 != 0) throw ConfigError("separator: kernel must be even");
  if (c.chunk < 2 || c.chunk % 2 != 0) throw ConfigError("separator: chunk must be even");
}

inline nlohmann::json to_json(const SepConfig& c) {
  return {{"streams", c.streams},
          {"latent_channels", c.latent_channels},
          {"bottleneck_channels", c.bottleneck_channels},
          {"hidden_channels", c.hidden_channels},
          {"kernel", c.kernel},
          {"repeats", c.repeats},
          {"chunk", c.chunk}};
}

inline SepConfig sep_from_json(const nlohmann::json& j) {
  SepConfig c;
  c.streams = j.value("streams", c.streams);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.bottleneck_channels = j.value("bottleneck_channels", c.bottleneck_channels);
  c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
  c.kernel = j.value("kernel", c.kernel);
  c.repeats = j.value("repeats", c.repeats);
  c.chunk = j.value("chunk", c.chunk);
  return c;
}

template <typename T>
class Separator {
 public:
  Separator(SepConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    Rng rng(derive_seed(seed, hash_str("separator")));

    auto ew = diff::Tensor<T>::zeros({cfg_.latent_channels, 1, cfg_.kernel});
    diff::init_fan_in(ew, rng, cfg_.kernel);
    enc_w_ = params_.add("enc.weight", ew);
    enc_b_ = params_.add("enc.bias", diff::Tensor<T>::zeros({cfg_.latent_channels}));

    auto bw = diff::Tensor<T>::zeros({cfg_.bottleneck_channels, cfg_.latent_channels, 1});
    diff::init_fan_in(bw, rng, cfg_.latent_channels);
    bott_w_ = params_.add("bottleneck.weight", bw);
    bott_b_ = params_.add("bottleneck.bias", diff::Tensor<T>::zeros({cfg_.bottleneck_channels}));

    stack_.init(params_, "dprnn", cfg_.bottleneck_channels, cfg_.hidden_channels, cfg_.repeats,
                cfg_.chunk, rng);
    head_.init(params_, "mask", cfg_.bottleneck_channels,
               static_cast<std::int64_t>(cfg_.streams) * cfg_.latent_channels, rng);

    auto dw = diff::Tensor<T>::zeros({cfg_.kernel, cfg_.latent_channels, 1});
    diff::init_fan_in(dw, rng, cfg_.latent_channels);
    dec_w_ = params_.add("dec.weight", dw);
    dec_b_ = params_.add("dec.bias", diff::Tensor<T>::zeros({cfg_.kernel}));
  }

  const SepConfig& config() const { return cfg_; }
  diff::ParameterStore<T>& params() { return params_; }
  const diff::ParameterStore<T>& params() const { return params_; }

  std::int64_t frames_for(std::int64_t t_seq) const {
    return audio::frame_count(t_seq, audio::FrameSpec{cfg_.kernel, cfg_.kernel / 2});
  }

  Tensor<T> encode(const Tensor<T>& wave) const {
    using namespace diff;
    if (wave.ndim() != 2) throw ShapeError("separator encode: expects [N, T]");
    const std::int64_t n = wave.dim(0), t_seq = wave.dim(1);
    const std::int64_t hop = cfg_.kernel / 2;
    const std::int64_t frames = frames_for(t_seq);
    const std::int64_t padded = (frames - 1) * hop + cfg_.kernel;
    auto x = reshape(wave, {n, 1, t_seq});
    return relu(conv1d(x, enc_w_, enc_b_, hop, 0, padded - t_seq));
  }

  // latent [N, D, T] -> masks [N, I, D, T], non-negative.
  Tensor<T> mask_estimate(const Tensor<T>& latent) const {
    using namespace diff;
    auto bott = conv1d(latent, bott_w_, bott_b_, 1, 0, 0);
    auto masks = head_.apply(stack_.apply(bott));  // [N, I*D, T]
    return reshape(masks, {latent.dim(0), static_cast<std::int64_t>(cfg_.streams),
                           cfg_.latent_channels, latent.dim(2)});
  }

  // wave [N, T_seq] -> estimates [N, I, T_seq], shared decoder per stream.
  Tensor<T> forward(const Tensor<T>& wave) const {
    using namespace diff;
    const std::int64_t t_seq = wave.dim(1);
    auto latent = encode(wave);
    auto masks = mask_estimate(latent);
    std::vector<Tensor<T>> streams;
    for (int i = 0; i < cfg_.streams; ++i) {
      auto m = reshape(slice(masks, 1, i, 1),
                       {latent.dim(0), cfg_.latent_channels, latent.dim(2)});
      auto frames = conv1d(mul(m, latent), dec_w_, dec_b_, 1, 0, 0);
      auto wave_i = overlap_add_frames(permute(frames, {0, 2, 1}), cfg_.kernel / 2);
      auto trimmed = slice(wave_i, 1, 0, t_seq);             // [N, T_seq]
      streams.push_back(reshape(trimmed, {latent.dim(0), 1, t_seq}));
    }
    auto out = streams[0];
    for (std::size_t i = 1; i < streams.size(); ++i) out = concat(out, streams[i], 1);
    return out;
  }

  // Inference: one mixture in, I waveforms out.
  std::vector<audio::AudioSignal> separate(const audio::AudioSignal& mixture) const {
    if (mixture.length() < 1) throw DataError("separate: empty mixture");
    diff::NoGradGuard guard;
    auto wave = diff::Tensor<T>::zeros({1, mixture.length()});
    for (std::int64_t i = 0; i < mixture.length(); ++i) {
      wave.values()[static_cast<std::size_t>(i)] = static_cast<T>(mixture.samples[static_cast<std::size_t>(i)]);
    }
    auto est = forward(wave);
    std::vector<audio::AudioSignal> out(static_cast<std::size_t>(cfg_.streams));
    const std::int64_t t_seq = est.dim(2);
    for (int i = 0; i < cfg_.streams; ++i) {
      auto& sig = out[static_cast<std::size_t>(i)];
      sig.sample_rate = mixture.sample_rate;
      sig.samples.resize(static_cast<std::size_t>(t_seq));
      const T* src = est.data() + static_cast<std::int64_t>(i) * t_seq;
      for (std::int64_t k = 0; k < t_seq; ++k) {
        sig.samples[static_cast<std::size_t>(k)] = static_cast<float>(src[k]);
      }
    }
    return out;
  }

 private:
  SepConfig cfg_;
  diff::ParameterStore<T> params_;
  Tensor<T> enc_w_, enc_b_;
  Tensor<T> bott_w_, bott_b_;
  DprnnStack<T> stack_;
  MaskHead<T> head_;
  Tensor<T> dec_w_, dec_b_;
};

// ---------------------------------------------------------------------------
// Permutation-invariant loss

template <typename T>
struct PitResult {
  Tensor<T> loss;                       // scalar, gradient flows through the
                                        // winning assignment only
  std::vector<std::vector<int>> perms;  // per item: reference index per stream
};

// estimates, references [N, I, T]. For each item the loss is the best (lowest)
// mean of -si_sdr over all stream-to-reference assignments; exhaustive search,
// I <= 4.
template <typename T>
PitResult<T> pit_loss(const Tensor<T>& estimates, const Tensor<T>& references) {
  using namespace diff;
  if (estimates.ndim() != 3 || references.ndim() != 3 || estimates.shape() != references.shape()) {
    throw ShapeError("pit_loss: need matching [N, I, T] tensors");
  }
  const std::int64_t n = estimates.dim(0);
  const int count = static_cast<int>(estimates.dim(1));
  if (count < 2 || count > 4) throw ConfigError("pit_loss: streams must be in [2, 4]");

  PitResult<T> result;
  std::vector<Tensor<T>> item_losses;
  for (std::int64_t b = 0; b < n; ++b) {
    std::vector<std::vector<Tensor<T>>> pair(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      auto est_i = slice(slice(estimates, 0, b, 1), 1, i, 1);
      for (int j = 0; j < count; ++j) {
        auto ref_j = slice(slice(references, 0, b, 1), 1, j, 1);
        pair[static_cast<std::size_t>(i)].push_back(neg(losses::si_sdr_db(est_i, ref_j)));
      }
    }

    std::vector<int> perm(static_cast<std::size_t>(count));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> best_perm;
    do {
      double total = 0.0;
      for (int i = 0; i < count; ++i) {
        total += static_cast<double>(
            pair[static_cast<std::size_t>(i)][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])].item());
      }
      if (total < best) {
        best = total;
        best_perm = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));

    std::vector<Tensor<T>> chosen;
    for (int i = 0; i < count; ++i) {
      chosen.push_back(pair[static_cast<std::size_t>(i)][static_cast<std::size_t>(best_perm[static_cast<std::size_t>(i)])]);
    }
    item_losses.push_back(mean(stack_scalars(chosen)));
    result.perms.push_back(best_perm);
  }
  result.loss = mean(stack_scalars(item_losses));
  return result;
}

// Baseline stream picker: uniformly random choice, reproducible via the rng.
inline int random_association(int streams, Rng& rng) {
  if (streams < 1) throw ConfigError("random_association: need at least one stream");
  return static_cast<int>(rng.uniform_int(streams));
}

}  // namespace textsep::model
