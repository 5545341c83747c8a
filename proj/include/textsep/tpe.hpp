#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "textsep/audio.hpp"
#include "textsep/checkpoint.hpp"
#include "textsep/dprnn_block.hpp"
#include "textsep/errors.hpp"
#include "textsep/ops.hpp"
#include "textsep/ops_nn.hpp"
#include "textsep/rng.hpp"
#include "textsep/tensor.hpp"

namespace textsep::model {

// Text-prompted extractor: waveform encoder, N levels of text-conditioned
// FiLM fusion halving the channel count each level, a dual-path mask
// estimator, and a masked overlap-add decoder.

struct TpeConfig {
  std::int64_t latent_channels = 256;     // encoder output channels
  std::int64_t bottleneck_channels = 64;  // channels after fusion
  std::int64_t hidden_channels = 128;     // LSTM hidden size per direction
  std::int64_t kernel = 40;               // encoder/fusion kernel, hop kernel/2
  int repeats = 6;                        // dual-path repeats
  std::int64_t chunk = 80;                // intra-chunk length
  int fusion_levels = 2;                  // channel halvings
  std::int64_t text_dim = 512;            // provider embedding dim
};

inline void validate(const TpeConfig& c) {
  if (c.latent_channels < 2 || c.bottleneck_channels < 1 || c.hidden_channels < 1 ||
      c.text_dim < 1 || c.repeats < 1 || c.fusion_levels < 1) {
    throw ConfigError("tpe: all dimensions must be positive");
  }
  if (c.kernel < 2 || c.kernel % 2 != 0) throw ConfigError("tpe: kernel must be even and >= 2");
  if (c.chunk < 2 || c.chunk % 2 != 0) throw ConfigError("tpe: chunk must be even and >= 2");
  std::int64_t expect = c.latent_channels;
  for (int n = 0; n < c.fusion_levels; ++n) {
    if (expect % 2 != 0) throw ConfigError("tpe: latent_channels must halve cleanly per level");
    expect /= 2;
  }
  if (expect != c.bottleneck_channels) {
    throw ConfigError("tpe: bottleneck_channels must equal latent_channels / 2^fusion_levels");
  }
}

inline nlohmann::json to_json(const TpeConfig& c) {
  return {{"latent_channels", c.latent_channels},
          {"bottleneck_channels", c.bottleneck_channels},
          {"hidden_channels", c.hidden_channels},
          {"kernel", c.kernel},
          {"repeats", c.repeats},
          {"chunk", c.chunk},
          {"fusion_levels", c.fusion_levels},
          {"text_dim", c.text_dim}};
}

inline TpeConfig tpe_from_json(const nlohmann::json& j) {
  TpeConfig c;
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.bottleneck_channels = j.value("bottleneck_channels", c.bottleneck_channels);
  c.hidden_channels = j.value("hidden_channels", c.hidden_channels);
  c.kernel = j.value("kernel", c.kernel);
  c.repeats = j.value("repeats", c.repeats);
  c.chunk = j.value("chunk", c.chunk);
  c.fusion_levels = j.value("fusion_levels", c.fusion_levels);
  c.text_dim = j.value("text_dim", c.text_dim);
  return c;
}

// Intra-chunk length guidance: roughly sqrt(2 T) frames, rounded up to even.
inline std::int64_t suggested_chunk(std::int64_t t_frames) {
  if (t_frames < 1) throw ConfigError("suggested_chunk: need at least one frame");
  auto k = static_cast<std::int64_t>(std::llround(std::sqrt(2.0 * static_cast<double>(t_frames))));
  if (k < 2) k = 2;
  if (k % 2 != 0) ++k;
  return k;
}

template <typename T>
class Tpe {
 public:
  Tpe(TpeConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    Rng rng(derive_seed(seed, hash_str("tpe")));

    auto ew = diff::Tensor<T>::zeros({cfg_.latent_channels, 1, cfg_.kernel});
    diff::init_fan_in(ew, rng, cfg_.kernel);
    enc_w_ = params_.add("enc.weight", ew);
    enc_b_ = params_.add("enc.bias", diff::Tensor<T>::zeros({cfg_.latent_channels}));

    std::int64_t text_in = cfg_.text_dim;
    std::int64_t ch = cfg_.latent_channels;
    for (int n = 0; n < cfg_.fusion_levels; ++n) {
      Fusion f;
      const std::string p = "fuse.l" + std::to_string(n);
      auto tp = diff::Tensor<T>::zeros({ch, text_in});
      diff::init_fan_in(tp, rng, text_in);
      f.text_w = params_.add(p + ".text.weight", tp);
      f.text_b = params_.add(p + ".text.bias", diff::Tensor<T>::zeros({ch}));
      // FiLM generators start at identity (gamma == 1, beta == 0) so an
      // untrained fuse ignores the prompt.
      f.gamma_w = params_.add(p + ".gamma.weight", diff::Tensor<T>::zeros({ch, ch}));
      f.gamma_b = params_.add(p + ".gamma.bias", diff::Tensor<T>::full({ch}, 1.0));
      f.beta_w = params_.add(p + ".beta.weight", diff::Tensor<T>::zeros({ch, ch}));
      f.beta_b = params_.add(p + ".beta.bias", diff::Tensor<T>::zeros({ch}));
      auto cw = diff::Tensor<T>::zeros({ch / 2, ch, cfg_.kernel});
      diff::init_fan_in(cw, rng, ch * cfg_.kernel);
      f.conv_w = params_.add(p + ".conv.weight", cw);
      f.conv_b = params_.add(p + ".conv.bias", diff::Tensor<T>::zeros({ch / 2}));
      f.ln_g = params_.add(p + ".ln.gamma", diff::Tensor<T>::full({ch / 2}, 1.0));
      f.ln_b = params_.add(p + ".ln.beta", diff::Tensor<T>::zeros({ch / 2}));
      fusion_.push_back(f);
      text_in = ch;
      ch /= 2;
    }

    stack_.init(params_, "dprnn", cfg_.bottleneck_channels, cfg_.hidden_channels, cfg_.repeats,
                cfg_.chunk, rng);
    head_.init(params_, "mask", cfg_.bottleneck_channels, cfg_.latent_channels, rng);

    auto dw = diff::Tensor<T>::zeros({cfg_.kernel, cfg_.latent_channels, 1});
    diff::init_fan_in(dw, rng, cfg_.latent_channels);
    dec_w_ = params_.add("dec.weight", dw);
    dec_b_ = params_.add("dec.bias", diff::Tensor<T>::zeros({cfg_.kernel}));
  }

  const TpeConfig& config() const { return cfg_; }
  diff::ParameterStore<T>& params() { return params_; }
  const diff::ParameterStore<T>& params() const { return params_; }

  std::int64_t frames_for(std::int64_t t_seq) const {
    return audio::frame_count(t_seq, audio::FrameSpec{cfg_.kernel, cfg_.kernel / 2});
  }

  // wave [N, T_seq] -> latent [N, D, T]; the tail is zero-padded onto the
  // frame grid so T == frame_count(T_seq, kernel).
  Tensor<T> encode(const Tensor<T>& wave) const {
    using namespace diff;
    if (wave.ndim() != 2) throw ShapeError("tpe encode: expects [N, T]");
    const std::int64_t n = wave.dim(0), t_seq = wave.dim(1);
    const std::int64_t hop = cfg_.kernel / 2;
    const std::int64_t frames = frames_for(t_seq);
    const std::int64_t padded = (frames - 1) * hop + cfg_.kernel;
    auto x = reshape(wave, {n, 1, t_seq});
    return relu(conv1d(x, enc_w_, enc_b_, hop, 0, padded - t_seq));
  }

  // latent [N, D, T] + pooled text [N, text_dim] -> bottleneck [N, B, T].
  Tensor<T> fuse(const Tensor<T>& latent, const Tensor<T>& text) const {
    using namespace diff;
    if (text.ndim() != 2 || text.dim(1) != cfg_.text_dim) {
      throw ShapeError("tpe fuse: text must be [N, " + std::to_string(cfg_.text_dim) + "]");
    }
    auto x = latent;
    auto t = text;
    for (const auto& f : fusion_) {
      t = linear(t, f.text_w, f.text_b);
      auto gamma = linear(t, f.gamma_w, f.gamma_b);
      auto beta = linear(t, f.beta_w, f.beta_b);
      auto y = conv1d_same(film(x, gamma, beta), f.conv_w, f.conv_b);
      x = layer_norm_channels(y, f.ln_g, f.ln_b);
    }
    return x;
  }

  // bottleneck [N, B, T] -> mask [N, D, T], non-negative.
  Tensor<T> mask_estimate(const Tensor<T>& bottleneck) const {
    return head_.apply(stack_.apply(bottleneck));
  }

  // latent and mask [N, D, T] -> waveform [N, t_seq].
  Tensor<T> decode(const Tensor<T>& latent, const Tensor<T>& mask, std::int64_t t_seq) const {
    using namespace diff;
    if (latent.shape() != mask.shape()) {
      throw ShapeError("tpe decode: latent/mask shape mismatch");
    }
    auto masked = mul(mask, latent);
    auto frames = conv1d(masked, dec_w_, dec_b_, 1, 0, 0);   // [N, kernel, T]
    auto wave = overlap_add_frames(permute(frames, {0, 2, 1}), cfg_.kernel / 2);
    if (wave.dim(1) < t_seq) throw ShapeError("tpe decode: trim longer than output");
    return slice(wave, 1, 0, t_seq);
  }

  Tensor<T> forward(const Tensor<T>& wave, const Tensor<T>& text) const {
    auto latent = encode(wave);
    auto bottleneck = fuse(latent, text);
    auto mask = mask_estimate(bottleneck);
    return decode(latent, mask, wave.dim(1));
  }

  // Inference path: one mixture plus one pooled prompt embedding.
  audio::AudioSignal extract(const audio::AudioSignal& mixture,
                             const std::vector<float>& text_pooled) const {
    if (static_cast<std::int64_t>(text_pooled.size()) != cfg_.text_dim) {
      throw ShapeError("tpe extract: prompt embedding dim mismatch");
    }
    if (mixture.length() < 1) throw DataError("tpe extract: empty mixture");
    diff::NoGradGuard guard;
    auto wave = diff::Tensor<T>::zeros({1, mixture.length()});
    for (std::int64_t i = 0; i < mixture.length(); ++i) {
      wave.values()[static_cast<std::size_t>(i)] = static_cast<T>(mixture.samples[static_cast<std::size_t>(i)]);
    }
    auto text = diff::Tensor<T>::zeros({1, cfg_.text_dim});
    for (std::size_t i = 0; i < text_pooled.size(); ++i) {
      text.values()[i] = static_cast<T>(text_pooled[i]);
    }
    auto est = forward(wave, text);
    audio::AudioSignal out;
    out.sample_rate = mixture.sample_rate;
    out.samples.resize(static_cast<std::size_t>(est.dim(1)));
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
      out.samples[i] = static_cast<float>(est.values()[i]);
    }
    return out;
  }

 private:
  struct Fusion {
    Tensor<T> text_w, text_b;
    Tensor<T> gamma_w, gamma_b;
    Tensor<T> beta_w, beta_b;
    Tensor<T> conv_w, conv_b;
    Tensor<T> ln_g, ln_b;
  };

  TpeConfig cfg_;
  diff::ParameterStore<T> params_;
  Tensor<T> enc_w_, enc_b_;
  std::vector<Fusion> fusion_;
  DprnnStack<T> stack_;
  MaskHead<T> head_;
  Tensor<T> dec_w_, dec_b_;
};

}  // namespace textsep::model
