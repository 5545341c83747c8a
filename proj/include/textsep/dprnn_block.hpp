#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "textsep/checkpoint.hpp"
#include "textsep/ops.hpp"
#include "textsep/ops_nn.hpp"
#include "textsep/rng.hpp"
#include "textsep/tensor.hpp"

namespace textsep::model {

using diff::ParameterStore;
using diff::Tensor;

// Dual-path core shared by the extractor and the blind separator: the latent
// [N, B, T] is chunked with 50% overlap into [N, B, P, K], then R repeats of
// {BLSTM along the intra-chunk axis, BLSTM along the inter-chunk axis}, each
// followed by a linear projection back to B, a residual add, and layer norm.

template <typename T>
struct DprnnStack {
  struct Block {
    Tensor<T> wih_f, whh_f, b_f;  // forward LSTM
    Tensor<T> wih_b, whh_b, b_b;  // backward LSTM
    Tensor<T> proj_w, proj_b;     // 2H -> B
    Tensor<T> ln_g, ln_b;
  };

  std::int64_t bottleneck = 0;
  std::int64_t hidden = 0;
  std::int64_t chunk = 0;
  std::vector<Block> intra;
  std::vector<Block> inter;

  void init(ParameterStore<T>& store, const std::string& prefix, std::int64_t bottleneck_ch,
            std::int64_t hidden_ch, int repeats, std::int64_t chunk_len, Rng& rng) {
    bottleneck = bottleneck_ch;
    hidden = hidden_ch;
    chunk = chunk_len;
    auto make_block = [&](const std::string& name) {
      Block blk;
      auto lstm_weights = [&](const std::string& dir, Tensor<T>& wih, Tensor<T>& whh,
                              Tensor<T>& bias) {
        wih = diff::Tensor<T>::zeros({4 * hidden, bottleneck});
        whh = diff::Tensor<T>::zeros({4 * hidden, hidden});
        bias = diff::Tensor<T>::zeros({4 * hidden});
        diff::init_fan_in(wih, rng, bottleneck);
        diff::init_fan_in(whh, rng, hidden);
        wih = store.add(name + "." + dir + ".wih", wih);
        whh = store.add(name + "." + dir + ".whh", whh);
        bias = store.add(name + "." + dir + ".bias", bias);
      };
      lstm_weights("fwd", blk.wih_f, blk.whh_f, blk.b_f);
      lstm_weights("bwd", blk.wih_b, blk.whh_b, blk.b_b);
      auto pw = diff::Tensor<T>::zeros({bottleneck, 2 * hidden});
      diff::init_fan_in(pw, rng, 2 * hidden);
      blk.proj_w = store.add(name + ".proj.weight", pw);
      blk.proj_b = store.add(name + ".proj.bias", diff::Tensor<T>::zeros({bottleneck}));
      blk.ln_g = store.add(name + ".ln.gamma", diff::Tensor<T>::full({bottleneck}, 1.0));
      blk.ln_b = store.add(name + ".ln.beta", diff::Tensor<T>::zeros({bottleneck}));
      return blk;
    };
    intra.clear();
    inter.clear();
    for (int r = 0; r < repeats; ++r) {
      intra.push_back(make_block(prefix + ".r" + std::to_string(r) + ".intra"));
      inter.push_back(make_block(prefix + ".r" + std::to_string(r) + ".inter"));
    }
  }

  // One recurrent pass along axis 0 of x [S, N, P, B], plus projection,
  // residual, and layer norm over the channel axis.
  Tensor<T> pass(const Tensor<T>& x, const Block& blk) const {
    using namespace diff;
    const std::int64_t s = x.dim(0), n = x.dim(1), p = x.dim(2), c = x.dim(3);
    auto seq = reshape(x, {s, n * p, c});
    auto h = blstm(seq, blk.wih_f, blk.whh_f, blk.b_f, blk.wih_b, blk.whh_b, blk.b_b);
    auto flat = reshape(h, {s * n * p, 2 * hidden});
    auto proj = reshape(linear(flat, blk.proj_w, blk.proj_b), {s, n, p, c});
    return layer_norm(add(x, proj), blk.ln_g, blk.ln_b);
  }

  // latent [N, B, T] -> [N, B, T].
  Tensor<T> apply(const Tensor<T>& latent) const {
    using namespace diff;
    const std::int64_t t = latent.dim(2);
    auto w = segment_chunks(latent, chunk);     // [N, B, P, K]
    auto x = permute(w, {3, 0, 2, 1});          // [K, N, P, B]
    for (std::size_t r = 0; r < intra.size(); ++r) {
      x = pass(x, intra[r]);                    // along K
      x = permute(x, {2, 1, 0, 3});             // [P, N, K, B]
      x = pass(x, inter[r]);                    // along P
      x = permute(x, {2, 1, 0, 3});             // back to [K, N, P, B]
    }
    auto chunks = permute(x, {1, 3, 2, 0});     // [N, B, P, K]
    return aggregate_chunks(chunks, t);
  }
};

// Gated mask head: tanh and sigmoid 1x1 conv branches multiplied, a 1x1 conv
// to the output channel count, and a relu that keeps masks non-negative.
template <typename T>
struct MaskHead {
  Tensor<T> tanh_w, tanh_b;
  Tensor<T> sig_w, sig_b;
  Tensor<T> out_w, out_b;

  void init(ParameterStore<T>& store, const std::string& prefix, std::int64_t in_ch,
            std::int64_t out_ch, Rng& rng) {
    auto tw = diff::Tensor<T>::zeros({in_ch, in_ch, 1});
    auto sw = diff::Tensor<T>::zeros({in_ch, in_ch, 1});
    auto ow = diff::Tensor<T>::zeros({out_ch, in_ch, 1});
    diff::init_fan_in(tw, rng, in_ch);
    diff::init_fan_in(sw, rng, in_ch);
    diff::init_fan_in(ow, rng, in_ch);
    tanh_w = store.add(prefix + ".tanh.weight", tw);
    tanh_b = store.add(prefix + ".tanh.bias", diff::Tensor<T>::zeros({in_ch}));
    sig_w = store.add(prefix + ".sig.weight", sw);
    sig_b = store.add(prefix + ".sig.bias", diff::Tensor<T>::zeros({in_ch}));
    out_w = store.add(prefix + ".out.weight", ow);
    out_b = store.add(prefix + ".out.bias", diff::Tensor<T>::zeros({out_ch}));
  }

  // x [N, B, T] -> mask [N, out_ch, T], non-negative.
  Tensor<T> apply(const Tensor<T>& x) const {
    using namespace diff;
    auto gate = mul(tanh_op(conv1d(x, tanh_w, tanh_b, 1, 0, 0)),
                    sigmoid(conv1d(x, sig_w, sig_b, 1, 0, 0)));
    return relu(conv1d(gate, out_w, out_b, 1, 0, 0));
  }
};

}  // namespace textsep::model
