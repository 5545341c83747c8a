#pragma once

// Network-level differentiable kernels. Layout conventions:
//   batched time series  [N, C, T]   (channels-major within an example)
//   sequences for RNNs   [S, N, C]   (step-major so each step is one gemm)
//   chunked series       [N, C, P, K]

#include <cmath>
#include <cstring>
#include <vector>

#include "textsep/ops.hpp"

namespace textsep::diff {

namespace detail {

// cols is (Cin*K) x Tout, column t holds the receptive field at output t.
template <typename T>
void im2col(const T* x, std::int64_t cin, std::int64_t tin, std::int64_t k,
            std::int64_t stride, std::int64_t pad_l, std::int64_t tout, T* cols) {
  for (std::int64_t c = 0; c < cin; ++c) {
    const T* xc = x + c * tin;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      T* row = cols + (c * k + kk) * tout;
      if (stride == 1) {
        const std::int64_t off = kk - pad_l;
        const std::int64_t t0 = std::max<std::int64_t>(0, -off);
        const std::int64_t t1 = std::min<std::int64_t>(tout, tin - off);
        if (t0 > 0) std::memset(row, 0, t0 * sizeof(T));
        if (t1 > t0) std::memcpy(row + t0, xc + t0 + off, (t1 - t0) * sizeof(T));
        if (t1 < tout) std::memset(row + std::max(t1, t0), 0, (tout - std::max(t1, t0)) * sizeof(T));
      } else {
        for (std::int64_t t = 0; t < tout; ++t) {
          const std::int64_t src = t * stride + kk - pad_l;
          row[t] = (src >= 0 && src < tin) ? xc[src] : T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* cols, std::int64_t cin, std::int64_t tin, std::int64_t k,
                std::int64_t stride, std::int64_t pad_l, std::int64_t tout, T* dx) {
  for (std::int64_t c = 0; c < cin; ++c) {
    T* xc = dx + c * tin;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const T* row = cols + (c * k + kk) * tout;
      for (std::int64_t t = 0; t < tout; ++t) {
        const std::int64_t dst = t * stride + kk - pad_l;
        if (dst >= 0 && dst < tin) xc[dst] += row[t];
      }
    }
  }
}

}  // namespace detail

// 1-D convolution, x [N, Cin, Tin], w [Cout, Cin, K], optional bias [Cout].
// Tout = (Tin + pad_l + pad_r - K) / stride + 1. Runs as im2col + gemm; the
// backward pass rebuilds the column matrix rather than caching it.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::int64_t stride, std::int64_t pad_l, std::int64_t pad_r) {
  if (x.ndim() != 3 || w.ndim() != 3) throw ShapeError("conv1d: expects x [N,C,T], w [O,C,K]");
  const std::int64_t n = x.dim(0), cin = x.dim(1), tin = x.dim(2);
  const std::int64_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) {
    throw ShapeError("conv1d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  }
  if (stride < 1 || pad_l < 0 || pad_r < 0) throw ShapeError("conv1d: bad stride/padding");
  const std::int64_t tout = (tin + pad_l + pad_r - k) / stride + 1;
  if (tin + pad_l + pad_r < k || tout < 1) throw ShapeError("conv1d: input shorter than kernel");
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != cout)) {
    throw ShapeError("conv1d: bias shape " + shape_str(b.shape()));
  }

  auto out = detail::make_out<T>("conv1d", {n, cout, tout});
  std::vector<T> cols(static_cast<std::size_t>(cin * k * tout));
  ECMap<T> W2(w.data(), cout, cin * k);
  for (std::int64_t i = 0; i < n; ++i) {
    detail::im2col(x.data() + i * cin * tin, cin, tin, k, stride, pad_l, tout, cols.data());
    ECMap<T> C(cols.data(), cin * k, tout);
    EMap<T> Y(out.data() + i * cout * tout, cout, tout);
    Y.noalias() = W2 * C;
    if (b.defined()) {
      for (std::int64_t o = 0; o < cout; ++o) {
        T* row = out.data() + (i * cout + o) * tout;
        const T bv = b.data()[o];
        for (std::int64_t t = 0; t < tout; ++t) row[t] += bv;
      }
    }
  }
  check_finite<T>(std::span<const T>(out.values()), "conv1d");

  std::vector<std::shared_ptr<detail::Node<T>>> parents{x.node_ptr(), w.node_ptr()};
  if (b.defined()) parents.push_back(b.node_ptr());
  detail::attach(out, std::move(parents),
                 [n, cin, tin, cout, k, tout, stride, pad_l](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    std::vector<T> cols(static_cast<std::size_t>(cin * k * tout));
    std::vector<T> dcols(static_cast<std::size_t>(cin * k * tout));
    ECMap<T> W2(pw.values.data(), cout, cin * k);
    for (std::int64_t i = 0; i < n; ++i) {
      ECMap<T> G(self.grad.data() + i * cout * tout, cout, tout);
      if (pw.requires_grad) {
        detail::im2col(px.values.data() + i * cin * tin, cin, tin, k, stride, pad_l, tout, cols.data());
        ECMap<T> C(cols.data(), cin * k, tout);
        EMap<T> dW(pw.grad.data(), cout, cin * k);
        dW.noalias() += G * C.transpose();
      }
      if (px.requires_grad) {
        EMap<T> dC(dcols.data(), cin * k, tout);
        dC.noalias() = W2.transpose() * G;
        detail::col2im_acc(dcols.data(), cin, tin, k, stride, pad_l, tout,
                           px.grad.data() + i * cin * tin);
      }
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        auto& pb = *self.parents[2];
        for (std::int64_t o = 0; o < cout; ++o) {
          const T* g = self.grad.data() + (i * cout + o) * tout;
          T acc = T(0);
          for (std::int64_t t = 0; t < tout; ++t) acc += g[t];
          pb.grad[static_cast<std::size_t>(o)] += acc;
        }
      }
    }
  });
  return out;
}

// 'same' padding at stride 1; for even kernels the extra pad sample goes on
// the right, Tout == Tin.
template <typename T>
Tensor<T> conv1d_same(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::int64_t k = w.dim(2);
  const std::int64_t pad_l = (k - 1) / 2;
  return conv1d(x, w, b, 1, pad_l, k - 1 - pad_l);
}

// Frames [N, F, L] summed onto a hop grid -> [N, (F-1)*hop + L].
template <typename T>
Tensor<T> overlap_add_frames(const Tensor<T>& x, std::int64_t hop) {
  if (x.ndim() != 3) throw ShapeError("overlap_add_frames: expects [N, F, L]");
  const std::int64_t n = x.dim(0), f = x.dim(1), l = x.dim(2);
  if (hop < 1 || hop > l) throw ShapeError("overlap_add_frames: bad hop");
  const std::int64_t tlen = (f - 1) * hop + l;
  auto out = detail::make_out<T>("overlap_add_frames", {n, tlen});
  for (std::int64_t i = 0; i < n; ++i) {
    T* y = out.data() + i * tlen;
    for (std::int64_t r = 0; r < f; ++r) {
      const T* src = x.data() + (i * f + r) * l;
      T* dst = y + r * hop;
      for (std::int64_t j = 0; j < l; ++j) dst[j] += src[j];
    }
  }
  detail::attach(out, {x.node_ptr()}, [n, f, l, hop, tlen](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::int64_t i = 0; i < n; ++i) {
      const T* g = self.grad.data() + i * tlen;
      for (std::int64_t r = 0; r < f; ++r) {
        T* d = px.grad.data() + (i * f + r) * l;
        const T* src = g + r * hop;
        for (std::int64_t j = 0; j < l; ++j) d[j] += src[j];
      }
    }
  });
  return out;
}

inline std::int64_t chunk_count(std::int64_t t, std::int64_t k) {
  const std::int64_t hop = k / 2;
  if (t <= k) return 1;
  return (t - k + hop - 1) / hop + 1;
}

// Split [N, C, T] into half-overlapping chunks [N, C, P, K], zero-padded.
template <typename T>
Tensor<T> segment_chunks(const Tensor<T>& x, std::int64_t k) {
  if (x.ndim() != 3) throw ShapeError("segment_chunks: expects [N, C, T]");
  if (k < 2 || k % 2 != 0) throw ShapeError("segment_chunks: chunk size must be even and >= 2");
  const std::int64_t n = x.dim(0), c = x.dim(1), t = x.dim(2);
  const std::int64_t hop = k / 2;
  const std::int64_t p = chunk_count(t, k);
  auto out = detail::make_out<T>("segment_chunks", {n, c, p, k});
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T* src = x.data() + i * t;
    for (std::int64_t pp = 0; pp < p; ++pp) {
      T* dst = out.data() + (i * p + pp) * k;
      const std::int64_t start = pp * hop;
      const std::int64_t take = std::min<std::int64_t>(k, t - start);
      if (take > 0) std::memcpy(dst, src + start, take * sizeof(T));
    }
  }
  detail::attach(out, {x.node_ptr()}, [n, c, t, p, k, hop](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::int64_t i = 0; i < n * c; ++i) {
      T* d = px.grad.data() + i * t;
      for (std::int64_t pp = 0; pp < p; ++pp) {
        const T* g = self.grad.data() + (i * p + pp) * k;
        const std::int64_t start = pp * hop;
        const std::int64_t take = std::min<std::int64_t>(k, t - start);
        for (std::int64_t j = 0; j < take; ++j) d[start + j] += g[j];
      }
    }
  });
  return out;
}

// Inverse of segment_chunks: average overlapping chunk samples back onto the
// time axis and trim to out_len. aggregate(segment(x), T) == x exactly.
template <typename T>
Tensor<T> aggregate_chunks(const Tensor<T>& x, std::int64_t out_len) {
  if (x.ndim() != 4) throw ShapeError("aggregate_chunks: expects [N, C, P, K]");
  const std::int64_t n = x.dim(0), c = x.dim(1), p = x.dim(2), k = x.dim(3);
  const std::int64_t hop = k / 2;
  const std::int64_t padded = (p - 1) * hop + k;
  if (out_len < 1 || out_len > padded) throw ShapeError("aggregate_chunks: bad output length");

  std::vector<T> inv_count(static_cast<std::size_t>(padded), T(0));
  for (std::int64_t pp = 0; pp < p; ++pp) {
    for (std::int64_t j = 0; j < k; ++j) inv_count[static_cast<std::size_t>(pp * hop + j)] += T(1);
  }
  for (auto& v : inv_count) v = T(1) / v;

  auto out = detail::make_out<T>("aggregate_chunks", {n, c, out_len});
  for (std::int64_t i = 0; i < n * c; ++i) {
    T* y = out.data() + i * out_len;
    for (std::int64_t pp = 0; pp < p; ++pp) {
      const T* src = x.data() + (i * p + pp) * k;
      const std::int64_t start = pp * hop;
      const std::int64_t take = std::min<std::int64_t>(k, out_len - start);
      for (std::int64_t j = 0; j < take; ++j) {
        y[start + j] += src[j] * inv_count[static_cast<std::size_t>(start + j)];
      }
    }
  }
  detail::attach(out, {x.node_ptr()},
                 [n, c, p, k, hop, out_len, inv_count](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    for (std::int64_t i = 0; i < n * c; ++i) {
      const T* g = self.grad.data() + i * out_len;
      for (std::int64_t pp = 0; pp < p; ++pp) {
        T* d = px.grad.data() + (i * p + pp) * k;
        const std::int64_t start = pp * hop;
        const std::int64_t take = std::min<std::int64_t>(k, out_len - start);
        for (std::int64_t j = 0; j < take; ++j) {
          d[j] += g[start + j] * inv_count[static_cast<std::size_t>(start + j)];
        }
      }
    }
  });
  return out;
}

// Single-layer unidirectional LSTM over [S, N, C] with zero initial state.
// Gate rows of w_ih / w_hh / b are ordered [input; forget; cell; output].
// Implemented as one op with a hand-written BPTT so each step costs two
// gemms instead of a long elementwise tape.
template <typename T>
Tensor<T> lstm(const Tensor<T>& x, const Tensor<T>& w_ih, const Tensor<T>& w_hh,
               const Tensor<T>& b) {
  if (x.ndim() != 3 || w_ih.ndim() != 2 || w_hh.ndim() != 2 || b.ndim() != 1) {
    throw ShapeError("lstm: expects x [S,N,C], w_ih [4H,C], w_hh [4H,H], b [4H]");
  }
  const std::int64_t s = x.dim(0), n = x.dim(1), c = x.dim(2);
  const std::int64_t g4 = w_ih.dim(0);
  if (g4 % 4 != 0) throw ShapeError("lstm: gate dim not divisible by 4");
  const std::int64_t h = g4 / 4;
  if (w_ih.dim(1) != c || w_hh.dim(0) != g4 || w_hh.dim(1) != h || b.dim(0) != g4) {
    throw ShapeError("lstm: parameter shapes inconsistent");
  }

  auto out = detail::make_out<T>("lstm", {s, n, h});
  // A = x w_ih^T in one gemm, then step-wise recurrent updates in place.
  std::vector<T> acts(static_cast<std::size_t>(s * n * g4));
  {
    ECMap<T> X(x.data(), s * n, c);
    ECMap<T> Wih(w_ih.data(), g4, c);
    EMap<T> A(acts.data(), s * n, g4);
    A.noalias() = X * Wih.transpose();
  }
  std::vector<T> cell(static_cast<std::size_t>(s * n * h));
  std::vector<T> tanh_c(static_cast<std::size_t>(s * n * h));
  {
    ECMap<T> Whh(w_hh.data(), g4, h);
    const T* bp = b.data();
    for (std::int64_t t = 0; t < s; ++t) {
      EMap<T> At(acts.data() + t * n * g4, n, g4);
      if (t > 0) {
        ECMap<T> Hprev(out.data() + (t - 1) * n * h, n, h);
        At.noalias() += Hprev * Whh.transpose();
      }
      for (std::int64_t r = 0; r < n; ++r) {
        T* a = acts.data() + (t * n + r) * g4;
        const T* cprev = t > 0 ? cell.data() + ((t - 1) * n + r) * h : nullptr;
        T* cc = cell.data() + (t * n + r) * h;
        T* tc = tanh_c.data() + (t * n + r) * h;
        T* hh = out.data() + (t * n + r) * h;
        for (std::int64_t j = 0; j < h; ++j) {
          const double ig = 1.0 / (1.0 + std::exp(-static_cast<double>(a[j] + bp[j])));
          const double fg = 1.0 / (1.0 + std::exp(-static_cast<double>(a[h + j] + bp[h + j])));
          const double gg = std::tanh(static_cast<double>(a[2 * h + j] + bp[2 * h + j]));
          const double og = 1.0 / (1.0 + std::exp(-static_cast<double>(a[3 * h + j] + bp[3 * h + j])));
          const double cv = fg * (cprev ? static_cast<double>(cprev[j]) : 0.0) + ig * gg;
          const double tv = std::tanh(cv);
          a[j] = static_cast<T>(ig);
          a[h + j] = static_cast<T>(fg);
          a[2 * h + j] = static_cast<T>(gg);
          a[3 * h + j] = static_cast<T>(og);
          cc[j] = static_cast<T>(cv);
          tc[j] = static_cast<T>(tv);
          hh[j] = static_cast<T>(og * tv);
        }
      }
    }
  }
  check_finite<T>(std::span<const T>(out.values()), "lstm");

  detail::attach(out, {x.node_ptr(), w_ih.node_ptr(), w_hh.node_ptr(), b.node_ptr()},
                 [s, n, c, h, g4, acts = std::move(acts), cell = std::move(cell),
                  tanh_c = std::move(tanh_c)](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pwih = *self.parents[1];
    auto& pwhh = *self.parents[2];
    auto& pb = *self.parents[3];
    ECMap<T> Whh(pwhh.values.data(), g4, h);

    std::vector<T> da(static_cast<std::size_t>(s * n * g4));  // pre-activation grads
    std::vector<T> dh(static_cast<std::size_t>(n * h), T(0));
    std::vector<T> dc(static_cast<std::size_t>(n * h), T(0));
    for (std::int64_t t = s - 1; t >= 0; --t) {
      for (std::int64_t r = 0; r < n; ++r) {
        const T* a = acts.data() + (t * n + r) * g4;
        const T* cprev = t > 0 ? cell.data() + ((t - 1) * n + r) * h : nullptr;
        const T* tc = tanh_c.data() + (t * n + r) * h;
        const T* gh = self.grad.data() + (t * n + r) * h;
        T* dhr = dh.data() + r * h;
        T* dcr = dc.data() + r * h;
        T* dar = da.data() + (t * n + r) * g4;
        for (std::int64_t j = 0; j < h; ++j) {
          const T ig = a[j], fg = a[h + j], gg = a[2 * h + j], og = a[3 * h + j];
          const T dht = gh[j] + dhr[j];
          const T do_ = dht * tc[j];
          T dct = dcr[j] + dht * og * (T(1) - tc[j] * tc[j]);
          const T di = dct * gg;
          const T dg = dct * ig;
          const T df = cprev ? dct * cprev[j] : T(0);
          dcr[j] = dct * fg;  // flows to step t-1
          dar[j] = di * ig * (T(1) - ig);
          dar[h + j] = df * fg * (T(1) - fg);
          dar[2 * h + j] = dg * (T(1) - gg * gg);
          dar[3 * h + j] = do_ * og * (T(1) - og);
        }
      }
      // dh_{t-1} = dA_t Whh
      ECMap<T> dAt(da.data() + t * n * g4, n, g4);
      EMap<T> dH(dh.data(), n, h);
      dH.noalias() = dAt * Whh;
      if (t > 0 && pwhh.requires_grad) {
        ECMap<T> Hprev(self.values.data() + (t - 1) * n * h, n, h);
        EMap<T> dWhh(pwhh.grad.data(), g4, h);
        dWhh.noalias() += dAt.transpose() * Hprev;
      }
    }
    ECMap<T> dA(da.data(), s * n, g4);
    if (px.requires_grad) {
      ECMap<T> Wih(pwih.values.data(), g4, c);
      EMap<T> dX(px.grad.data(), s * n, c);
      dX.noalias() += dA * Wih;
    }
    if (pwih.requires_grad) {
      ECMap<T> X(px.values.data(), s * n, c);
      EMap<T> dWih(pwih.grad.data(), g4, c);
      dWih.noalias() += dA.transpose() * X;
    }
    if (pb.requires_grad) {
      for (std::int64_t i = 0; i < s * n; ++i) {
        const T* g = da.data() + i * g4;
        for (std::int64_t j = 0; j < g4; ++j) pb.grad[static_cast<std::size_t>(j)] += g[j];
      }
    }
  });
  return out;
}

// Bidirectional wrapper: forward and time-reversed passes concatenated on the
// feature axis, [S, N, C] -> [S, N, 2H].
template <typename T>
Tensor<T> blstm(const Tensor<T>& x, const Tensor<T>& wih_f, const Tensor<T>& whh_f,
                const Tensor<T>& b_f, const Tensor<T>& wih_b, const Tensor<T>& whh_b,
                const Tensor<T>& b_b) {
  auto fwd = lstm(x, wih_f, whh_f, b_f);
  auto bwd = reverse_axis(lstm(reverse_axis(x, 0), wih_b, whh_b, b_b), 0);
  return concat(fwd, bwd, 2);
}

// Layer norm over the last axis with learned gain/bias of that width.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5) {
  if (x.ndim() < 1) throw ShapeError("layer_norm: scalar input");
  const std::int64_t cdim = x.dim(x.ndim() - 1);
  if (gamma.ndim() != 1 || gamma.dim(0) != cdim || beta.ndim() != 1 || beta.dim(0) != cdim) {
    throw ShapeError("layer_norm: gain/bias must have the normalized width");
  }
  const std::int64_t slices = x.size() / cdim;
  auto out = detail::make_out<T>("layer_norm", x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.size()));
  std::vector<T> inv_std(static_cast<std::size_t>(slices));
  const T* xv = x.data();
  const T* gv = gamma.data();
  const T* bv = beta.data();
  T* ov = out.data();
  for (std::int64_t r = 0; r < slices; ++r) {
    const T* xr = xv + r * cdim;
    double mu = 0.0;
    for (std::int64_t j = 0; j < cdim; ++j) mu += static_cast<double>(xr[j]);
    mu /= static_cast<double>(cdim);
    double var = 0.0;
    for (std::int64_t j = 0; j < cdim; ++j) {
      const double d = static_cast<double>(xr[j]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(cdim);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = static_cast<T>(inv);
    T* xh = xhat.data() + r * cdim;
    T* yr = ov + r * cdim;
    for (std::int64_t j = 0; j < cdim; ++j) {
      xh[j] = static_cast<T>((static_cast<double>(xr[j]) - mu) * inv);
      yr[j] = gv[j] * xh[j] + bv[j];
    }
  }
  check_finite<T>(std::span<const T>(out.values()), "layer_norm");
  detail::attach(out, {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
                 [cdim, slices, xhat = std::move(xhat), inv_std = std::move(inv_std)]
                 (detail::Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    const T* gv = pg.values.data();
    for (std::int64_t r = 0; r < slices; ++r) {
      const T* g = self.grad.data() + r * cdim;
      const T* xh = xhat.data() + r * cdim;
      T m1 = T(0), m2 = T(0);
      for (std::int64_t j = 0; j < cdim; ++j) {
        const T dxh = g[j] * gv[j];
        m1 += dxh;
        m2 += dxh * xh[j];
      }
      m1 /= static_cast<T>(cdim);
      m2 /= static_cast<T>(cdim);
      if (px.requires_grad) {
        T* dx = px.grad.data() + r * cdim;
        const T inv = inv_std[static_cast<std::size_t>(r)];
        for (std::int64_t j = 0; j < cdim; ++j) {
          dx[j] += inv * (g[j] * gv[j] - m1 - xh[j] * m2);
        }
      }
      if (pg.requires_grad || pb.requires_grad) {
        for (std::int64_t j = 0; j < cdim; ++j) {
          pg.grad[static_cast<std::size_t>(j)] += g[j] * xh[j];
          pb.grad[static_cast<std::size_t>(j)] += g[j];
        }
      }
    }
  });
  return out;
}

// Layer norm over the channel axis of [N, C, T] series.
template <typename T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma,
                              const Tensor<T>& beta, double eps = 1e-5) {
  if (x.ndim() != 3) throw ShapeError("layer_norm_channels: expects [N, C, T]");
  auto xt = permute(x, {0, 2, 1});
  auto yt = layer_norm(xt, gamma, beta, eps);
  return permute(yt, {0, 2, 1});
}

// Feature-wise affine modulation: y[n,c,t] = gamma[n,c] * x[n,c,t] + beta[n,c].
template <typename T>
Tensor<T> film(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (x.ndim() != 3 || gamma.ndim() != 2 || beta.ndim() != 2) {
    throw ShapeError("film: expects x [N,C,T], gamma/beta [N,C]");
  }
  const std::int64_t n = x.dim(0), c = x.dim(1), t = x.dim(2);
  if (gamma.dim(0) != n || gamma.dim(1) != c || beta.dim(0) != n || beta.dim(1) != c) {
    throw ShapeError("film: modulation shape mismatch");
  }
  auto out = detail::make_out<T>("film", x.shape());
  for (std::int64_t i = 0; i < n * c; ++i) {
    const T g = gamma.data()[i], bb = beta.data()[i];
    const T* xr = x.data() + i * t;
    T* yr = out.data() + i * t;
    for (std::int64_t j = 0; j < t; ++j) yr[j] = g * xr[j] + bb;
  }
  check_finite<T>(std::span<const T>(out.values()), "film");
  detail::attach(out, {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
                 [n, c, t](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pg = *self.parents[1];
    auto& pb = *self.parents[2];
    for (std::int64_t i = 0; i < n * c; ++i) {
      const T* g = self.grad.data() + i * t;
      const T* xr = px.values.data() + i * t;
      const T gam = pg.values.data()[i];
      T dgam = T(0), dbet = T(0);
      T* dx = px.requires_grad ? px.grad.data() + i * t : nullptr;
      for (std::int64_t j = 0; j < t; ++j) {
        if (dx) dx[j] += g[j] * gam;
        dgam += g[j] * xr[j];
        dbet += g[j];
      }
      pg.grad[static_cast<std::size_t>(i)] += dgam;
      pb.grad[static_cast<std::size_t>(i)] += dbet;
    }
  });
  return out;
}

// Single-head scaled dot-product attention composed from primitives.
// q [Nq, d], k [Nk, d], v [Nk, dv] -> [Nq, dv]; softmax over keys.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.dim(1) != k.dim(1) ||
      k.dim(0) != v.dim(0)) {
    throw ShapeError("scaled_dot_attention: incompatible shapes");
  }
  auto scores = scalar_mul(matmul(q, transpose2d(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  return matmul(softmax(scores, 1), v);
}

}  // namespace textsep::diff
