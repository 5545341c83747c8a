#pragma once

// Differentiable operations over Tensor<T>. Granularity is deliberately
// coarse: compound kernels (conv1d, lstm, layer_norm, chunking) implement
// their own backward passes so the tape stays short and the heavy lifting
// runs through dense gemms.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "textsep/rng.hpp"
#include "textsep/tensor.hpp"

namespace textsep::diff {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

template <typename T>
Tensor<T> make_out(const char* op, Shape shape) {
  auto t = Tensor<T>::zeros(std::move(shape));
  t.node()->op = op;
  return t;
}

template <typename T, typename F>
void attach(Tensor<T>& out, std::vector<std::shared_ptr<Node<T>>> parents, F&& fn) {
  if (!grad_mode()) return;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (!any) return;
  auto* n = out.node();
  n->parents = std::move(parents);
  n->requires_grad = true;
  n->backward = std::forward<F>(fn);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

// outer * len * inner decomposition of an axis.
inline void axis_extents(const Shape& s, int axis, std::int64_t& outer,
                         std::int64_t& len, std::int64_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis out of range for shape " + shape_str(s));
  }
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  len = s[static_cast<std::size_t>(axis)];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[static_cast<std::size_t>(i)];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  auto out = detail::make_out<T>("add", a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  check_finite<T>(ov, "add");
  detail::attach(out, {a.node_ptr(), b.node_ptr()}, [](detail::Node<T>& self) {
    auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < g.size(); ++i) {
      pa.grad[i] += g[i];
      pb.grad[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  auto out = detail::make_out<T>("sub", a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  check_finite<T>(ov, "sub");
  detail::attach(out, {a.node_ptr(), b.node_ptr()}, [](detail::Node<T>& self) {
    auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < g.size(); ++i) {
      pa.grad[i] += g[i];
      pb.grad[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  auto out = detail::make_out<T>("mul", a.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  check_finite<T>(ov, "mul");
  detail::attach(out, {a.node_ptr(), b.node_ptr()}, [](detail::Node<T>& self) {
    auto& g = self.grad;
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < g.size(); ++i) {
      pa.grad[i] += g[i] * pb.values[i];
      pb.grad[i] += g[i] * pa.values[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  auto out = detail::make_out<T>("neg", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = -av[i];
  detail::attach(out, {a.node_ptr()}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] -= self.grad[i];
  });
  return out;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, double c) {
  auto out = detail::make_out<T>("scalar_mul", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  const T cc = static_cast<T>(c);
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * cc;
  check_finite<T>(ov, "scalar_mul");
  detail::attach(out, {a.node_ptr()}, [cc](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * cc;
  });
  return out;
}

template <typename T>
Tensor<T> scalar_add(const Tensor<T>& a, double c) {
  auto out = detail::make_out<T>("scalar_add", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  const T cc = static_cast<T>(c);
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + cc;
  check_finite<T>(ov, "scalar_add");
  detail::attach(out, {a.node_ptr()}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
  return out;
}

// y = x * s where s is a scalar tensor (shape {} or {1}).
template <typename T>
Tensor<T> scale(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1) throw ShapeError("scale: scale factor must be scalar");
  auto out = detail::make_out<T>("scale", x.shape());
  const T sv = s.values()[0];
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * sv;
  check_finite<T>(ov, "scale");
  detail::attach(out, {x.node_ptr(), s.node_ptr()}, [sv](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    T acc = T(0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      px.grad[i] += self.grad[i] * sv;
      acc += self.grad[i] * px.values[i];
    }
    ps.grad[0] += acc;
  });
  return out;
}

// y = x + s (broadcast scalar tensor).
template <typename T>
Tensor<T> shift(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.size() != 1) throw ShapeError("shift: offset must be scalar");
  auto out = detail::make_out<T>("shift", x.shape());
  const T sv = s.values()[0];
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + sv;
  check_finite<T>(ov, "shift");
  detail::attach(out, {x.node_ptr(), s.node_ptr()}, [](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    T acc = T(0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      px.grad[i] += self.grad[i];
      acc += self.grad[i];
    }
    ps.grad[0] += acc;
  });
  return out;
}

// r = 1 / s for a scalar tensor. Caller guards against zero.
template <typename T>
Tensor<T> reciprocal(const Tensor<T>& s) {
  if (s.size() != 1) throw ShapeError("reciprocal: expects scalar");
  auto out = detail::make_out<T>("reciprocal", s.shape());
  const T sv = s.values()[0];
  out.values()[0] = T(1) / sv;
  check_finite<T>(out.values(), "reciprocal");
  detail::attach(out, {s.node_ptr()}, [sv](detail::Node<T>& self) {
    self.parents[0]->grad[0] -= self.grad[0] / (sv * sv);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto out = detail::make_out<T>("relu", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
  detail::attach(out, {a.node_ptr()}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.values[i] > T(0)) pa.grad[i] += self.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto out = detail::make_out<T>("sigmoid", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double x = static_cast<double>(av[i]);
    ov[i] = static_cast<T>(1.0 / (1.0 + std::exp(-x)));
  }
  detail::attach(out, {a.node_ptr()}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.values[i];
      pa.grad[i] += self.grad[i] * y * (T(1) - y);
    }
  });
  return out;
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  auto out = detail::make_out<T>("tanh", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(av[i]);
  detail::attach(out, {a.node_ptr()}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const T y = self.values[i];
      pa.grad[i] += self.grad[i] * (T(1) - y * y);
    }
  });
  return out;
}

// Natural log; caller guarantees positivity (typically via +eps).
template <typename T>
Tensor<T> log_op(const Tensor<T>& a) {
  auto out = detail::make_out<T>("log", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
  check_finite<T>(ov, "log");
  detail::attach(out, {a.node_ptr()}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      pa.grad[i] += self.grad[i] / pa.values[i];
    }
  });
  return out;
}

// Gradient passes where lo <= x <= hi and is zero outside.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, double lo, double hi) {
  auto out = detail::make_out<T>("clamp", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  const T tl = static_cast<T>(lo), th = static_cast<T>(hi);
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::min(std::max(av[i], tl), th);
  detail::attach(out, {a.node_ptr()}, [tl, th](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (pa.values[i] >= tl && pa.values[i] <= th) pa.grad[i] += self.grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  std::int64_t outer, len, inner;
  detail::axis_extents(a.shape(), axis, outer, len, inner);
  auto out = detail::make_out<T>("softmax", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = av[static_cast<std::size_t>(base)];
      for (std::int64_t k = 1; k < len; ++k) {
        mx = std::max(mx, av[static_cast<std::size_t>(base + k * inner)]);
      }
      double denom = 0.0;
      for (std::int64_t k = 0; k < len; ++k) {
        const double e = std::exp(static_cast<double>(av[static_cast<std::size_t>(base + k * inner)] - mx));
        ov[static_cast<std::size_t>(base + k * inner)] = static_cast<T>(e);
        denom += e;
      }
      for (std::int64_t k = 0; k < len; ++k) {
        ov[static_cast<std::size_t>(base + k * inner)] =
            static_cast<T>(ov[static_cast<std::size_t>(base + k * inner)] / denom);
      }
    }
  }
  check_finite<T>(ov, "softmax");
  detail::attach(out, {a.node_ptr()}, [outer, len, inner](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T dot = T(0);
        for (std::int64_t k = 0; k < len; ++k) {
          const auto idx = static_cast<std::size_t>(base + k * inner);
          dot += self.grad[idx] * self.values[idx];
        }
        for (std::int64_t k = 0; k < len; ++k) {
          const auto idx = static_cast<std::size_t>(base + k * inner);
          pa.grad[idx] += self.values[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto out = detail::make_out<T>("sum", Shape{});
  double acc = 0.0;
  for (const T& v : a.values()) acc += static_cast<double>(v);
  out.values()[0] = static_cast<T>(acc);
  check_finite<T>(out.values(), "sum");
  detail::attach(out, {a.node_ptr()}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    const T g = self.grad[0];
    for (auto& pg : pa.grad) pg += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  auto out = detail::make_out<T>("mean", Shape{});
  double acc = 0.0;
  for (const T& v : a.values()) acc += static_cast<double>(v);
  out.values()[0] = static_cast<T>(acc / static_cast<double>(a.size()));
  check_finite<T>(out.values(), "mean");
  const T inv = T(1) / static_cast<T>(a.size());
  detail::attach(out, {a.node_ptr()}, [inv](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    const T g = self.grad[0] * inv;
    for (auto& pg : pa.grad) pg += g;
  });
  return out;
}

// Mean over the leading axis: [n, ...] -> [...].
template <typename T>
Tensor<T> mean_axis0(const Tensor<T>& a) {
  if (a.ndim() < 1 || a.dim(0) == 0) throw ShapeError("mean_axis0: need non-empty axis 0");
  const std::int64_t n = a.dim(0);
  Shape rest(a.shape().begin() + 1, a.shape().end());
  auto out = detail::make_out<T>("mean_axis0", rest);
  const std::int64_t inner = numel(rest);
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t i = 0; i < inner; ++i) {
      ov[static_cast<std::size_t>(i)] += av[static_cast<std::size_t>(r * inner + i)];
    }
  }
  const T inv = T(1) / static_cast<T>(n);
  for (auto& v : ov) v *= inv;
  check_finite<T>(ov, "mean_axis0");
  detail::attach(out, {a.node_ptr()}, [n, inner, inv](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t i = 0; i < inner; ++i) {
        pa.grad[static_cast<std::size_t>(r * inner + i)] +=
            self.grad[static_cast<std::size_t>(i)] * inv;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto out = detail::make_out<T>("reshape", std::move(shape));
  out.values() = a.values();
  detail::attach(out, {a.node_ptr()}, [](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
  return out;
}

namespace detail {

// dst[perm-permuted coords] = src[coords]; out_shape[j] == src_shape[perm[j]].
// Walks src linearly, maintaining the dst flat index with a carry counter.
template <typename T, bool Accumulate, bool Gather>
void permute_kernel(const T* src, T* dst, const Shape& src_shape, const std::vector<int>& perm) {
  const int nd = static_cast<int>(src_shape.size());
  Shape out_shape(nd);
  for (int j = 0; j < nd; ++j) out_shape[j] = src_shape[perm[j]];
  std::vector<std::int64_t> out_strides(nd);
  std::int64_t s = 1;
  for (int j = nd - 1; j >= 0; --j) {
    out_strides[j] = s;
    s *= out_shape[j];
  }
  // weight[a] = stride of src axis a in the dst layout
  std::vector<std::int64_t> weight(nd);
  for (int j = 0; j < nd; ++j) weight[perm[j]] = out_strides[j];

  std::vector<std::int64_t> coord(nd, 0);
  const std::int64_t total = numel(src_shape);
  std::int64_t dst_idx = 0;
  for (std::int64_t i = 0; i < total; ++i) {
    if constexpr (Gather) {
      if constexpr (Accumulate) {
        dst[i] += src[dst_idx];
      } else {
        dst[i] = src[dst_idx];
      }
    } else {
      if constexpr (Accumulate) {
        dst[dst_idx] += src[i];
      } else {
        dst[dst_idx] = src[i];
      }
    }
    // mixed-radix counter over src coords, dst_idx kept in lockstep
    for (int a = nd - 1; a >= 0; --a) {
      coord[a]++;
      dst_idx += weight[a];
      if (coord[a] < src_shape[a]) break;
      dst_idx -= weight[a] * src_shape[a];
      coord[a] = 0;
    }
  }
}

}  // namespace detail

// out.shape[j] = a.shape[perm[j]]; out[j-coords] = a[perm(j-coords)].
template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<int> perm) {
  const int nd = a.ndim();
  if (static_cast<int>(perm.size()) != nd) throw ShapeError("permute: rank mismatch");
  std::vector<bool> used(static_cast<std::size_t>(nd), false);
  for (int p : perm) {
    if (p < 0 || p >= nd || used[static_cast<std::size_t>(p)]) {
      throw ShapeError("permute: invalid permutation");
    }
    used[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(nd));
  for (int j = 0; j < nd; ++j) out_shape[static_cast<std::size_t>(j)] = a.dim(perm[static_cast<std::size_t>(j)]);
  auto out = detail::make_out<T>("permute", out_shape);
  detail::permute_kernel<T, false, false>(a.data(), out.data(), a.shape(), perm);
  detail::attach(out, {a.node_ptr()}, [perm, src_shape = a.shape()](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    // dst grad gathered back onto src layout
    detail::permute_kernel<T, true, true>(self.grad.data(), pa.grad.data(), src_shape, perm);
  });
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose2d: expects rank 2");
  return permute(a, {1, 0});
}

template <typename T>
Tensor<T> reverse_axis(const Tensor<T>& a, int axis) {
  std::int64_t outer, len, inner;
  detail::axis_extents(a.shape(), axis, outer, len, inner);
  auto out = detail::make_out<T>("reverse", a.shape());
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t k = 0; k < len; ++k) {
      const T* src = av.data() + (o * len + k) * inner;
      T* dst = ov.data() + (o * len + (len - 1 - k)) * inner;
      std::memcpy(dst, src, static_cast<std::size_t>(inner) * sizeof(T));
    }
  }
  detail::attach(out, {a.node_ptr()}, [outer, len, inner](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t k = 0; k < len; ++k) {
        const T* src = self.grad.data() + (o * len + (len - 1 - k)) * inner;
        T* dst = pa.grad.data() + (o * len + k) * inner;
        for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  if (a.ndim() != b.ndim()) throw ShapeError("concat: rank mismatch");
  for (int i = 0; i < a.ndim(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat: shapes differ off-axis: " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
    }
  }
  std::int64_t outer, la, inner;
  detail::axis_extents(a.shape(), axis, outer, la, inner);
  const std::int64_t lb = b.dim(axis);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = la + lb;
  auto out = detail::make_out<T>("concat", out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(ov.data() + o * (la + lb) * inner, av.data() + o * la * inner,
                static_cast<std::size_t>(la * inner) * sizeof(T));
    std::memcpy(ov.data() + (o * (la + lb) + la) * inner, bv.data() + o * lb * inner,
                static_cast<std::size_t>(lb * inner) * sizeof(T));
  }
  detail::attach(out, {a.node_ptr(), b.node_ptr()}, [outer, la, lb, inner](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::int64_t o = 0; o < outer; ++o) {
      const T* ga = self.grad.data() + o * (la + lb) * inner;
      const T* gb = ga + la * inner;
      T* da = pa.grad.data() + o * la * inner;
      T* db = pb.grad.data() + o * lb * inner;
      for (std::int64_t i = 0; i < la * inner; ++i) da[i] += ga[i];
      for (std::int64_t i = 0; i < lb * inner; ++i) db[i] += gb[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::int64_t start, std::int64_t len) {
  std::int64_t outer, full, inner;
  detail::axis_extents(a.shape(), axis, outer, full, inner);
  if (start < 0 || len < 0 || start + len > full) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") exceeds axis length " + std::to_string(full));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  auto out = detail::make_out<T>("slice", out_shape);
  const auto& av = a.values();
  auto& ov = out.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::memcpy(ov.data() + o * len * inner, av.data() + (o * full + start) * inner,
                static_cast<std::size_t>(len * inner) * sizeof(T));
  }
  detail::attach(out, {a.node_ptr()}, [outer, full, inner, start, len](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    for (std::int64_t o = 0; o < outer; ++o) {
      const T* g = self.grad.data() + o * len * inner;
      T* d = pa.grad.data() + (o * full + start) * inner;
      for (std::int64_t i = 0; i < len * inner; ++i) d[i] += g[i];
    }
  });
  return out;
}

// Stack scalar tensors into a vector [n]. Used to assemble per-example losses.
template <typename T>
Tensor<T> stack_scalars(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("stack_scalars: empty input");
  auto out = detail::make_out<T>("stack_scalars", Shape{static_cast<std::int64_t>(xs.size())});
  std::vector<std::shared_ptr<detail::Node<T>>> parents;
  parents.reserve(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].size() != 1) throw ShapeError("stack_scalars: inputs must be scalars");
    out.values()[i] = xs[i].values()[0];
    parents.push_back(xs[i].node_ptr());
  }
  detail::attach(out, std::move(parents), [](detail::Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      self.parents[i]->grad[0] += self.grad[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Dense algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = detail::make_out<T>("matmul", {m, n});
  ECMap<T> A(a.data(), m, k);
  ECMap<T> B(b.data(), k, n);
  EMap<T> C(out.data(), m, n);
  C.noalias() = A * B;
  check_finite<T>(std::span<const T>(out.values()), "matmul");
  detail::attach(out, {a.node_ptr(), b.node_ptr()}, [m, k, n](detail::Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ECMap<T> G(self.grad.data(), m, n);
    ECMap<T> A(pa.values.data(), m, k);
    ECMap<T> B(pb.values.data(), k, n);
    if (pa.requires_grad) {
      EMap<T> dA(pa.grad.data(), m, k);
      dA.noalias() += G * B.transpose();
    }
    if (pb.requires_grad) {
      EMap<T> dB(pb.grad.data(), k, n);
      dB.noalias() += A.transpose() * G;
    }
  });
  return out;
}

// y = x W^T + b with x [n, in], W [out, in], b [out] (b may be undefined).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>()) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " with weight " +
                     shape_str(w.shape()));
  }
  const std::int64_t n = x.dim(0), in = x.dim(1), outd = w.dim(0);
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != outd)) {
    throw ShapeError("linear: bias shape " + shape_str(b.shape()));
  }
  auto out = detail::make_out<T>("linear", {n, outd});
  ECMap<T> X(x.data(), n, in);
  ECMap<T> W(w.data(), outd, in);
  EMap<T> Y(out.data(), n, outd);
  Y.noalias() = X * W.transpose();
  if (b.defined()) {
    for (std::int64_t r = 0; r < n; ++r) {
      T* row = out.data() + r * outd;
      const T* bv = b.data();
      for (std::int64_t c = 0; c < outd; ++c) row[c] += bv[c];
    }
  }
  check_finite<T>(std::span<const T>(out.values()), "linear");
  std::vector<std::shared_ptr<detail::Node<T>>> parents{x.node_ptr(), w.node_ptr()};
  if (b.defined()) parents.push_back(b.node_ptr());
  detail::attach(out, std::move(parents), [n, in, outd](detail::Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    ECMap<T> G(self.grad.data(), n, outd);
    ECMap<T> X(px.values.data(), n, in);
    ECMap<T> W(pw.values.data(), outd, in);
    if (px.requires_grad) {
      EMap<T> dX(px.grad.data(), n, in);
      dX.noalias() += G * W;
    }
    if (pw.requires_grad) {
      EMap<T> dW(pw.grad.data(), outd, in);
      dW.noalias() += G.transpose() * X;
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& pb = *self.parents[2];
      for (std::int64_t r = 0; r < n; ++r) {
        const T* g = self.grad.data() + r * outd;
        for (std::int64_t c = 0; c < outd; ++c) pb.grad[static_cast<std::size_t>(c)] += g[c];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Initialization helpers (leaves only)

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_gaussian(Tensor<T>& t, Rng& rng, double stddev = 1.0) {
  for (auto& v : t.values()) v = static_cast<T>(stddev * rng.gaussian());
}

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); the library-wide default.
template <typename T>
void init_fan_in(Tensor<T>& t, Rng& rng, std::int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  fill_uniform(t, rng, -bound, bound);
}

}  // namespace textsep::diff
