#pragma once

#include <cstdint>
#include <vector>

#include "textsep/ops.hpp"
#include "textsep/tensor.hpp"

namespace textsep::losses {

using diff::Tensor;

// Differentiable SI-SDR in dB, composed from taped primitives so the backward
// pass needs no hand-derived formula. Mirrors metrics::si_sdr: mean-center
// both signals, normalize the estimate, project onto the reference, ratio of
// projection to residual energy, clamped to +-60 dB.
//
// est and ref must have equal shapes; they are treated as flat signals.
template <typename T>
Tensor<T> si_sdr_db(const Tensor<T>& est, const Tensor<T>& ref) {
  using namespace diff;
  constexpr double kEps = 1e-8;
  auto e0 = shift(est, neg(mean(est)));
  auto r0 = shift(ref, neg(mean(ref)));

  auto est_energy = sum(mul(e0, e0));
  auto ref_energy = sum(mul(r0, r0));
  auto inv_est = reciprocal(scalar_add(est_energy, kEps));  // 1/|e|^2

  auto dot = sum(mul(e0, r0));
  auto c = mul(dot, reciprocal(scalar_add(ref_energy, kEps)));
  auto proj = scale(r0, c);
  auto resid = sub(e0, proj);

  // Scale both energies by 1/|e|^2: equivalent to normalizing the estimate
  // up front, which keeps the epsilon guards scale invariant.
  auto sig = mul(sum(mul(proj, proj)), inv_est);
  auto err = mul(sum(mul(resid, resid)), inv_est);

  constexpr double kTenOverLn10 = 4.342944819032518;
  auto ratio = sub(log_op(scalar_add(sig, kEps)), log_op(scalar_add(err, kEps)));
  return clamp(scalar_mul(ratio, kTenOverLn10), -60.0, 60.0);
}

// Mean over the batch of -si_sdr(est_n, ref_n); est and ref are [N, T].
template <typename T>
Tensor<T> neg_si_sdr_loss(const Tensor<T>& est, const Tensor<T>& ref) {
  using namespace diff;
  if (est.shape() != ref.shape()) {
    throw ShapeError("neg_si_sdr_loss: shape mismatch " + shape_str(est.shape()) + " vs " +
                     shape_str(ref.shape()));
  }
  if (est.ndim() != 2) throw ShapeError("neg_si_sdr_loss: expects [N, T]");
  const std::int64_t n = est.dim(0);
  std::vector<Tensor<T>> terms;
  terms.reserve(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    terms.push_back(neg(si_sdr_db(slice(est, 0, i, 1), slice(ref, 0, i, 1))));
  }
  return mean(stack_scalars(terms));
}

}  // namespace textsep::losses
