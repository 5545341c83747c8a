#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "textsep/errors.hpp"

namespace textsep::metrics {

// Evaluation-side metric oracles. All accumulation is double precision and
// independent of the autodiff stack, so these double as ground truth for the
// differentiable training losses.

constexpr double kEps = 1e-8;
constexpr double kClampDb = 60.0;

namespace detail {

inline void check_pair(std::size_t a, std::size_t b, const char* op) {
  if (a == 0 || b == 0) throw DataError(std::string(op) + ": empty signal");
  if (a != b) throw DataError(std::string(op) + ": length mismatch");
}

inline double clamp_db(double db) { return std::clamp(db, -kClampDb, kClampDb); }

}  // namespace detail

// Scale-invariant SDR: both signals are mean-centered, the estimate is
// projected onto the reference, and the energy ratio of projection to residual
// is reported in dB, clamped to +-60.
inline double si_sdr(std::span<const double> estimate, std::span<const double> reference) {
  detail::check_pair(estimate.size(), reference.size(), "si_sdr");
  const std::size_t n = estimate.size();
  double me = 0.0, mr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    me += estimate[i];
    mr += reference[i];
  }
  me /= static_cast<double>(n);
  mr /= static_cast<double>(n);

  double dot = 0.0, ref_energy = 0.0, est_energy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = estimate[i] - me;
    const double r = reference[i] - mr;
    dot += e * r;
    ref_energy += r * r;
    est_energy += e * e;
  }
  if (ref_energy <= 0.0) throw DataError("si_sdr: reference has zero energy");

  // The metric is scale invariant in exact arithmetic; normalizing the
  // centered estimate makes it scale invariant with the epsilon guards too.
  const double g = est_energy > 0.0 ? 1.0 / std::sqrt(est_energy) : 0.0;
  const double c = g * dot / (ref_energy + kEps);
  const double sig = c * c * ref_energy;
  double err = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = g * (estimate[i] - me) - c * (reference[i] - mr);
    err += d * d;
  }
  return detail::clamp_db(10.0 * std::log10((sig + kEps) / (err + kEps)));
}

// Plain SDR: energy of the reference over energy of the estimation error,
// without mean removal or rescaling.
inline double sdr(std::span<const double> estimate, std::span<const double> reference) {
  detail::check_pair(estimate.size(), reference.size(), "sdr");
  double sig = 0.0, err = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = estimate[i] - reference[i];
    sig += reference[i] * reference[i];
    err += d * d;
  }
  if (sig <= 0.0) throw DataError("sdr: reference has zero energy");
  return detail::clamp_db(10.0 * std::log10((sig + kEps) / (err + kEps)));
}

namespace detail {

inline std::vector<double> widen(std::span<const float> x) {
  return std::vector<double>(x.begin(), x.end());
}

}  // namespace detail

inline double si_sdr(std::span<const float> estimate, std::span<const float> reference) {
  const auto e = detail::widen(estimate);
  const auto r = detail::widen(reference);
  return si_sdr(std::span<const double>(e), std::span<const double>(r));
}

inline double sdr(std::span<const float> estimate, std::span<const float> reference) {
  const auto e = detail::widen(estimate);
  const auto r = detail::widen(reference);
  return sdr(std::span<const double>(e), std::span<const double>(r));
}

// Improvements over scoring the unprocessed mixture against the reference.
// Scoring the mixture itself is identically zero.
template <typename T>
double si_sdr_improvement(std::span<const T> estimate, std::span<const T> reference,
                          std::span<const T> mixture) {
  return si_sdr(estimate, reference) - si_sdr(mixture, reference);
}

template <typename T>
double sdr_improvement(std::span<const T> estimate, std::span<const T> reference,
                       std::span<const T> mixture) {
  return sdr(estimate, reference) - sdr(mixture, reference);
}

// Extraction counts as correct when the estimate matches the target strictly
// better than every interferer, in SI-SDR terms.
template <typename T>
bool extraction_correct(std::span<const T> estimate, std::span<const T> target,
                        const std::vector<std::vector<T>>& interferers) {
  const double target_score = si_sdr(estimate, std::span<const T>(target));
  for (const auto& v : interferers) {
    if (target_score <= si_sdr(estimate, std::span<const T>(v))) return false;
  }
  return true;
}

struct PermutationResult {
  std::vector<int> perm;  // perm[i] = reference index assigned to estimate i
  double mean_si_sdr = 0.0;
};

// Exhaustive best assignment of estimates to references by mean SI-SDR.
// Factorial in the stream count; callers keep I <= 4.
template <typename T>
PermutationResult best_permutation(const std::vector<std::vector<T>>& estimates,
                                   const std::vector<std::vector<T>>& references) {
  if (estimates.empty() || estimates.size() != references.size()) {
    throw DataError("best_permutation: need equal non-zero stream counts");
  }
  const int count = static_cast<int>(estimates.size());
  if (count > 4) throw ConfigError("best_permutation: more than 4 streams");

  std::vector<std::vector<double>> score(static_cast<std::size_t>(count),
                                         std::vector<double>(static_cast<std::size_t>(count)));
  for (int i = 0; i < count; ++i) {
    for (int j = 0; j < count; ++j) {
      score[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
          si_sdr(std::span<const T>(estimates[static_cast<std::size_t>(i)]),
                 std::span<const T>(references[static_cast<std::size_t>(j)]));
    }
  }

  std::vector<int> perm(static_cast<std::size_t>(count));
  std::iota(perm.begin(), perm.end(), 0);
  PermutationResult best;
  best.mean_si_sdr = -std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (int i = 0; i < count; ++i) {
      total += score[static_cast<std::size_t>(i)][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    const double mean = total / count;
    if (mean > best.mean_si_sdr) {
      best.mean_si_sdr = mean;
      best.perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace textsep::metrics
