#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "textsep/corpus.hpp"
#include "textsep/embed.hpp"
#include "textsep/errors.hpp"
#include "textsep/metrics.hpp"
#include "textsep/rng.hpp"
#include "textsep/separator.hpp"
#include "textsep/tpe.hpp"
#include "textsep/tsr.hpp"

namespace textsep::evalkit {

inline constexpr int kReportSchemaVersion = 1;

struct EvalRecord {
  std::string id;
  double si_sdr = 0.0;
  double si_sdri = 0.0;
  double sdr = 0.0;
  double sdri = 0.0;
  bool correct = false;
  double interferer_sdr = 0.0;  // requested interference SDR (mean over interferers)
};

struct EvalAggregates {
  int count = 0;
  double mean_si_sdri = 0.0;
  double mean_sdri = 0.0;
  double accuracy_pct = 0.0;
};

struct EvalReport {
  std::string mode;
  std::string split;
  std::uint64_t seed = 0;
  std::vector<EvalRecord> records;  // manifest order
  EvalAggregates aggregates;
};

inline EvalAggregates compute_aggregates(const std::vector<EvalRecord>& records) {
  EvalAggregates a;
  a.count = static_cast<int>(records.size());
  if (records.empty()) return a;
  int correct = 0;
  for (const auto& r : records) {
    a.mean_si_sdri += r.si_sdri;
    a.mean_sdri += r.sdri;
    if (r.correct) ++correct;
  }
  a.mean_si_sdri /= static_cast<double>(a.count);
  a.mean_sdri /= static_cast<double>(a.count);
  a.accuracy_pct = 100.0 * static_cast<double>(correct) / static_cast<double>(a.count);
  return a;
}

// ---------------------------------------------------------------------------
// Core scorer: runs an arbitrary estimator over loaded examples and fills one
// record per example. Mode-specific entry points below wrap this.

using EstimateFn =
    std::function<std::vector<float>(const corpus::LoadedExample&, std::size_t index)>;

inline EvalReport evaluate_with(const std::vector<corpus::LoadedExample>& data,
                                const std::string& mode, const std::string& split,
                                std::uint64_t seed, const EstimateFn& estimator) {
  if (data.empty()) throw DataError("evaluate: no examples");
  EvalReport report;
  report.mode = mode;
  report.split = split;
  report.seed = seed;
  report.records.reserve(data.size());

  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& e = data[i];
    auto est = estimator(e, i);
    if (est.size() != e.target.size()) {
      throw DataError("evaluate: estimate length mismatch on '" + e.id + "'");
    }
    std::span<const float> est_s(est), tgt_s(e.target), mix_s(e.mixture);

    EvalRecord r;
    r.id = e.id;
    r.si_sdr = metrics::si_sdr(est_s, tgt_s);
    r.si_sdri = metrics::si_sdr_improvement(est_s, tgt_s, mix_s);
    r.sdr = metrics::sdr(est_s, tgt_s);
    r.sdri = metrics::sdr_improvement(est_s, tgt_s, mix_s);
    r.correct = metrics::extraction_correct(est_s, tgt_s, e.interferers);
    if (!e.interferer_sdrs.empty()) {
      double s = 0.0;
      for (double v : e.interferer_sdrs) s += v;
      r.interferer_sdr = s / static_cast<double>(e.interferer_sdrs.size());
    }
    report.records.push_back(std::move(r));
  }
  report.aggregates = compute_aggregates(report.records);
  return report;
}

// ---------------------------------------------------------------------------
// Mode-specific evaluation.

inline EvalReport evaluate_tpe(const std::vector<corpus::LoadedExample>& data,
                               const model::Tpe<float>& net, const embed::TextProvider& text,
                               const std::string& split, std::uint64_t seed) {
  embed::EmbeddingCache cache;
  auto estimator = [&](const corpus::LoadedExample& e, std::size_t) {
    audio::AudioSignal mix{e.mixture, e.sample_rate};
    return net.extract(mix, cache.text(text, e.prompt).pooled).samples;
  };
  return evaluate_with(data, "tpe", split, seed, estimator);
}

namespace detail {

template <typename Pick>
EvalReport evaluate_separated(const std::vector<corpus::LoadedExample>& data,
                              const model::Separator<float>& sep, const std::string& mode,
                              const std::string& split, std::uint64_t seed, Pick&& pick) {
  auto estimator = [&](const corpus::LoadedExample& e, std::size_t index) {
    audio::AudioSignal mix{e.mixture, e.sample_rate};
    auto streams = sep.separate(mix);
    const std::size_t chosen = pick(e, index, streams);
    return streams.at(chosen).samples;
  };
  return evaluate_with(data, mode, split, seed, estimator);
}

}  // namespace detail

// Oracle stream association: the stream that the jointly best permutation
// assigns to the target reference.
inline EvalReport evaluate_pit(const std::vector<corpus::LoadedExample>& data,
                               const model::Separator<float>& sep, const std::string& split,
                               std::uint64_t seed) {
  auto pick = [](const corpus::LoadedExample& e, std::size_t,
                 const std::vector<audio::AudioSignal>& streams) {
    std::vector<std::vector<float>> ests;
    for (const auto& s : streams) ests.push_back(s.samples);
    std::vector<std::vector<float>> refs;
    refs.push_back(e.target);
    for (const auto& v : e.interferers) refs.push_back(v);
    if (refs.size() != ests.size()) {
      throw DataError("evaluate: separator emits " + std::to_string(ests.size()) +
                      " streams but '" + e.id + "' has " + std::to_string(refs.size()) +
                      " sources");
    }
    const auto best = metrics::best_permutation(ests, refs);
    for (std::size_t i = 0; i < best.perm.size(); ++i) {
      if (best.perm[i] == 0) return i;
    }
    throw NumericError("evaluate: permutation lacks the target assignment");
  };
  return detail::evaluate_separated(data, sep, "pit", split, seed, pick);
}

// Two-stage pipeline: separate blindly, then let the matcher pick the stream
// whose audio embedding best fits the prompt.
inline EvalReport evaluate_dprnn_tsr(const std::vector<corpus::LoadedExample>& data,
                                     const model::Separator<float>& sep,
                                     const model::Tsr<float>& tsr,
                                     const embed::TextProvider& text,
                                     const embed::AudioProvider& audio_provider,
                                     const std::string& split, std::uint64_t seed) {
  embed::EmbeddingCache cache;
  auto pick = [&](const corpus::LoadedExample& e, std::size_t,
                  const std::vector<audio::AudioSignal>& streams) {
    std::vector<embed::AudioEmbedding> embs;
    for (const auto& s : streams) embs.push_back(audio_provider.embed_audio(s));
    auto [idx, probs] = tsr.select_stream(cache.text(text, e.prompt), embs);
    return static_cast<std::size_t>(idx);
  };
  return detail::evaluate_separated(data, sep, "dprnn_tsr", split, seed, pick);
}

// Chance baseline: a uniformly random stream, seeded per example.
inline EvalReport evaluate_random(const std::vector<corpus::LoadedExample>& data,
                                  const model::Separator<float>& sep, const std::string& split,
                                  std::uint64_t seed) {
  auto pick = [&](const corpus::LoadedExample&, std::size_t index,
                  const std::vector<audio::AudioSignal>& streams) {
    Rng rng(derive_seed(seed, 0xea70000u + static_cast<std::uint64_t>(index)));
    return static_cast<std::size_t>(
        model::random_association(static_cast<int>(streams.size()), rng));
  };
  return detail::evaluate_separated(data, sep, "random", split, seed, pick);
}

// ---------------------------------------------------------------------------
// Matching accuracy on ground-truth candidates: how often the matcher ranks
// the true source above the interferers when separation is perfect. Isolates
// stage-2 selection quality from stage-1 separation quality.

struct MatchAccuracy {
  int total = 0;
  int correct = 0;
  double accuracy_pct = 0.0;
};

inline MatchAccuracy clean_match_accuracy(const std::vector<corpus::LoadedExample>& data,
                                          const model::Tsr<float>& tsr,
                                          const embed::TextProvider& text,
                                          const embed::AudioProvider& audio_provider) {
  if (data.empty()) throw DataError("clean_match_accuracy: no examples");
  embed::EmbeddingCache cache;
  MatchAccuracy acc;
  for (const auto& e : data) {
    std::vector<embed::AudioEmbedding> cands;
    cands.push_back(audio_provider.embed_audio(audio::AudioSignal{e.target, e.sample_rate}));
    for (const auto& v : e.interferers) {
      cands.push_back(audio_provider.embed_audio(audio::AudioSignal{v, e.sample_rate}));
    }
    if (cands.size() < 2) throw DataError("clean_match_accuracy: '" + e.id + "' has no decoys");
    auto [idx, probs] = tsr.select_stream(cache.text(text, e.prompt), cands);
    ++acc.total;
    if (idx == 0) ++acc.correct;
  }
  acc.accuracy_pct = 100.0 * static_cast<double>(acc.correct) / static_cast<double>(acc.total);
  return acc;
}

// ---------------------------------------------------------------------------
// Report data: SI-SDRi histogram plus mean-metric-vs-interference-SDR curves.
// Empty bins stay null rather than zero.

struct Histogram {
  double lo = -30.0;
  double hi = 30.0;
  double width = 2.0;
  std::vector<std::int64_t> counts;  // tails clamp into the end bins

  std::int64_t total() const {
    std::int64_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

struct CurvePoint {
  double lo = 0.0, hi = 0.0;
  std::int64_t count = 0;
  std::optional<double> mean_si_sdri;
  std::optional<double> accuracy_pct;
};

struct ReportCurves {
  Histogram histogram;
  std::vector<CurvePoint> curve;  // over interference SDR bins
};

inline Histogram histogram_si_sdri(const std::vector<EvalRecord>& records, double lo = -30.0,
                                   double hi = 30.0, double width = 2.0) {
  if (!(hi > lo) || !(width > 0.0)) throw ConfigError("histogram: bad bin layout");
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.width = width;
  const auto nbins = static_cast<std::size_t>(std::ceil((hi - lo) / width));
  h.counts.assign(nbins, 0);
  for (const auto& r : records) {
    auto b = static_cast<std::int64_t>(std::floor((r.si_sdri - lo) / width));
    b = std::clamp<std::int64_t>(b, 0, static_cast<std::int64_t>(nbins) - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

inline ReportCurves report_curves(const EvalReport& report, const std::vector<double>& bin_edges,
                                  double hist_lo = -30.0, double hist_hi = 30.0,
                                  double hist_width = 2.0) {
  if (bin_edges.size() < 2) throw ConfigError("report_curves: need at least two bin edges");
  for (std::size_t i = 1; i < bin_edges.size(); ++i) {
    if (!(bin_edges[i] > bin_edges[i - 1])) {
      throw ConfigError("report_curves: bin edges must increase");
    }
  }
  ReportCurves out;
  out.histogram = histogram_si_sdri(report.records, hist_lo, hist_hi, hist_width);

  const std::size_t nbins = bin_edges.size() - 1;
  std::vector<double> sdri_sum(nbins, 0.0);
  std::vector<std::int64_t> n(nbins, 0), hits(nbins, 0);
  for (const auto& r : report.records) {
    // half-open bins [lo, hi); the final bin also takes its upper edge
    if (r.interferer_sdr < bin_edges.front() || r.interferer_sdr > bin_edges.back()) continue;
    std::size_t b = nbins - 1;
    for (std::size_t i = 0; i + 1 < bin_edges.size(); ++i) {
      if (r.interferer_sdr < bin_edges[i + 1]) {
        b = i;
        break;
      }
    }
    sdri_sum[b] += r.si_sdri;
    if (r.correct) ++hits[b];
    ++n[b];
  }
  for (std::size_t b = 0; b < nbins; ++b) {
    CurvePoint p;
    p.lo = bin_edges[b];
    p.hi = bin_edges[b + 1];
    p.count = n[b];
    if (n[b] > 0) {
      p.mean_si_sdri = sdri_sum[b] / static_cast<double>(n[b]);
      p.accuracy_pct = 100.0 * static_cast<double>(hits[b]) / static_cast<double>(n[b]);
    }
    out.curve.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization. JSON carries a schema version and no timestamps, so repeat
// runs serialize byte-identically.

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["mode"] = r.mode;
  j["split"] = r.split;
  j["seed"] = r.seed;
  j["aggregates"] = {{"count", r.aggregates.count},
                     {"mean_si_sdri", r.aggregates.mean_si_sdri},
                     {"mean_sdri", r.aggregates.mean_sdri},
                     {"accuracy_pct", r.aggregates.accuracy_pct}};
  auto recs = nlohmann::json::array();
  for (const auto& rec : r.records) {
    recs.push_back({{"id", rec.id},
                    {"si_sdr", rec.si_sdr},
                    {"si_sdri", rec.si_sdri},
                    {"sdr", rec.sdr},
                    {"sdri", rec.sdri},
                    {"correct", rec.correct},
                    {"interferer_sdr", rec.interferer_sdr}});
  }
  j["records"] = std::move(recs);
  // reserved for externally computed perceptual metrics
  j["pesqi"] = nullptr;
  j["stoii"] = nullptr;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", -1) != kReportSchemaVersion) {
    throw FormatError("report: unsupported schema_version");
  }
  EvalReport r;
  try {
    r.mode = j.at("mode").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("records")) {
      EvalRecord rec;
      rec.id = e.at("id").get<std::string>();
      rec.si_sdr = e.at("si_sdr").get<double>();
      rec.si_sdri = e.at("si_sdri").get<double>();
      rec.sdr = e.at("sdr").get<double>();
      rec.sdri = e.at("sdri").get<double>();
      rec.correct = e.at("correct").get<bool>();
      rec.interferer_sdr = e.at("interferer_sdr").get<double>();
      r.records.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("report: malformed JSON: " + std::string(ex.what()));
  }
  r.aggregates = compute_aggregates(r.records);
  return r;
}

inline nlohmann::json to_json(const ReportCurves& c) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  auto edges = nlohmann::json::array();
  for (std::size_t i = 0; i <= c.histogram.counts.size(); ++i) {
    edges.push_back(c.histogram.lo + static_cast<double>(i) * c.histogram.width);
  }
  j["histogram"] = {{"edges", std::move(edges)}, {"counts", c.histogram.counts}};
  auto curve = nlohmann::json::array();
  for (const auto& p : c.curve) {
    nlohmann::json q;
    q["lo"] = p.lo;
    q["hi"] = p.hi;
    q["count"] = p.count;
    q["mean_si_sdri"] = p.mean_si_sdri ? nlohmann::json(*p.mean_si_sdri) : nlohmann::json(nullptr);
    q["accuracy_pct"] = p.accuracy_pct ? nlohmann::json(*p.accuracy_pct) : nlohmann::json(nullptr);
    curve.push_back(std::move(q));
  }
  j["curve"] = std::move(curve);
  return j;
}

inline std::string to_csv(const EvalReport& r) {
  auto fmt = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  std::string out = "id,si_sdr,si_sdri,sdr,sdri,correct,interferer_sdr\n";
  for (const auto& rec : r.records) {
    out += rec.id + ',' + fmt(rec.si_sdr) + ',' + fmt(rec.si_sdri) + ',' + fmt(rec.sdr) + ',' +
           fmt(rec.sdri) + ',' + (rec.correct ? "1" : "0") + ',' + fmt(rec.interferer_sdr) + '\n';
  }
  return out;
}

}  // namespace textsep::evalkit
