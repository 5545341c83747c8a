#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "textsep/audio.hpp"
#include "textsep/corpus.hpp"
#include "textsep/errors.hpp"

using namespace textsep;
namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("textsep_corpus_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Independent spectral centroid: naive real DFT, centroid over |X|^2.
double spectral_centroid(const audio::AudioSignal& s) {
  const std::int64_t n = s.length();
  const std::int64_t n_bins = n / 2 + 1;
  double num = 0.0, den = 0.0;
  for (std::int64_t k = 0; k < n_bins; ++k) {
    double re = 0.0, im = 0.0;
    const double w = -2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
    for (std::int64_t t = 0; t < n; ++t) {
      const double a = w * static_cast<double>(t);
      re += s.samples[static_cast<std::size_t>(t)] * std::cos(a);
      im += s.samples[static_cast<std::size_t>(t)] * std::sin(a);
    }
    const double mag2 = re * re + im * im;
    const double freq = static_cast<double>(k) * s.sample_rate / static_cast<double>(n);
    num += freq * mag2;
    den += mag2;
  }
  REQUIRE(den > 0.0);
  return num / den;
}

double measured_sdr(const audio::AudioSignal& target, const audio::AudioSignal& other,
                    double alpha) {
  std::vector<float> scaled(other.samples);
  for (auto& v : scaled) v = static_cast<float>(alpha * v);
  return 20.0 * std::log10(audio::rms(target) / audio::rms(std::span<const float>(scaled)));
}

}  // namespace

TEST_CASE("token vocabulary determinism and frequency layout") {
  auto v1 = corpus::TokenVocabulary::make(42);
  auto v2 = corpus::TokenVocabulary::make(42);
  REQUIRE(v1.size() == 64);
  REQUIRE(v2.size() == 64);
  for (std::size_t i = 0; i < v1.size(); ++i) {
    CHECK(v1.rules[i].token == v2.rules[i].token);
    CHECK(v1.rules[i].center_hz == v2.rules[i].center_hz);
    CHECK(v1.rules[i].chirp == v2.rules[i].chirp);
  }

  const double nyquist = 8000.0 / 2.0;
  std::set<double> centers;
  for (const auto& r : v1.rules) {
    CHECK(r.center_hz < nyquist / 1.2);
    CHECK(r.center_hz >= 250.0);
    centers.insert(r.center_hz);
  }
  CHECK(centers.size() == v1.size());  // pairwise distinct

  auto v3 = corpus::TokenVocabulary::make(43);
  CHECK(v3.rules[0].center_hz != v1.rules[0].center_hz);

  CHECK_THROWS_AS(corpus::TokenVocabulary::make(1, 0), ConfigError);
  CHECK_THROWS_AS(corpus::TokenVocabulary::make(1, 65), ConfigError);
  CHECK_THROWS_AS(v1.rule("zz"), DataError);
  CHECK(v1.rule(v1.rules[5].token).center_hz == v1.rules[5].center_hz);
}

TEST_CASE("render_utterance determinism, peak bound, and error cases") {
  auto vocab = corpus::TokenVocabulary::make(7);
  auto spk = corpus::SpeakerProfile::make("spk000", 7);
  std::vector<std::string> tokens = {vocab.rules[0].token, vocab.rules[3].token,
                                     vocab.rules[9].token};

  auto a = corpus::render_utterance(vocab, tokens, spk, 1.0, 8000, 99);
  auto b = corpus::render_utterance(vocab, tokens, spk, 1.0, 8000, 99);
  REQUIRE(a.length() == 8000);
  CHECK(a.samples == b.samples);  // bitwise identical

  float peak = 0.0f;
  for (float v : a.samples) peak = std::max(peak, std::fabs(v));
  CHECK(peak <= 0.9f);
  CHECK(peak > 0.1f);

  auto c = corpus::render_utterance(vocab, tokens, spk, 1.0, 8000, 100);
  CHECK(a.samples != c.samples);  // seed matters

  auto spk2 = corpus::SpeakerProfile::make("spk001", 7);
  auto d = corpus::render_utterance(vocab, tokens, spk2, 1.0, 8000, 99);
  CHECK(a.samples != d.samples);  // speaker matters

  CHECK_THROWS_AS(corpus::render_utterance(vocab, {}, spk, 1.0, 8000, 1), DataError);
  CHECK_THROWS_AS(corpus::render_utterance(vocab, {"nope"}, spk, 1.0, 8000, 1), DataError);
  CHECK_THROWS_AS(corpus::render_utterance(vocab, tokens, spk, 0.2, 8000, 1), ConfigError);
}

TEST_CASE("different tokens have well separated spectral centroids") {
  auto vocab = corpus::TokenVocabulary::make(11);
  auto spk = corpus::SpeakerProfile::make("spk000", 11);
  auto s0 = corpus::render_utterance(vocab, {vocab.rules[0].token}, spk, 0.5, 8000, 5);
  auto s1 = corpus::render_utterance(vocab, {vocab.rules[1].token}, spk, 0.5, 8000, 5);
  const double c0 = spectral_centroid(s0);
  const double c1 = spectral_centroid(s1);
  INFO("centroids " << c0 << " vs " << c1);
  CHECK(std::fabs(c0 - c1) / std::min(c0, c1) > 0.10);
}

TEST_CASE("speaker profiles are distinct and deterministic") {
  auto p1 = corpus::SpeakerProfile::make("spk000", 3);
  auto p1b = corpus::SpeakerProfile::make("spk000", 3);
  auto p2 = corpus::SpeakerProfile::make("spk001", 3);
  CHECK(p1.pitch_base == p1b.pitch_base);
  CHECK(p1.harmonic_weights == p1b.harmonic_weights);
  CHECK(p1.pitch_base != p2.pitch_base);
  CHECK(p1.pitch_base >= 80.0);
  CHECK(p1.pitch_base <= 260.0);
  double total = 0.0;
  for (double w : p1.harmonic_weights) total += w;
  CHECK(total == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("alpha_for_sdr closed forms") {
  audio::AudioSignal s;
  s.sample_rate = 8000;
  Rng rng(17);
  for (int i = 0; i < 4000; ++i) s.samples.push_back(static_cast<float>(0.1 * rng.gaussian()));
  audio::AudioSignal v = s;  // identical rms

  CHECK(corpus::alpha_for_sdr(s, v, 0.0) == Catch::Approx(1.0).margin(1e-12));
  CHECK(corpus::alpha_for_sdr(s, v, 20.0) == Catch::Approx(0.1).margin(1e-12));
  CHECK(corpus::alpha_for_sdr(s, v, -6.0206) == Catch::Approx(2.0).epsilon(1e-4));

  // Achieved SDR matches the request to high precision for arbitrary signals.
  audio::AudioSignal w;
  w.sample_rate = 8000;
  for (int i = 0; i < 4000; ++i) w.samples.push_back(static_cast<float>(0.37 * rng.gaussian()));
  for (double sdr : {-3.0, 0.0, 2.5, 14.0}) {
    const double alpha = corpus::alpha_for_sdr(s, w, sdr);
    CHECK(measured_sdr(s, w, alpha) == Catch::Approx(sdr).margin(1e-6));
  }

  audio::AudioSignal zero;
  zero.sample_rate = 8000;
  zero.samples.assign(100, 0.0f);
  CHECK_THROWS_AS(corpus::alpha_for_sdr(s, zero, 0.0), DataError);
  CHECK_THROWS_AS(corpus::alpha_for_sdr(zero, s, 0.0), DataError);
}

TEST_CASE("make_mixture composes scaled constituents") {
  Rng rng(23);
  auto make_sig = [&](double amp) {
    audio::AudioSignal s;
    s.sample_rate = 8000;
    for (int i = 0; i < 2000; ++i) s.samples.push_back(static_cast<float>(amp * rng.gaussian()));
    return s;
  };
  auto s = make_sig(0.1);
  auto v1 = make_sig(0.2);
  auto v2 = make_sig(0.05);

  SECTION("two interferers at 0 dB each") {
    auto ex = corpus::make_mixture(s, {v1, v2}, {0.0, 0.0});
    REQUIRE(ex.alphas.size() == 2);
    CHECK(measured_sdr(ex.target, ex.interferers[0], ex.alphas[0]) ==
          Catch::Approx(0.0).margin(0.01));
    CHECK(measured_sdr(ex.target, ex.interferers[1], ex.alphas[1]) ==
          Catch::Approx(0.0).margin(0.01));
    double worst = 0.0;
    for (std::size_t k = 0; k < ex.mixture.samples.size(); ++k) {
      const double want = static_cast<double>(ex.target.samples[k]) +
                          ex.alphas[0] * ex.interferers[0].samples[k] +
                          ex.alphas[1] * ex.interferers[1].samples[k];
      worst = std::max(worst, std::fabs(want - ex.mixture.samples[k]));
    }
    CHECK(worst <= 1e-6);
  }

  SECTION("noise scaled against the target") {
    auto noise = corpus::make_noise(2000, 8000, 5);
    auto ex = corpus::make_mixture(s, {v1}, {1.5}, noise, 3.0, "hello");
    CHECK(20.0 * std::log10(audio::rms(ex.target) /
                            (ex.noise_alpha * audio::rms(*ex.noise))) ==
          Catch::Approx(3.0).margin(0.01));
    CHECK(ex.prompt == "hello");
    double worst = 0.0;
    for (std::size_t k = 0; k < ex.mixture.samples.size(); ++k) {
      const double want = static_cast<double>(ex.target.samples[k]) +
                          ex.alphas[0] * ex.interferers[0].samples[k] +
                          ex.noise_alpha * ex.noise->samples[k];
      worst = std::max(worst, std::fabs(want - ex.mixture.samples[k]));
    }
    CHECK(worst <= 1e-6);
  }

  SECTION("noise-only mixture is allowed, empty mixture is not") {
    auto noise = corpus::make_noise(2000, 8000, 5);
    CHECK_NOTHROW(corpus::make_mixture(s, {}, {}, noise, 0.0));
    CHECK_THROWS_AS(corpus::make_mixture(s, {}, {}), DataError);
  }

  SECTION("length and count mismatches") {
    auto short_sig = make_sig(0.1);
    short_sig.samples.resize(1000);
    CHECK_THROWS_AS(corpus::make_mixture(s, {short_sig}, {0.0}), DataError);
    CHECK_THROWS_AS(corpus::make_mixture(s, {v1}, {0.0, 1.0}), DataError);
  }
}

TEST_CASE("make_noise is deterministic with rms 0.1") {
  auto n1 = corpus::make_noise(4000, 8000, 9);
  auto n2 = corpus::make_noise(4000, 8000, 9);
  CHECK(n1.samples == n2.samples);
  CHECK(audio::rms(n1) == Catch::Approx(0.1).epsilon(1e-5));
  // Lowpassed: centroid well below white-noise centroid (~ sr/4).
  CHECK(spectral_centroid(n1) < 1200.0);
}

TEST_CASE("generate_corpus end to end") {
  corpus::CorpusConfig cfg;
  cfg.n_train = 6;
  cfg.n_valid = 2;
  cfg.n_test = 3;
  cfg.speakers_train = 5;
  cfg.speakers_valid = 2;
  cfg.speakers_test = 2;
  cfg.duration = 0.5;
  cfg.noise = true;

  auto dir1 = fresh_dir("run1");
  cfg.out_dir = dir1.string();
  const std::string manifest1 = corpus::generate_corpus(cfg, 2024);

  SECTION("byte-identical reruns, including audio payloads") {
    auto dir2 = fresh_dir("run2");
    corpus::CorpusConfig cfg2 = cfg;
    cfg2.out_dir = dir2.string();
    const std::string manifest2 = corpus::generate_corpus(cfg2, 2024);
    CHECK(read_file(manifest1) == read_file(manifest2));
    for (const auto& e : corpus::load_manifest(manifest1)) {
      CHECK(read_file(corpus::resolve_path(manifest1, e.mixture_path)) ==
            read_file(corpus::resolve_path(manifest2, e.mixture_path)));
      CHECK(read_file(corpus::resolve_path(manifest1, e.target_path)) ==
            read_file(corpus::resolve_path(manifest2, e.target_path)));
    }

    auto dir3 = fresh_dir("run3");
    corpus::CorpusConfig cfg3 = cfg;
    cfg3.out_dir = dir3.string();
    const std::string manifest3 = corpus::generate_corpus(cfg3, 2025);
    CHECK(read_file(manifest1) != read_file(manifest3));  // seed matters
  }

  SECTION("worker count does not change the output") {
    auto dir2 = fresh_dir("run_mt");
    corpus::CorpusConfig cfg2 = cfg;
    cfg2.out_dir = dir2.string();
    cfg2.workers = 3;
    const std::string manifest2 = corpus::generate_corpus(cfg2, 2024);
    CHECK(read_file(manifest1) == read_file(manifest2));
    for (const auto& e : corpus::load_manifest(manifest1)) {
      CHECK(read_file(corpus::resolve_path(manifest1, e.mixture_path)) ==
            read_file(corpus::resolve_path(manifest2, e.mixture_path)));
    }
  }

  SECTION("manifest structure and split disjointness") {
    auto entries = corpus::load_manifest(manifest1);
    REQUIRE(entries.size() == 11);

    std::set<std::string> train_spk, valid_spk, test_spk;
    std::set<std::string> ids;
    for (const auto& e : entries) {
      CHECK(ids.insert(e.id).second);
      auto& pool = e.split == "train" ? train_spk : (e.split == "valid" ? valid_spk : test_spk);
      for (const auto& s : e.speaker_ids) pool.insert(s);
      REQUIRE(e.interferer_paths.size() == 1);
      REQUIRE(e.alphas.size() == 1);
      REQUIRE(e.sdrs.size() == 1);
      CHECK(e.sdrs[0] >= -3.0);
      CHECK(e.sdrs[0] <= 3.0);
      CHECK(e.has_noise);
      CHECK(e.speaker_ids.size() == 2);
    }
    for (const auto& s : train_spk) {
      CHECK_FALSE(valid_spk.count(s));
      CHECK_FALSE(test_spk.count(s));
    }
    for (const auto& s : valid_spk) CHECK_FALSE(test_spk.count(s));
  }

  SECTION("prompt is a shuffled strict subset predictive of the target only") {
    for (const auto& e : corpus::load_manifest(manifest1)) {
      REQUIRE_FALSE(e.target_tokens.empty());
      REQUIRE(e.prompt_tokens.size() == 4);  // round(0.5 * 8)
      CHECK(e.prompt_tokens.size() < e.target_tokens.size());
      std::unordered_set<std::string> target_set(e.target_tokens.begin(), e.target_tokens.end());
      std::string joined;
      for (const auto& t : e.prompt_tokens) {
        CHECK(target_set.count(t));
        if (!joined.empty()) joined += ' ';
        joined += t;
      }
      CHECK(joined == e.prompt);
      for (const auto& toks : e.interferer_tokens) {
        std::unordered_set<std::string> iset(toks.begin(), toks.end());
        for (const auto& t : e.prompt_tokens) CHECK_FALSE(iset.count(t));
      }
    }
  }

  SECTION("on-disk decomposition and achieved SDRs") {
    for (const auto& e : corpus::load_manifest(manifest1)) {
      auto mix = audio::read_wav(corpus::resolve_path(manifest1, e.mixture_path));
      auto tgt = audio::read_wav(corpus::resolve_path(manifest1, e.target_path));
      auto v = audio::read_wav(corpus::resolve_path(manifest1, e.interferer_paths[0]));
      auto nz = audio::read_wav(corpus::resolve_path(manifest1, e.noise_path));
      REQUIRE(mix.length() == 4000);
      REQUIRE(tgt.length() == 4000);

      double worst = 0.0;
      for (std::size_t k = 0; k < mix.samples.size(); ++k) {
        const double want = static_cast<double>(tgt.samples[k]) + e.alphas[0] * v.samples[k] +
                            e.noise_alpha * nz.samples[k];
        worst = std::max(worst, std::fabs(want - mix.samples[k]));
      }
      CHECK(worst <= 1e-6);
      CHECK(measured_sdr(tgt, v, e.alphas[0]) == Catch::Approx(e.sdrs[0]).margin(0.01));
      CHECK(measured_sdr(tgt, nz, e.noise_alpha) == Catch::Approx(e.noise_sdr).margin(0.01));
    }
  }
}

TEST_CASE("single-speaker pools fall back to speaker reuse") {
  corpus::CorpusConfig cfg;
  cfg.n_train = 2;
  cfg.n_valid = 1;
  cfg.n_test = 1;
  cfg.speakers_train = 1;
  cfg.speakers_valid = 1;
  cfg.speakers_test = 1;
  cfg.duration = 0.5;
  auto dir = fresh_dir("tiny_pools");
  cfg.out_dir = dir.string();
  const std::string manifest = corpus::generate_corpus(cfg, 1);
  auto entries = corpus::load_manifest(manifest);
  REQUIRE(entries.size() == 4);
  for (const auto& e : entries) {
    // Interferer must reuse the lone pool speaker.
    CHECK(e.speaker_ids[0] == e.speaker_ids[1]);
  }
}

TEST_CASE("corpus config validation") {
  corpus::CorpusConfig cfg;
  cfg.out_dir = "/tmp/unused";

  corpus::CorpusConfig bad = cfg;
  bad.interferers = 3;
  CHECK_THROWS_AS(corpus::validate(bad), ConfigError);

  bad = cfg;
  bad.speakers_test = 0;
  CHECK_THROWS_AS(corpus::validate(bad), ConfigError);

  bad = cfg;
  bad.vocab_size = 8;
  bad.tokens_per_utterance = 8;
  CHECK_THROWS_AS(corpus::validate(bad), ConfigError);  // no room for disjoint interferer tokens
  bad.token_overlap = true;
  CHECK_NOTHROW(corpus::validate(bad));

  bad = cfg;
  bad.out_dir.clear();
  CHECK_THROWS_AS(corpus::validate(bad), ConfigError);

  bad = cfg;
  bad.sdr_min = 4.0;
  CHECK_THROWS_AS(corpus::validate(bad), ConfigError);
}

TEST_CASE("token overlap flag lets interferers speak prompt tokens") {
  corpus::CorpusConfig cfg;
  cfg.n_train = 30;
  cfg.n_valid = 1;
  cfg.n_test = 1;
  cfg.speakers_train = 4;
  cfg.speakers_valid = 1;
  cfg.speakers_test = 1;
  cfg.duration = 0.5;
  cfg.vocab_size = 10;
  cfg.tokens_per_utterance = 5;
  cfg.token_overlap = true;
  auto dir = fresh_dir("overlap");
  cfg.out_dir = dir.string();
  const std::string manifest = corpus::generate_corpus(cfg, 77);
  int overlaps = 0;
  for (const auto& e : corpus::load_manifest(manifest)) {
    std::unordered_set<std::string> prompt_set(e.prompt_tokens.begin(), e.prompt_tokens.end());
    for (const auto& toks : e.interferer_tokens) {
      for (const auto& t : toks) {
        if (prompt_set.count(t)) ++overlaps;
      }
    }
  }
  // With a 10-token vocabulary and 5-token sequences, overlap is near certain
  // across 32 examples.
  CHECK(overlaps > 0);
}

TEST_CASE("load_manifest error paths") {
  CHECK_THROWS_AS(corpus::load_manifest("/nonexistent/manifest.jsonl"), FileError);

  auto dir = fresh_dir("badmanifest");
  const std::string p1 = (dir / "garbage.jsonl").string();
  std::ofstream(p1) << "not json at all\n";
  CHECK_THROWS_AS(corpus::load_manifest(p1), FormatError);

  const std::string p2 = (dir / "missing.jsonl").string();
  std::ofstream(p2) << R"({"id": "x", "split": "train"})" << "\n";
  CHECK_THROWS_AS(corpus::load_manifest(p2), FormatError);

  const std::string p3 = (dir / "empty.jsonl").string();
  std::ofstream(p3) << "\n";
  CHECK_THROWS_AS(corpus::load_manifest(p3), FormatError);
}
