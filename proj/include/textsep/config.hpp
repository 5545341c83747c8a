#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "textsep/corpus.hpp"
#include "textsep/checkpoint.hpp"
#include "textsep/embed.hpp"
#include "textsep/errors.hpp"
#include "textsep/separator.hpp"
#include "textsep/tpe.hpp"
#include "textsep/trainer.hpp"
#include "textsep/tsr.hpp"

namespace textsep::config {

// Default config file location when no --config flag is given.
inline constexpr const char* kEnvConfigPath = "TEXTSEP_CONFIG";

// One tree, one section per module. Section defaults come straight from the
// struct defaults so there is a single source of truth.
inline nlohmann::json default_config() {
  nlohmann::json j;
  j["corpus"] = corpus::to_json(corpus::CorpusConfig{});
  j["tpe"] = model::to_json(model::TpeConfig{});
  j["dprnn"] = model::to_json(model::SepConfig{});
  j["tsr"] = model::to_json(model::TsrConfig{});

  train::TrainConfig tpe_train;
  tpe_train.lr = 5e-4;
  train::TrainConfig dprnn_train;
  dprnn_train.lr = 1e-3;
  train::TrainConfig tsr_train;
  tsr_train.lr = 1e-4;
  tsr_train.weight_decay = 1e-4;
  j["train_tpe"] = train::to_json(tpe_train);
  j["train_dprnn"] = train::to_json(dprnn_train);
  j["train_tsr"] = train::to_json(tsr_train);

  j["embed"] = {{"text_provider", "hash"},      // hash | precomputed
                {"audio_provider", "filterbank"},  // filterbank | precomputed
                {"seed", 1234},
                {"text_dim", 512},
                {"audio_dim", 512},
                {"text_path", ""},
                {"audio_path", ""}};

  j["eval"] = {{"split", "test"},
               {"limit", 0},
               {"bin_edges", nlohmann::json::array({-3.0, -1.0, 1.0, 3.0})}};
  return j;
}

inline nlohmann::json load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FileError("config: cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config: '" + path + "' is not valid JSON: " + e.what());
  }
}

// Deep-merges `patch` into `base`: objects merge recursively, everything else
// replaces. Lets a user config file state only the keys it changes.
inline void merge(nlohmann::json& base, const nlohmann::json& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (base.contains(it.key())) {
      merge(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

// `--set section.key=value`. The value is parsed as JSON when possible
// (numbers, bools, arrays), otherwise taken as a string.
inline void apply_override(nlohmann::json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("config: override must look like key.path=value, got '" + assignment + "'");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);

  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }

  nlohmann::json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("config: empty key segment in '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (!node->is_object() && !node->is_null()) {
      throw ConfigError("config: '" + path.substr(0, dot) + "' is not a section");
    }
    start = dot + 1;
  }
}

// Resolution order: defaults < config file (flag, else $TEXTSEP_CONFIG) < --set overrides.
inline nlohmann::json resolve(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
  nlohmann::json cfg = default_config();
  std::string path = config_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kEnvConfigPath)) path = env;
  }
  if (!path.empty()) merge(cfg, load_file(path));
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

inline std::string config_hash(const nlohmann::json& cfg) { return diff::hash_hex(cfg.dump()); }

// Every run drops the fully resolved config next to its outputs so results
// stay attributable to exact settings.
inline std::string write_snapshot(const nlohmann::json& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string path = (fs::path(out_dir) / "config.resolved.json").string();
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw FileError("config: cannot write snapshot '" + path + "'");
  f << cfg.dump(2) << '\n';
  return path;
}

// ---------------------------------------------------------------------------
// Embedding provider construction from the `embed` section.

inline std::unique_ptr<embed::TextProvider> make_text_provider(const nlohmann::json& e) {
  const std::string kind = e.value("text_provider", "hash");
  if (kind == "hash") {
    return std::make_unique<embed::HashTextProvider>(
        e.value("seed", std::uint64_t{1234}), e.value("text_dim", 512));
  }
  if (kind == "precomputed") {
    const std::string path = e.value("text_path", "");
    if (path.empty()) throw ConfigError("embed: precomputed text provider needs embed.text_path");
    return std::make_unique<embed::PrecomputedProvider>(path);
  }
  throw ConfigError("embed: unknown text_provider '" + kind + "'");
}

inline std::unique_ptr<embed::AudioProvider> make_audio_provider(const nlohmann::json& e) {
  const std::string kind = e.value("audio_provider", "filterbank");
  if (kind == "filterbank") {
    return std::make_unique<embed::FilterbankAudioProvider>(
        e.value("seed", std::uint64_t{1234}), e.value("audio_dim", 512));
  }
  if (kind == "precomputed") {
    const std::string path = e.value("audio_path", "");
    if (path.empty()) throw ConfigError("embed: precomputed audio provider needs embed.audio_path");
    return std::make_unique<embed::PrecomputedProvider>(path);
  }
  throw ConfigError("embed: unknown audio_provider '" + kind + "'");
}

}  // namespace textsep::config
