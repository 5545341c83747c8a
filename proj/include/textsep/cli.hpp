#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "textsep/audio.hpp"
#include "textsep/checkpoint.hpp"
#include "textsep/config.hpp"
#include "textsep/corpus.hpp"
#include "textsep/embed.hpp"
#include "textsep/errors.hpp"
#include "textsep/eval.hpp"
#include "textsep/metrics.hpp"
#include "textsep/separator.hpp"
#include "textsep/tpe.hpp"
#include "textsep/trainer.hpp"
#include "textsep/tsr.hpp"

namespace textsep::cli {

// Conditionally-required flags (CLI11 only knows unconditional ones). Maps to
// exit code 2 like any other usage problem.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ';';
  }
  return s;
}

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw FileError("cannot write '" + path + "'");
  f << content;
}

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::string(buf);
}

// Checkpoints embed their own model config, so tools never need the training
// config repeated on the command line.
inline diff::Checkpoint load_kind(const std::string& path, const std::string& kind) {
  auto ck = diff::load_checkpoint(path);
  if (ck.model_kind != kind) {
    throw ConfigError("checkpoint '" + path + "' holds a '" + ck.model_kind +
                      "' model, expected '" + kind + "'");
  }
  if (!ck.meta.contains("model_config")) {
    throw FormatError("checkpoint '" + path + "' lacks model_config metadata");
  }
  return ck;
}

inline model::Tpe<float> load_tpe(const std::string& path) {
  auto ck = load_kind(path, "tpe");
  model::Tpe<float> net(model::tpe_from_json(ck.meta.at("model_config")), 0);
  diff::load_into_store(ck, net.params());
  return net;
}

inline model::Separator<float> load_separator(const std::string& path) {
  auto ck = load_kind(path, "dprnn");
  model::Separator<float> net(model::sep_from_json(ck.meta.at("model_config")), 0);
  diff::load_into_store(ck, net.params());
  return net;
}

inline model::Tsr<float> load_tsr(const std::string& path) {
  auto ck = load_kind(path, "tsr");
  model::Tsr<float> net(model::tsr_from_json(ck.meta.at("model_config")), 0);
  diff::load_into_store(ck, net.params());
  return net;
}

}  // namespace detail

// Flags shared by every subcommand. `seed_set` distinguishes an explicit
// --seed from the config-file default.
struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::uint64_t seed = 1;
  bool seed_set = false;
  int workers = 1;
  bool workers_set = false;
};

inline void add_common(CLI::App* cmd, Common& c, bool out_required) {
  cmd->add_option("--config", c.config_path,
                  "Config file (default: $" + std::string(config::kEnvConfigPath) + ")");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set train_tpe.lr=1e-3");
  auto* seed = cmd->add_option("--seed", c.seed, "Root seed for all randomness in this run");
  auto* workers = cmd->add_option("--workers", c.workers, "Parallel workers (default 1)");
  auto* out = cmd->add_option("--out", c.out_dir, "Output directory");
  if (out_required) out->required();
  cmd->parse_complete_callback([&c, seed, workers] {
    c.seed_set = seed->count() > 0;
    c.workers_set = workers->count() > 0;
  });
}

inline nlohmann::json resolve_config(const Common& c) {
  return config::resolve(c.config_path, c.sets);
}

inline void snapshot(nlohmann::json cfg, const Common& c, const std::string& subcommand,
                     const nlohmann::json& run_extra = nlohmann::json::object()) {
  nlohmann::json run = run_extra;
  run["subcommand"] = subcommand;
  run["seed"] = c.seed;
  run["workers"] = c.workers;
  cfg["run"] = std::move(run);
  config::write_snapshot(cfg, c.out_dir);
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Each returns through normal control flow; errors travel
// as exceptions and are mapped to exit codes in run().

inline void cmd_generate_corpus(const Common& c) {
  auto cfg = resolve_config(c);
  auto ccfg = corpus::corpus_from_json(cfg.at("corpus"));
  if (!c.out_dir.empty()) ccfg.out_dir = c.out_dir;
  if (c.workers_set) ccfg.workers = c.workers;
  if (ccfg.out_dir.empty()) throw UsageError("generate-corpus needs --out or corpus.out_dir");
  cfg["corpus"] = corpus::to_json(ccfg);

  const std::string manifest = corpus::generate_corpus(ccfg, c.seed);
  Common snap = c;
  snap.out_dir = ccfg.out_dir;
  snapshot(cfg, snap, "generate-corpus");
  std::cout << "manifest " << manifest << "\n";
}

inline train::TrainConfig train_section(const nlohmann::json& cfg, const std::string& key,
                                        const Common& c, bool resume, int epochs_override) {
  auto tc = train::train_from_json(cfg.at(key));
  tc.out_dir = c.out_dir;
  if (c.seed_set) tc.seed = c.seed;
  tc.resume = resume;
  if (epochs_override > 0) tc.epochs = epochs_override;
  return tc;
}

inline void print_train_result(const train::TrainResult& r) {
  std::cout << "initial_val " << detail::fmt_g(r.initial_val) << "\n"
            << "best_val " << detail::fmt_g(r.best_val) << "\n"
            << "epochs " << r.epochs_run << "\n"
            << "best " << r.best_path << "\n"
            << "last " << r.last_path << "\n"
            << "log " << r.log_path << "\n";
}

inline void cmd_train_tpe(const Common& c, const std::string& manifest, bool resume, int epochs) {
  auto cfg = resolve_config(c);
  auto mcfg = model::tpe_from_json(cfg.at("tpe"));
  auto tc = train_section(cfg, "train_tpe", c, resume, epochs);
  auto text = config::make_text_provider(cfg.at("embed"));
  snapshot(cfg, c, "train-tpe", {{"manifest", manifest}});
  print_train_result(train::train_tpe(manifest, mcfg, tc, *text));
}

inline void cmd_train_dprnn(const Common& c, const std::string& manifest, bool resume, int epochs) {
  auto cfg = resolve_config(c);
  auto mcfg = model::sep_from_json(cfg.at("dprnn"));
  auto tc = train_section(cfg, "train_dprnn", c, resume, epochs);
  snapshot(cfg, c, "train-dprnn", {{"manifest", manifest}});
  print_train_result(train::train_dprnn(manifest, mcfg, tc));
}

inline void cmd_train_tsr(const Common& c, const std::string& manifest, bool resume, int epochs) {
  auto cfg = resolve_config(c);
  auto mcfg = model::tsr_from_json(cfg.at("tsr"));
  auto tc = train_section(cfg, "train_tsr", c, resume, epochs);
  auto text = config::make_text_provider(cfg.at("embed"));
  auto audio_p = config::make_audio_provider(cfg.at("embed"));
  snapshot(cfg, c, "train-tsr", {{"manifest", manifest}});
  print_train_result(train::train_tsr(manifest, mcfg, tc, *text, *audio_p));
}

inline void cmd_evaluate(const Common& c, const std::string& manifest, const std::string& mode,
                         const std::string& split_flag, int limit_flag,
                         const std::string& checkpoint, const std::string& matcher) {
  auto cfg = resolve_config(c);
  const auto& ecfg = cfg.at("eval");
  const std::string split = split_flag.empty() ? ecfg.value("split", "test") : split_flag;
  const int limit = limit_flag >= 0 ? limit_flag : ecfg.value("limit", 0);

  auto data = corpus::load_examples(manifest, split, static_cast<std::size_t>(limit));

  evalkit::EvalReport report;
  if (mode == "tpe") {
    auto net = detail::load_tpe(checkpoint);
    auto text = config::make_text_provider(cfg.at("embed"));
    report = evalkit::evaluate_tpe(data, net, *text, split, c.seed);
  } else if (mode == "pit") {
    auto sep = detail::load_separator(checkpoint);
    report = evalkit::evaluate_pit(data, sep, split, c.seed);
  } else if (mode == "random") {
    auto sep = detail::load_separator(checkpoint);
    report = evalkit::evaluate_random(data, sep, split, c.seed);
  } else if (mode == "dprnn_tsr") {
    if (matcher.empty()) throw UsageError("evaluate --mode dprnn_tsr needs --matcher");
    auto sep = detail::load_separator(checkpoint);
    auto tsr = detail::load_tsr(matcher);
    auto text = config::make_text_provider(cfg.at("embed"));
    auto audio_p = config::make_audio_provider(cfg.at("embed"));
    report = evalkit::evaluate_dprnn_tsr(data, sep, tsr, *text, *audio_p, split, c.seed);
  } else {
    throw UsageError("evaluate: unknown --mode '" + mode + "'");
  }

  namespace fs = std::filesystem;
  fs::create_directories(c.out_dir);
  const std::string report_path = (fs::path(c.out_dir) / "report.json").string();
  detail::write_text(report_path, evalkit::to_json(report).dump(2) + "\n");
  detail::write_text((fs::path(c.out_dir) / "records.csv").string(), evalkit::to_csv(report));
  snapshot(cfg, c, "evaluate",
           {{"manifest", manifest}, {"mode", mode}, {"split", split},
            {"checkpoint", checkpoint}, {"matcher", matcher}});

  const auto& a = report.aggregates;
  std::cout << "report " << report_path << "\n"
            << "count " << a.count << "\n"
            << "si_sdri " << detail::fmt_g(a.mean_si_sdri) << "\n"
            << "sdri " << detail::fmt_g(a.mean_sdri) << "\n"
            << "accuracy " << detail::fmt_g(a.accuracy_pct) << "\n";
}

inline void cmd_extract(const Common& c, const std::string& mixture, const std::string& prompt,
                        const std::string& checkpoint, const std::string& reference) {
  auto cfg = resolve_config(c);
  auto net = detail::load_tpe(checkpoint);
  auto text = config::make_text_provider(cfg.at("embed"));

  const auto mix = audio::read_wav(mixture);
  const auto est = net.extract(mix, text->embed_text(prompt).pooled);

  namespace fs = std::filesystem;
  fs::create_directories(c.out_dir);
  const std::string wav_path = (fs::path(c.out_dir) / "estimate.wav").string();
  audio::write_wav(est, wav_path);

  nlohmann::json side;
  side["mixture"] = mixture;
  side["prompt"] = prompt;
  side["checkpoint"] = checkpoint;
  side["sample_rate"] = est.sample_rate;
  side["samples"] = est.length();
  side["reference"] = reference.empty() ? nlohmann::json(nullptr) : nlohmann::json(reference);
  side["si_sdr"] = nullptr;
  side["si_sdri"] = nullptr;
  if (!reference.empty()) {
    const auto ref = audio::read_wav(reference);
    if (ref.length() != est.length()) {
      throw DataError("extract: reference length " + std::to_string(ref.length()) +
                      " does not match mixture length " + std::to_string(est.length()));
    }
    side["si_sdr"] = metrics::si_sdr(std::span<const float>(est.samples),
                                     std::span<const float>(ref.samples));
    side["si_sdri"] = metrics::si_sdr_improvement(std::span<const float>(est.samples),
                                                  std::span<const float>(ref.samples),
                                                  std::span<const float>(mix.samples));
  }
  detail::write_text((fs::path(c.out_dir) / "estimate.json").string(), side.dump(2) + "\n");
  snapshot(cfg, c, "extract", {{"mixture", mixture}, {"checkpoint", checkpoint}});
  std::cout << "estimate " << wav_path << "\n";
}

inline void cmd_separate(const Common& c, const std::string& mixture,
                         const std::string& checkpoint) {
  auto cfg = resolve_config(c);
  auto sep = detail::load_separator(checkpoint);
  const auto mix = audio::read_wav(mixture);
  const auto streams = sep.separate(mix);

  namespace fs = std::filesystem;
  fs::create_directories(c.out_dir);
  nlohmann::json side;
  side["mixture"] = mixture;
  side["checkpoint"] = checkpoint;
  side["sample_rate"] = mix.sample_rate;
  auto paths = nlohmann::json::array();
  for (std::size_t i = 0; i < streams.size(); ++i) {
    const std::string p = (fs::path(c.out_dir) / ("stream_" + std::to_string(i) + ".wav")).string();
    audio::write_wav(streams[i], p);
    paths.push_back(p);
    std::cout << "stream " << p << "\n";
  }
  side["streams"] = std::move(paths);
  detail::write_text((fs::path(c.out_dir) / "separate.json").string(), side.dump(2) + "\n");
  snapshot(cfg, c, "separate", {{"mixture", mixture}, {"checkpoint", checkpoint}});
}

inline void cmd_match(const Common& c, const std::string& prompt, const std::string& checkpoint,
                      const std::vector<std::string>& candidates) {
  if (candidates.empty()) throw UsageError("match needs at least one --candidate");
  auto cfg = resolve_config(c);
  auto tsr = detail::load_tsr(checkpoint);
  auto text = config::make_text_provider(cfg.at("embed"));
  auto audio_p = config::make_audio_provider(cfg.at("embed"));

  std::vector<embed::AudioEmbedding> embs;
  for (const auto& p : candidates) embs.push_back(audio_p->embed_audio(audio::read_wav(p)));
  auto [idx, probs] = tsr.select_stream(text->embed_text(prompt), embs);

  nlohmann::json out;
  out["chosen"] = idx;
  out["chosen_path"] = candidates[static_cast<std::size_t>(idx)];
  out["probabilities"] = probs;
  std::cout << out.dump() << "\n";

  if (!c.out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(c.out_dir);
    detail::write_text((fs::path(c.out_dir) / "match.json").string(), out.dump(2) + "\n");
    snapshot(cfg, c, "match", {{"checkpoint", checkpoint}});
  }
}

inline void cmd_report(const Common& c, const std::string& input) {
  auto cfg = resolve_config(c);
  std::ifstream f(input);
  if (!f) throw FileError("report: cannot open '" + input + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("report: '" + input + "' is not valid JSON: " + e.what());
  }
  auto report = evalkit::report_from_json(j);
  auto edges = cfg.at("eval").value("bin_edges", std::vector<double>{-3.0, -1.0, 1.0, 3.0});
  auto curves = evalkit::report_curves(report, edges);

  namespace fs = std::filesystem;
  fs::create_directories(c.out_dir);
  const std::string curves_path = (fs::path(c.out_dir) / "curves.json").string();
  detail::write_text(curves_path, evalkit::to_json(curves).dump(2) + "\n");
  detail::write_text((fs::path(c.out_dir) / "records.csv").string(), evalkit::to_csv(report));
  snapshot(cfg, c, "report", {{"input", input}});

  const auto& a = report.aggregates;
  std::cout << "curves " << curves_path << "\n"
            << "count " << a.count << "\n"
            << "histogram_total " << curves.histogram.total() << "\n"
            << "si_sdri " << detail::fmt_g(a.mean_si_sdri) << "\n"
            << "accuracy " << detail::fmt_g(a.accuracy_pct) << "\n";
}

// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"Text-cued target speaker extraction toolkit"};
  app.require_subcommand(1);

  Common common[9];

  auto* gen = app.add_subcommand("generate-corpus", "Synthesize a mixture corpus + manifest");
  add_common(gen, common[0], false);

  std::string manifest;
  bool resume = false;
  int epochs = 0;
  auto add_train_flags = [&](CLI::App* cmd, Common& c) {
    add_common(cmd, c, true);
    cmd->add_option("--manifest", manifest, "Corpus manifest path")->required();
    cmd->add_flag("--resume", resume, "Continue from last.ckpt in --out");
    cmd->add_option("--epochs", epochs, "Override the configured epoch count");
  };
  auto* ttpe = app.add_subcommand("train-tpe", "Train the text-conditioned extractor");
  add_train_flags(ttpe, common[1]);
  auto* tdpr = app.add_subcommand("train-dprnn", "Train the blind separator with PIT");
  add_train_flags(tdpr, common[2]);
  auto* ttsr = app.add_subcommand("train-tsr", "Train the text-to-stream matcher");
  add_train_flags(ttsr, common[3]);

  std::string mode, split_flag, checkpoint, matcher;
  int limit_flag = -1;
  auto* ev = app.add_subcommand("evaluate", "Score a model over a manifest split");
  add_common(ev, common[4], true);
  ev->add_option("--manifest", manifest, "Corpus manifest path")->required();
  ev->add_option("--mode", mode, "tpe | dprnn_tsr | pit | random")->required();
  ev->add_option("--split", split_flag, "Manifest split (default from config)");
  ev->add_option("--limit", limit_flag, "Evaluate at most N examples (0 = all)");
  ev->add_option("--checkpoint", checkpoint, "Model checkpoint (tpe or dprnn)")->required();
  ev->add_option("--matcher", matcher, "TSR checkpoint (dprnn_tsr mode)");

  std::string mixture, prompt, reference;
  auto* ex = app.add_subcommand("extract", "Extract the prompted speaker from a mixture WAV");
  add_common(ex, common[5], true);
  ex->add_option("--mixture", mixture, "Mixture WAV")->required();
  ex->add_option("--prompt", prompt, "Text prompt naming the target")->required();
  ex->add_option("--checkpoint", checkpoint, "TPE checkpoint")->required();
  ex->add_option("--reference", reference, "Clean reference WAV: adds SI-SDR to the sidecar");

  auto* sp = app.add_subcommand("separate", "Split a mixture WAV into all streams");
  add_common(sp, common[6], true);
  sp->add_option("--mixture", mixture, "Mixture WAV")->required();
  sp->add_option("--checkpoint", checkpoint, "DPRNN checkpoint")->required();

  std::vector<std::string> candidates;
  auto* ma = app.add_subcommand("match", "Rank candidate WAVs against a text prompt");
  add_common(ma, common[7], false);
  ma->add_option("--prompt", prompt, "Text prompt")->required();
  ma->add_option("--checkpoint", checkpoint, "TSR checkpoint")->required();
  ma->add_option("--candidate", candidates, "Candidate WAV (repeat per stream)");

  std::string input;
  auto* rp = app.add_subcommand("report", "Derive histogram + curves from an evaluation report");
  add_common(rp, common[8], true);
  rp->add_option("--input", input, "report.json produced by evaluate")->required();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) cmd_generate_corpus(common[0]);
    if (ttpe->parsed()) cmd_train_tpe(common[1], manifest, resume, epochs);
    if (tdpr->parsed()) cmd_train_dprnn(common[2], manifest, resume, epochs);
    if (ttsr->parsed()) cmd_train_tsr(common[3], manifest, resume, epochs);
    if (ev->parsed()) {
      cmd_evaluate(common[4], manifest, mode, split_flag, limit_flag, checkpoint, matcher);
    }
    if (ex->parsed()) cmd_extract(common[5], mixture, prompt, checkpoint, reference);
    if (sp->parsed()) cmd_separate(common[6], mixture, checkpoint);
    if (ma->parsed()) cmd_match(common[7], prompt, checkpoint, candidates);
    if (rp->parsed()) cmd_report(common[8], input);
    return 0;
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << detail::one_line(e.what()) << "\n";
    std::cerr << app.help();
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: usage: " << detail::one_line(e.what()) << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << detail::one_line(e.what()) << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "error: data: " << detail::one_line(e.what()) << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << detail::one_line(e.what()) << "\n";
    return 3;
  }
}

}  // namespace textsep::cli
