#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "textsep/checkpoint.hpp"
#include "textsep/corpus.hpp"
#include "textsep/embed.hpp"
#include "textsep/errors.hpp"
#include "textsep/losses.hpp"
#include "textsep/rng.hpp"
#include "textsep/separator.hpp"
#include "textsep/tensor.hpp"
#include "textsep/tpe.hpp"
#include "textsep/tsr.hpp"

namespace textsep::train {

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay. Moments are indexed in parameter-store
// order and serialized by name as opt.m.<param> / opt.v.<param>.

template <typename T>
class Adam {
 public:
  explicit Adam(diff::ParameterStore<T>& store, double weight_decay = 0.0, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : store_(store), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : store.all()) {
      m_.emplace_back(p.tensor.values().size(), T(0));
      v_.emplace_back(p.tensor.values().size(), T(0));
    }
  }

  std::int64_t step_count() const { return t_; }
  double weight_decay() const { return wd_; }

  void step(double lr) {
    if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto& params = store_.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& vals = params[i].tensor.values();
      const auto& grad = params[i].tensor.grad_view();
      if (!grad.empty() && grad.size() != vals.size()) {
        throw ShapeError("adam: gradient size mismatch for '" + params[i].name + "'");
      }
      for (std::size_t j = 0; j < vals.size(); ++j) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
        if (!std::isfinite(g)) {
          throw NumericError("adam: non-finite gradient in parameter '" + params[i].name + "'");
        }
        double m = beta1_ * static_cast<double>(m_[i][j]) + (1.0 - beta1_) * g;
        double v = beta2_ * static_cast<double>(v_[i][j]) + (1.0 - beta2_) * g * g;
        m_[i][j] = static_cast<T>(m);
        v_[i][j] = static_cast<T>(v);
        const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + eps_);
        const double decay = lr * wd_ * static_cast<double>(vals[j]);
        vals[j] = static_cast<T>(static_cast<double>(vals[j]) - update - decay);
      }
    }
  }

  std::vector<diff::NamedArray> state_arrays() const {
    std::vector<diff::NamedArray> out;
    const auto& params = store_.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      diff::NamedArray m{"opt.m." + params[i].name, params[i].tensor.shape(), {}};
      diff::NamedArray v{"opt.v." + params[i].name, params[i].tensor.shape(), {}};
      m.data.assign(m_[i].begin(), m_[i].end());
      v.data.assign(v_[i].begin(), v_[i].end());
      out.push_back(std::move(m));
      out.push_back(std::move(v));
    }
    return out;
  }

  void load_state(const diff::Checkpoint& ck, std::int64_t step_count) {
    const auto& params = store_.all();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto* m = ck.find("opt.m." + params[i].name);
      const auto* v = ck.find("opt.v." + params[i].name);
      if (!m || !v) {
        throw FormatError("adam: checkpoint lacks optimizer state for '" + params[i].name + "'");
      }
      if (m->data.size() != m_[i].size() || v->data.size() != v_[i].size()) {
        throw ShapeError("adam: optimizer state size mismatch for '" + params[i].name + "'");
      }
      for (std::size_t j = 0; j < m_[i].size(); ++j) {
        m_[i][j] = static_cast<T>(m->data[j]);
        v_[i][j] = static_cast<T>(v->data[j]);
      }
    }
    t_ = step_count;
  }

 private:
  diff::ParameterStore<T>& store_;
  double wd_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm. max_norm <= 0 disables clipping.
template <typename T>
double clip_global_norm(diff::ParameterStore<T>& store, double max_norm) {
  double total = 0.0;
  for (auto& p : store.all()) {
    for (const T& g : p.tensor.grad_view()) {
      const double x = static_cast<double>(g);
      if (!std::isfinite(x)) {
        throw NumericError("clip: non-finite gradient in parameter '" + p.name + "'");
      }
      total += x * x;
    }
  }
  const double norm = std::sqrt(total);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& p : store.all()) {
      for (T& g : p.tensor.grad()) g *= scale;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Validation-keyed learning-rate schedule. Two independent patience counters
// track epochs since the best validation loss improved: one halves the rate,
// the other stops the run. Both reset only on strict improvement.

struct ScheduleConfig {
  double min_lr = 1e-8;
  int halve_patience = 2;
  int stop_patience = 10;
};

struct ScheduleState {
  double lr = 0.0;
  double best = std::numeric_limits<double>::infinity();
  int since_improve_halve = 0;
  int since_improve_stop = 0;
  bool stop = false;
};

// Returns true when validation improved strictly.
inline bool schedule_update(ScheduleState& s, double validation_loss, const ScheduleConfig& c) {
  if (validation_loss < s.best) {
    s.best = validation_loss;
    s.since_improve_halve = 0;
    s.since_improve_stop = 0;
    return true;
  }
  ++s.since_improve_halve;
  ++s.since_improve_stop;
  if (s.since_improve_halve >= c.halve_patience) {
    s.lr = std::max(s.lr / 2.0, c.min_lr);
    s.since_improve_halve = 0;
  }
  if (s.since_improve_stop >= c.stop_patience) s.stop = true;
  return false;
}

inline nlohmann::json schedule_to_json(const ScheduleState& s) {
  nlohmann::json j;
  j["lr"] = s.lr;
  if (std::isfinite(s.best)) {
    j["best"] = s.best;
  } else {
    j["best"] = nullptr;
  }
  j["since_improve_halve"] = s.since_improve_halve;
  j["since_improve_stop"] = s.since_improve_stop;
  j["stop"] = s.stop;
  return j;
}

inline ScheduleState schedule_from_json(const nlohmann::json& j) {
  ScheduleState s;
  s.lr = j.at("lr").get<double>();
  s.best = j.at("best").is_null() ? std::numeric_limits<double>::infinity()
                                  : j.at("best").get<double>();
  s.since_improve_halve = j.at("since_improve_halve").get<int>();
  s.since_improve_stop = j.at("since_improve_stop").get<int>();
  s.stop = j.at("stop").get<bool>();
  return s;
}

// ---------------------------------------------------------------------------
// Loop configuration shared by all three model kinds.

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double clip_norm = 5.0;
  double min_lr = 1e-8;
  int halve_patience = 2;
  int stop_patience = 10;
  int checkpoint_every = 1;     // epochs between last.ckpt refreshes
  double max_minutes = 0.0;     // wall-clock cap; 0 = unlimited
  int max_steps_per_epoch = 0;  // 0 = full pass
  int max_train_examples = 0;   // 0 = all
  int max_val_examples = 0;     // 0 = all
  std::uint64_t seed = 1;
  std::string out_dir;
  std::string train_split = "train";
  std::string val_split = "valid";
  bool resume = false;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (c.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError("train: lr must be positive");
  if (c.weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
  if (c.min_lr <= 0.0) throw ConfigError("train: min_lr must be positive");
  if (c.halve_patience < 1 || c.stop_patience < 1) {
    throw ConfigError("train: patience values must be >= 1");
  }
  if (c.checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be >= 1");
  if (c.out_dir.empty()) throw ConfigError("train: out_dir is required");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"min_lr", c.min_lr},
          {"halve_patience", c.halve_patience},
          {"stop_patience", c.stop_patience},
          {"checkpoint_every", c.checkpoint_every},
          {"max_minutes", c.max_minutes},
          {"max_steps_per_epoch", c.max_steps_per_epoch},
          {"max_train_examples", c.max_train_examples},
          {"max_val_examples", c.max_val_examples},
          {"seed", c.seed},
          {"train_split", c.train_split},
          {"val_split", c.val_split}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.halve_patience = j.value("halve_patience", c.halve_patience);
  c.stop_patience = j.value("stop_patience", c.stop_patience);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.max_minutes = j.value("max_minutes", c.max_minutes);
  c.max_steps_per_epoch = j.value("max_steps_per_epoch", c.max_steps_per_epoch);
  c.max_train_examples = j.value("max_train_examples", c.max_train_examples);
  c.max_val_examples = j.value("max_val_examples", c.max_val_examples);
  c.seed = j.value("seed", c.seed);
  c.train_split = j.value("train_split", c.train_split);
  c.val_split = j.value("val_split", c.val_split);
  return c;
}

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::string best_path, last_path, log_path;
  double initial_val = 0.0;
  double best_val = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
  std::int64_t steps_run = 0;
  bool stopped_early = false;  // schedule fired
  bool timed_out = false;      // wall-clock cap fired
  std::vector<EpochRow> rows;
};

namespace detail {

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::string(buf);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generic epoch loop. The model specifics live in two callables:
//   batch_loss(indices, step_seed) -> scalar graph over the given examples
//   val_loss() -> mean validation objective (computed without taping)
// Everything else — shuffling, Adam, clipping, the schedule, CSV logging,
// best/last checkpoints, resume — is shared.

template <typename T>
TrainResult run_training(
    const std::string& model_kind, const nlohmann::json& model_config_json,
    diff::ParameterStore<T>& store, std::size_t n_train, const TrainConfig& cfg,
    const std::function<diff::Tensor<T>(std::span<const std::size_t>, std::uint64_t)>& batch_loss,
    const std::function<double()>& val_loss_fn) {
  validate(cfg);
  if (n_train == 0) throw DataError("train: empty training split");
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  const std::string config_hash = diff::hash_hex(model_config_json.dump());
  TrainResult result;
  result.best_path = (fs::path(cfg.out_dir) / "best.ckpt").string();
  result.last_path = (fs::path(cfg.out_dir) / "last.ckpt").string();
  result.log_path = (fs::path(cfg.out_dir) / "train_log.csv").string();

  Adam<T> adam(store, cfg.weight_decay);
  ScheduleConfig sched_cfg{cfg.min_lr, cfg.halve_patience, cfg.stop_patience};
  ScheduleState sched;
  sched.lr = cfg.lr;

  int start_epoch = 0;
  std::int64_t global_step = 0;
  if (cfg.resume && fs::exists(result.last_path)) {
    auto ck = diff::load_checkpoint(result.last_path);
    if (ck.model_kind != model_kind) {
      throw ConfigError("resume: checkpoint is for model '" + ck.model_kind + "', expected '" +
                        model_kind + "'");
    }
    if (ck.config_hash != config_hash) {
      throw ConfigError("resume: checkpoint config hash " + ck.config_hash +
                        " does not match current config " + config_hash);
    }
    diff::load_into_store(ck, store);
    adam.load_state(ck, ck.meta.at("adam_steps").get<std::int64_t>());
    sched = schedule_from_json(ck.meta.at("schedule"));
    start_epoch = ck.meta.at("next_epoch").get<int>();
    global_step = ck.meta.at("global_step").get<std::int64_t>();
  }

  const bool fresh_log = !fs::exists(result.log_path) || start_epoch == 0;
  std::ofstream log(result.log_path, fresh_log ? std::ios::trunc : std::ios::app);
  if (!log) throw FileError("train: cannot open log '" + result.log_path + "'");
  if (fresh_log) log << "epoch,train_loss,val_loss,lr\n";

  result.initial_val = val_loss_fn();
  result.best_val = sched.best;

  auto save = [&](const std::string& path, int next_epoch) {
    auto arrays = diff::store_arrays(store);
    auto opt = adam.state_arrays();
    arrays.insert(arrays.end(), opt.begin(), opt.end());
    nlohmann::json meta;
    meta["next_epoch"] = next_epoch;
    meta["global_step"] = global_step;
    meta["adam_steps"] = adam.step_count();
    meta["schedule"] = schedule_to_json(sched);
    meta["model_config"] = model_config_json;  // lets tools rebuild the model from the file alone
    diff::save_checkpoint(path, model_kind, config_hash, arrays, meta);
  };

  const auto t0 = std::chrono::steady_clock::now();
  auto minutes_elapsed = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
  };

  std::size_t usable = n_train;
  if (cfg.max_train_examples > 0) {
    usable = std::min(usable, static_cast<std::size_t>(cfg.max_train_examples));
  }

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    if (sched.stop) break;

    std::vector<std::size_t> order(usable);
    for (std::size_t i = 0; i < usable; ++i) order[i] = i;
    Rng shuffler(derive_seed(cfg.seed, 0x3e0c0000u + static_cast<std::uint64_t>(epoch)));
    shuffler.shuffle(order);

    const double lr_used = sched.lr;
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    int steps = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps_per_epoch > 0 && steps >= cfg.max_steps_per_epoch) break;
      const std::size_t take = std::min(static_cast<std::size_t>(cfg.batch_size),
                                        order.size() - pos);
      std::span<const std::size_t> batch(order.data() + pos, take);

      store.zero_grads();
      auto loss = batch_loss(batch, derive_seed(cfg.seed, 0x57e90000u +
                                                              static_cast<std::uint64_t>(global_step)));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(steps));
      }
      loss.backward();
      clip_global_norm(store, cfg.clip_norm);
      adam.step(sched.lr);
      loss_sum += lv * static_cast<double>(take);
      loss_count += take;
      ++steps;
      ++global_step;
      ++result.steps_run;
      if (cfg.max_minutes > 0.0 && minutes_elapsed() > cfg.max_minutes) {
        result.timed_out = true;
        break;
      }
    }

    const double train_mean = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    const double val = val_loss_fn();
    if (!std::isfinite(val)) {
      throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    }

    EpochRow row{epoch, train_mean, val, lr_used};
    result.rows.push_back(row);
    log << row.epoch << ',' << detail::fmt_g(row.train_loss) << ',' << detail::fmt_g(row.val_loss)
        << ',' << detail::fmt_g(row.lr) << '\n';
    log.flush();

    const bool improved = schedule_update(sched, val, sched_cfg);
    result.best_val = sched.best;
    ++result.epochs_run;

    const bool final_epoch = epoch + 1 >= cfg.epochs || sched.stop || result.timed_out;
    if (improved) save(result.best_path, epoch + 1);
    if (final_epoch || (epoch + 1) % cfg.checkpoint_every == 0) save(result.last_path, epoch + 1);
    if (sched.stop) result.stopped_early = true;
    if (sched.stop || result.timed_out) break;
  }

  // A run that never improved still leaves a best checkpoint for consumers.
  if (!fs::exists(result.best_path)) save(result.best_path, start_epoch + result.epochs_run);
  return result;
}

// ---------------------------------------------------------------------------
// Batch assembly helpers.

namespace detail {

template <typename T>
diff::Tensor<T> rows_tensor(const std::vector<const std::vector<float>*>& rows,
                            std::int64_t t_len) {
  auto out = diff::Tensor<T>::zeros({static_cast<std::int64_t>(rows.size()), t_len});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::int64_t t = 0; t < t_len; ++t) {
      out.values()[i * static_cast<std::size_t>(t_len) + static_cast<std::size_t>(t)] =
          static_cast<T>((*rows[i])[static_cast<std::size_t>(t)]);
    }
  }
  return out;
}

inline std::int64_t common_length(const std::vector<corpus::LoadedExample>& data,
                                  std::span<const std::size_t> idx) {
  std::int64_t t = std::numeric_limits<std::int64_t>::max();
  for (std::size_t i : idx) {
    t = std::min(t, static_cast<std::int64_t>(data[i].mixture.size()));
  }
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model-specific drivers. Each preloads its split into memory, precomputes
// embeddings where needed, and delegates to run_training.

inline TrainResult train_tpe(const std::string& manifest_path, const model::TpeConfig& mcfg,
                             const TrainConfig& cfg, const embed::TextProvider& text) {
  model::validate(mcfg);
  if (text.dim() != mcfg.text_dim) {
    throw ConfigError("train_tpe: provider dim " + std::to_string(text.dim()) +
                      " != config text_dim " + std::to_string(mcfg.text_dim));
  }
  auto train_set = corpus::load_examples(manifest_path, cfg.train_split,
                                         static_cast<std::size_t>(std::max(0, cfg.max_train_examples)));
  auto val_set = corpus::load_examples(manifest_path, cfg.val_split,
                                       static_cast<std::size_t>(std::max(0, cfg.max_val_examples)));

  auto pooled = [&](const corpus::LoadedExample& e) { return text.embed_text(e.prompt).pooled; };
  std::vector<std::vector<float>> train_text, val_text;
  for (const auto& e : train_set) train_text.push_back(pooled(e));
  for (const auto& e : val_set) val_text.push_back(pooled(e));

  model::Tpe<float> net(mcfg, cfg.seed);

  auto batch_graph = [&](const std::vector<corpus::LoadedExample>& data,
                         const std::vector<std::vector<float>>& texts,
                         std::span<const std::size_t> idx) {
    const std::int64_t t_len = detail::common_length(data, idx);
    std::vector<const std::vector<float>*> mix, ref, emb;
    for (std::size_t i : idx) {
      mix.push_back(&data[i].mixture);
      ref.push_back(&data[i].target);
      emb.push_back(&texts[i]);
    }
    auto mix_t = detail::rows_tensor<float>(mix, t_len);
    auto ref_t = detail::rows_tensor<float>(ref, t_len);
    auto emb_t = detail::rows_tensor<float>(emb, static_cast<std::int64_t>(texts[idx[0]].size()));
    return losses::neg_si_sdr_loss(net.forward(mix_t, emb_t), ref_t);
  };

  auto batch_loss = [&](std::span<const std::size_t> idx, std::uint64_t) {
    return batch_graph(train_set, train_text, idx);
  };
  auto val_loss = [&]() {
    diff::NoGradGuard guard;
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t pos = 0; pos < val_set.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t take =
          std::min(static_cast<std::size_t>(cfg.batch_size), val_set.size() - pos);
      std::vector<std::size_t> idx(take);
      for (std::size_t i = 0; i < take; ++i) idx[i] = pos + i;
      sum += static_cast<double>(batch_graph(val_set, val_text, idx).item()) *
             static_cast<double>(take);
      count += take;
    }
    return sum / static_cast<double>(count);
  };

  return run_training<float>("tpe", model::to_json(mcfg), net.params(), train_set.size(), cfg,
                             batch_loss, val_loss);
}

inline TrainResult train_dprnn(const std::string& manifest_path, const model::SepConfig& mcfg,
                               const TrainConfig& cfg) {
  model::validate(mcfg);
  auto train_set = corpus::load_examples(manifest_path, cfg.train_split,
                                         static_cast<std::size_t>(std::max(0, cfg.max_train_examples)));
  auto val_set = corpus::load_examples(manifest_path, cfg.val_split,
                                       static_cast<std::size_t>(std::max(0, cfg.max_val_examples)));
  for (const auto& e : train_set) {
    if (static_cast<int>(e.interferers.size()) + 1 != mcfg.streams) {
      throw DataError("train_dprnn: example '" + e.id + "' has " +
                      std::to_string(e.interferers.size() + 1) + " sources, config expects " +
                      std::to_string(mcfg.streams));
    }
  }

  model::Separator<float> net(mcfg, cfg.seed);

  auto batch_graph = [&](const std::vector<corpus::LoadedExample>& data,
                         std::span<const std::size_t> idx) {
    const std::int64_t t_len = detail::common_length(data, idx);
    std::vector<const std::vector<float>*> mix;
    for (std::size_t i : idx) mix.push_back(&data[i].mixture);
    auto mix_t = detail::rows_tensor<float>(mix, t_len);

    // Reference streams in source order: target first, then scaled interferers.
    auto ref_t = diff::Tensor<float>::zeros(
        {static_cast<std::int64_t>(idx.size()), mcfg.streams, t_len});
    auto* dst = ref_t.data();
    for (std::size_t bi = 0; bi < idx.size(); ++bi) {
      const auto& e = data[idx[bi]];
      const std::vector<float>* streams_src[4] = {&e.target, nullptr, nullptr, nullptr};
      for (std::size_t s = 0; s < e.interferers.size(); ++s) streams_src[s + 1] = &e.interferers[s];
      for (int s = 0; s < mcfg.streams; ++s) {
        const auto& src = *streams_src[s];
        std::copy(src.begin(), src.begin() + t_len,
                  dst + (bi * static_cast<std::size_t>(mcfg.streams) + static_cast<std::size_t>(s)) *
                            static_cast<std::size_t>(t_len));
      }
    }
    return model::pit_loss(net.forward(mix_t), ref_t).loss;
  };

  auto batch_loss = [&](std::span<const std::size_t> idx, std::uint64_t) {
    return batch_graph(train_set, idx);
  };
  auto val_loss = [&]() {
    diff::NoGradGuard guard;
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t pos = 0; pos < val_set.size(); pos += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t take =
          std::min(static_cast<std::size_t>(cfg.batch_size), val_set.size() - pos);
      std::vector<std::size_t> idx(take);
      for (std::size_t i = 0; i < take; ++i) idx[i] = pos + i;
      sum += static_cast<double>(batch_graph(val_set, idx).item()) * static_cast<double>(take);
      count += take;
    }
    return sum / static_cast<double>(count);
  };

  return run_training<float>("dprnn", model::to_json(mcfg), net.params(), train_set.size(), cfg,
                             batch_loss, val_loss);
}

inline TrainResult train_tsr(const std::string& manifest_path, const model::TsrConfig& mcfg,
                             const TrainConfig& cfg, const embed::TextProvider& text,
                             const embed::AudioProvider& audio_provider) {
  model::validate(mcfg);
  if (text.dim() != mcfg.emb_dim || audio_provider.dim() != mcfg.emb_dim) {
    throw ConfigError("train_tsr: provider dims must equal emb_dim " +
                      std::to_string(mcfg.emb_dim));
  }

  // Precomputed per-example embeddings; candidates are the sources as they
  // appear inside the mixture (target at unit gain, interferers scaled).
  struct Item {
    embed::TextEmbedding prompt;
    embed::AudioEmbedding target;
    std::vector<embed::AudioEmbedding> interferers;
  };
  auto load_items = [&](const std::string& split, std::size_t limit) {
    auto set = corpus::load_examples(manifest_path, split, limit);
    std::vector<Item> items;
    items.reserve(set.size());
    for (const auto& e : set) {
      Item it;
      it.prompt = text.embed_text(e.prompt);
      audio::AudioSignal sig{e.target, e.sample_rate};
      it.target = audio_provider.embed_audio(sig, e.id + ".target");
      for (std::size_t k = 0; k < e.interferers.size(); ++k) {
        audio::AudioSignal v{e.interferers[k], e.sample_rate};
        it.interferers.push_back(audio_provider.embed_audio(v, e.id + ".v" + std::to_string(k)));
      }
      if (it.interferers.empty()) {
        throw DataError("train_tsr: example '" + e.id + "' has no interferer candidates");
      }
      items.push_back(std::move(it));
    }
    return items;
  };
  auto train_items = load_items(cfg.train_split,
                                static_cast<std::size_t>(std::max(0, cfg.max_train_examples)));
  auto val_items = load_items(cfg.val_split,
                              static_cast<std::size_t>(std::max(0, cfg.max_val_examples)));

  model::Tsr<float> net(mcfg, cfg.seed);

  auto example_loss = [&](const Item& it, int k_neg, std::uint64_t batch_seed, std::size_t self) {
    std::vector<const embed::AudioEmbedding*> interferers;
    for (const auto& v : it.interferers) interferers.push_back(&v);
    std::vector<const embed::AudioEmbedding*> pool;
    if (k_neg > 0) {
      for (std::size_t i = 0; i < train_items.size(); ++i) {
        if (i != self) pool.push_back(&train_items[i].target);
      }
    }
    Rng rng(derive_seed(batch_seed, self));
    auto batch = model::make_training_batch(it.prompt, it.target, interferers, pool, k_neg, rng);
    return net.tsr_loss(net.batch_probs(batch), batch.labels);
  };

  auto batch_loss = [&](std::span<const std::size_t> idx, std::uint64_t step_seed) {
    std::vector<diff::Tensor<float>> terms;
    for (std::size_t i : idx) {
      terms.push_back(example_loss(train_items[i], mcfg.k_neg, step_seed, i));
    }
    return diff::mean(diff::stack_scalars(terms));
  };
  // Validation scores only the real candidate set (no sampled negatives), so
  // it is deterministic without any per-epoch state.
  auto val_loss = [&]() {
    diff::NoGradGuard guard;
    double sum = 0.0;
    for (const auto& it : val_items) {
      std::vector<diff::Tensor<float>> cands;
      std::vector<int> labels;
      cands.push_back(net.seq_tensor(it.target.frames));
      labels.push_back(1);
      for (const auto& v : it.interferers) {
        cands.push_back(net.seq_tensor(v.frames));
        labels.push_back(0);
      }
      auto probs = net.match_logits(net.seq_tensor(it.prompt.tokens), cands);
      sum += static_cast<double>(net.tsr_loss(probs, labels).item());
    }
    return sum / static_cast<double>(val_items.size());
  };

  return run_training<float>("tsr", model::to_json(mcfg), net.params(), train_items.size(), cfg,
                             batch_loss, val_loss);
}

}  // namespace textsep::train
