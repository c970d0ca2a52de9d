#pragma once

// Training configuration, the adaptive-moment optimizer and the training loop.

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "attnmvs/checkpoint.hpp"
#include "attnmvs/dataset.hpp"

namespace attnmvs {

struct TrainConfig {
  int levels = 2;
  int m_coarse = 48;
  int m_fine = 8;
  int groups = 4;
  int heads = 1;
  int train_views = 3;
  int eval_views = 5;
  int epochs = 8;
  int batch_size = 1;
  double learning_rate = 1e-3;
  std::vector<int> decay_epochs{3, 6};
  double decay_factor = 0.5;
  std::uint64_t seed = 0;
  int precision = 32;
  int max_steps = 0;         // 0 = run all epochs
  int checkpoint_every = 1;  // epochs between checkpoints; 0 disables them
  std::string aggregation = "group";
  std::vector<std::int64_t> feature_channels = default_feature_channels();

  NetworkConfig network() const {
    NetworkConfig n;
    n.levels = levels;
    n.m_coarse = m_coarse;
    n.m_fine = m_fine;
    n.groups = groups;
    n.heads = heads;
    n.feature_channels = feature_channels;
    if (aggregation == "group")
      n.aggregation = CostAggregation::GroupCorrelation;
    else if (aggregation == "variance")
      n.aggregation = CostAggregation::Variance;
    else
      throw ConfigError("aggregation must be 'group' or 'variance', got '" + aggregation + "'");
    return n;
  }

  void validate() const {
    network().validate();
    if (m_coarse < m_fine) throw ConfigError("m_coarse must be >= m_fine");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (feature_channels.back() % groups) throw ConfigError("groups must divide the feature channel count");
    if (train_views < 2 || eval_views < 2) throw ConfigError("train_views and eval_views must be >= 2");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(decay_factor > 0.0)) throw ConfigError("decay_factor must be positive");
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    if (max_steps < 0 || checkpoint_every < 0) throw ConfigError("max_steps and checkpoint_every must be >= 0");
  }

  /// Learning rate for a zero-based epoch: one decay per listed epoch already reached.
  double lr_at_epoch(int epoch) const {
    double lr = learning_rate;
    for (int e : decay_epochs)
      if (epoch >= e) lr *= decay_factor;
    return lr;
  }
};

namespace detail {

template <typename V>
std::string join(const std::vector<V>& xs) {
  std::ostringstream out;
  for (std::size_t i = 0; i < xs.size(); ++i) out << (i ? "," : "") << xs[i];
  return out.str();
}

template <typename V>
std::vector<V> split_list(const std::string& key, const std::string& text) {
  std::vector<V> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream is(item);
    V v{};
    if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError("bad list entry '" + item + "' for key " + key);
    out.push_back(v);
  }
  return out;
}

template <typename V>
V parse_scalar(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  V v{};
  if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError("bad value '" + text + "' for key " + key);
  return v;
}

}  // namespace detail

/// Flat key=value view of a config; keys match the config-file keys.
inline std::map<std::string, std::string> to_key_values(const TrainConfig& c) {
  std::ostringstream lr;
  lr.precision(17);
  lr << c.learning_rate;
  std::ostringstream df;
  df.precision(17);
  df << c.decay_factor;
  return {{"levels", std::to_string(c.levels)},
          {"m_coarse", std::to_string(c.m_coarse)},
          {"m_fine", std::to_string(c.m_fine)},
          {"groups", std::to_string(c.groups)},
          {"heads", std::to_string(c.heads)},
          {"train_views", std::to_string(c.train_views)},
          {"eval_views", std::to_string(c.eval_views)},
          {"epochs", std::to_string(c.epochs)},
          {"batch_size", std::to_string(c.batch_size)},
          {"learning_rate", lr.str()},
          {"decay_epochs", detail::join(c.decay_epochs)},
          {"decay_factor", df.str()},
          {"seed", std::to_string(c.seed)},
          {"precision", std::to_string(c.precision)},
          {"max_steps", std::to_string(c.max_steps)},
          {"checkpoint_every", std::to_string(c.checkpoint_every)},
          {"aggregation", c.aggregation},
          {"feature_channels", detail::join(c.feature_channels)}};
}

/// Applies one key=value setting; unknown keys are rejected.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& value) {
  using detail::parse_scalar;
  if (key == "levels") c.levels = parse_scalar<int>(key, value);
  else if (key == "m_coarse") c.m_coarse = parse_scalar<int>(key, value);
  else if (key == "m_fine") c.m_fine = parse_scalar<int>(key, value);
  else if (key == "groups") c.groups = parse_scalar<int>(key, value);
  else if (key == "heads") c.heads = parse_scalar<int>(key, value);
  else if (key == "train_views") c.train_views = parse_scalar<int>(key, value);
  else if (key == "eval_views") c.eval_views = parse_scalar<int>(key, value);
  else if (key == "epochs") c.epochs = parse_scalar<int>(key, value);
  else if (key == "batch_size") c.batch_size = parse_scalar<int>(key, value);
  else if (key == "learning_rate") c.learning_rate = parse_scalar<double>(key, value);
  else if (key == "decay_epochs") c.decay_epochs = detail::split_list<int>(key, value);
  else if (key == "decay_factor") c.decay_factor = parse_scalar<double>(key, value);
  else if (key == "seed") c.seed = parse_scalar<std::uint64_t>(key, value);
  else if (key == "precision") c.precision = parse_scalar<int>(key, value);
  else if (key == "max_steps") c.max_steps = parse_scalar<int>(key, value);
  else if (key == "checkpoint_every") c.checkpoint_every = parse_scalar<int>(key, value);
  else if (key == "aggregation") c.aggregation = value;
  else if (key == "feature_channels") c.feature_channels = detail::split_list<std::int64_t>(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Parses "key = value" lines; '#' starts a comment.
inline TrainConfig parse_train_config(const std::string& text, const std::string& source = "<config>",
                                      TrainConfig base = {}) {
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, line_no, "expected key = value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    try {
      apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ParseError(source, line_no, e.what());
    }
  }
  return base;
}

inline TrainConfig load_train_config(const fs::path& path, TrainConfig base = {}) {
  if (!fs::exists(path)) throw NotFound("config file not found: " + path.string());
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), path.string(), std::move(base));
}

inline std::string format_train_config(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, v] : to_key_values(c)) out += k + " = " + v + "\n";
  return out;
}

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m, v;
  std::int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static OptimizerState for_parameters(const ParameterList<T>& params) {
    OptimizerState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor.numel(), T(0));
      s.v.emplace_back(p.tensor.numel(), T(0));
    }
    return s;
  }
};

/// One bias-corrected adaptive-moment update from the gradients held by `params`.
template <typename T>
void optimizer_step(ParameterList<T>& params, OptimizerState<T>& state, double lr) {
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.numel())
      throw ShapeError("optimizer moments for " + params[i].name + " have the wrong size");
    if (checked_mode())
      for (T g : params[i].tensor.grad())
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + params[i].name);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].tensor.mutable_values();
    const auto grad = params[i].tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = static_cast<double>(grad[k]);
      const double mk = state.beta1 * static_cast<double>(m[k]) + (1.0 - state.beta1) * g;
      const double vk = state.beta2 * static_cast<double>(v[k]) + (1.0 - state.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      values[k] = static_cast<T>(static_cast<double>(values[k]) - lr * (mk / c1) / (std::sqrt(vk / c2) + state.eps));
    }
  }
}

/// Keeps freed blocks mapped so the large per-step tensors reuse warm pages
/// instead of faulting in fresh zeroed memory every step (glibc only).
inline void retain_freed_memory() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0;
  double loss = 0;
};

template <typename T>
struct TrainResult {
  NetworkWeights<T> weights;
  std::vector<StepRecord> steps;
  std::vector<double> epoch_mean_loss;
  std::vector<double> epoch_lr;
  fs::path last_checkpoint;
};

struct TrainOptions {
  fs::path out_dir;  // empty: no run log and no checkpoints
  std::function<void(const StepRecord&)> on_step;
};

template <typename T>
std::string checkpoint_metadata(const TrainConfig& cfg, int epoch, std::int64_t step) {
  std::string meta = format_train_config(cfg);
  meta += "epoch = " + std::to_string(epoch) + "\nstep = " + std::to_string(step) + "\n";
  return meta;
}

/// Network weights for a checkpoint written by train(); returns the config stored with it.
template <typename T>
std::pair<NetworkWeights<T>, TrainConfig> load_network(const fs::path& path) {
  const auto ckpt = load_checkpoint(path);
  std::string meta;
  std::istringstream in(ckpt.metadata);
  for (std::string line; std::getline(in, line);) {
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key != "epoch" && key != "step") meta += line + "\n";
  }
  const auto cfg = parse_train_config(meta, path.string());
  auto weights = NetworkWeights<T>::init(cfg.network(), cfg.seed);
  auto params = weights.parameters();
  restore_parameters(ckpt, params);
  return {std::move(weights), cfg};
}

/// Shuffled passes over `dataset`; gradients of a mini-batch are averaged before each update.
template <typename T>
TrainResult<T> train(const TrainConfig& cfg, const std::vector<SceneSample<T>>& dataset, const TrainOptions& opt = {}) {
  cfg.validate();
  if (dataset.empty()) throw EmptyInput("training dataset is empty");
  for (const auto& s : dataset)
    if (s.levels() != cfg.levels)
      throw ConfigError("sample " + s.name + " has a " + std::to_string(s.levels() + 1) +
                        "-level ground truth, config expects " + std::to_string(cfg.levels + 1));
  retain_freed_memory();
  const auto net = cfg.network();
  TrainResult<T> result;
  result.weights = NetworkWeights<T>::init(net, cfg.seed);
  auto params = result.weights.parameters();
  auto state = OptimizerState<T>::for_parameters(params);

  std::ofstream log;
  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    log.open(opt.out_dir / "run_log.jsonl");
    if (!log) throw IoError("cannot open run log in " + opt.out_dir.string());
  }
  auto save = [&](int epoch) {
    Checkpoint ckpt;
    ckpt.metadata = checkpoint_metadata<T>(cfg, epoch, state.step);
    store_parameters(ckpt, params);
    const auto path = opt.out_dir / ("checkpoint_epoch" + std::to_string(epoch) + ".ckpt");
    save_checkpoint(path, ckpt);
    save_checkpoint(opt.out_dir / "latest.ckpt", ckpt);
    result.last_checkpoint = path;
  };

  std::mt19937_64 rng(cfg.seed ^ 0x5eedULL);
  std::vector<std::size_t> order(dataset.size());
  bool done = false;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    const double lr = cfg.lr_at_epoch(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0;
    std::size_t epoch_count = 0;
    for (std::size_t start = 0; start < order.size() && !done; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      zero_grads(params);
      double batch_loss = 0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& sample = dataset[order[k]];
        Tape<T> tape;
        double value = 0;
        try {
          TapeScope<T> scope(tape);
          const auto levels = infer_depth_pyramid(sample.images, sample.cams, result.weights, net);
          std::vector<Tensor<T>> estimates;
          for (const auto& l : levels) estimates.push_back(l.depth);
          auto loss = pyramid_loss(estimates, sample.gt_coarse_to_fine());
          value = static_cast<double>(loss.item());
          if (!std::isfinite(value)) throw NumericError("non-finite loss");
          if (end - start > 1) loss = scale(loss, T(1) / static_cast<T>(end - start));
          tape.backward(loss);
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " at step " + std::to_string(state.step + 1) + " (sample " +
                             sample.name + "); last good checkpoint: " +
                             (result.last_checkpoint.empty() ? std::string("none") : result.last_checkpoint.string()));
        }
        batch_loss += value;
      }
      batch_loss /= static_cast<double>(end - start);
      optimizer_step(params, state, lr);
      const StepRecord rec{state.step, epoch, lr, batch_loss};
      result.steps.push_back(rec);
      if (log.is_open()) {
        log << nlohmann::json{{"step", rec.step}, {"epoch", rec.epoch}, {"lr", rec.lr}, {"loss", rec.loss}}.dump()
            << '\n';
      }
      if (opt.on_step) opt.on_step(rec);
      epoch_sum += batch_loss * static_cast<double>(end - start);
      epoch_count += end - start;
      if (cfg.max_steps > 0 && state.step >= cfg.max_steps) done = true;
    }
    result.epoch_mean_loss.push_back(epoch_sum / static_cast<double>(epoch_count));
    result.epoch_lr.push_back(lr);
    if (log.is_open()) {
      log << nlohmann::json{{"epoch_end", epoch}, {"mean_loss", result.epoch_mean_loss.back()}, {"lr", lr}}.dump()
          << '\n';
      log.flush();
    }
    if (!opt.out_dir.empty() && cfg.checkpoint_every > 0 && ((epoch + 1) % cfg.checkpoint_every == 0 || done ||
                                                             epoch + 1 == cfg.epochs))
      save(epoch);
  }
  return result;
}

}  // namespace attnmvs
