#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sedforge/annotations.hpp"
#include "sedforge/error.hpp"
#include "sedforge/features.hpp"
#include "sedforge/inference.hpp"
#include "sedforge/metrics.hpp"
#include "sedforge/nn/network.hpp"
#include "sedforge/random.hpp"

namespace sedforge {

// ---- loss -------------------------------------------------------------------

inline constexpr double kProbabilityClamp = 1e-7;

template <class S>
struct LossResult {
  double loss = 0;
  Tensor<S> grad;  // d loss / d probabilities
  double weight = 0;  // number of unmasked (class, frame) terms
};

/// Masked binary cross-entropy averaged over unmasked (k, t). Probabilities
/// are clamped to [1e-7, 1 - 1e-7]. Shapes: p, y [B, K, T] (or [K, T]),
/// mask [B, T] (or [T]) or empty for all ones.
template <class S>
LossResult<S> bce_loss(const Tensor<S>& p, const Tensor<S>& y, const std::vector<S>& mask = {}) {
  if (p.shape() != y.shape())
    throw ShapeError("probabilities " + shape_string(p.shape()) + " and targets " +
                     shape_string(y.shape()) + " differ in shape");
  if (p.rank() != 2 && p.rank() != 3) throw ShapeError("loss expects [K, T] or [B, K, T]");
  const std::size_t B = p.rank() == 3 ? p.dim(0) : 1, K = p.dim(p.rank() - 2),
                    T = p.dim(p.rank() - 1);
  if (!mask.empty() && mask.size() != B * T)
    throw ShapeError("loss mask has " + std::to_string(mask.size()) + " entries, expected " +
                     std::to_string(B * T));
  LossResult<S> r;
  r.grad = Tensor<S>(p.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) r.weight += mask.empty() ? 1.0 : mask[b * T + t];
  r.weight *= static_cast<double>(K);
  if (r.weight == 0) return r;
  double sum = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < T; ++t) {
        const double m = mask.empty() ? 1.0 : static_cast<double>(mask[b * T + t]);
        if (m == 0) continue;
        const std::size_t i = (b * K + k) * T + t;
        const double pc = std::clamp(static_cast<double>(p[i]), kProbabilityClamp,
                                     1.0 - kProbabilityClamp);
        const double yi = y[i];
        sum += m * -(yi * std::log(pc) + (1 - yi) * std::log(1 - pc));
        const bool inside = p[i] > kProbabilityClamp && p[i] < 1.0 - kProbabilityClamp;
        r.grad[i] = inside ? static_cast<S>(m * (pc - yi) / (pc * (1 - pc)) / r.weight) : S(0);
      }
  r.loss = sum / r.weight;
  return r;
}

// ---- Adam -------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool operator==(const AdamConfig&) const = default;
};

struct OptimizerState {
  std::vector<Tensor<float>> m, v;
  std::uint64_t step = 0;
};

template <class S>
OptimizerState init_optimizer(const std::vector<nn::ParamRef<S>>& params) {
  OptimizerState st;
  for (const auto& p : params) {
    st.m.emplace_back(p.value->shape());
    st.v.emplace_back(p.value->shape());
  }
  return st;
}

/// One bias-corrected Adam update of every parameter from its gradient.
template <class S>
void adam_step(const std::vector<nn::ParamRef<S>>& params, OptimizerState& st,
               const AdamConfig& cfg) {
  if (st.m.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = *params[i].grad;
    if (g.shape() != params[i].value->shape() || st.m[i].shape() != g.shape())
      throw ShapeError("gradient shape mismatch for " + params[i].name);
    for (std::size_t j = 0; j < g.size(); ++j)
      if (!std::isfinite(static_cast<double>(g[j])))
        throw NumericError("non-finite gradient in " + params[i].name + " at element " +
                           std::to_string(j));
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = *params[i].value;
    const auto& g = *params[i].grad;
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1 - cfg.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = cfg.learning_rate * (mj / c1) / (std::sqrt(vj / c2) + cfg.epsilon);
      w[j] = static_cast<S>(w[j] - update);
    }
  }
}

// ---- data -------------------------------------------------------------------

/// A normalized feature matrix and its frame-level targets.
struct LabeledRecording {
  std::string id;
  std::string scene = "default";
  FeatureMatrix features;
  EventRoll targets;
};

/// Any-active labels per window of `length` frames: [K, windows].
inline Tensor<std::uint8_t> window_labels(const EventRoll& roll, std::size_t length) {
  if (length == 0) throw ConfigError("window length must be at least 1 frame");
  const std::size_t K = roll.num_classes(), T = roll.num_frames();
  Tensor<std::uint8_t> out({K, (T + length - 1) / length});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t t = 0; t < T; ++t) out.at(k, t / length) |= roll.at(k, t) ? 1 : 0;
  return out;
}

// ---- configuration and state ------------------------------------------------

struct TrainConfig {
  std::size_t sequence_length = 128;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 500;
  std::size_t patience = 100;
  AdamConfig adam;
  std::string val_metric = "f1";  // f1, er, loss or eer
  double threshold = kDefaultThreshold;
  std::uint64_t seed = 0;
  bool operator==(const TrainConfig&) const = default;
};

inline bool metric_higher_is_better(const std::string& metric) { return metric == "f1"; }

inline void validate(const TrainConfig& c, bool tagging) {
  if (c.sequence_length < 1) throw ConfigError("sequence length must be at least 1");
  if (c.batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (c.patience < 1) throw ConfigError("patience must be at least 1");
  if (!(c.adam.learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (!(c.adam.beta1 >= 0 && c.adam.beta1 < 1 && c.adam.beta2 >= 0 && c.adam.beta2 < 1))
    throw ConfigError("Adam moment decay rates must lie in [0, 1)");
  if (c.val_metric != "f1" && c.val_metric != "er" && c.val_metric != "loss" &&
      c.val_metric != "eer")
    throw ConfigError("unknown validation metric '" + c.val_metric + "'");
  if (c.val_metric == "eer" && !tagging)
    throw ConfigError("validation metric eer needs a tagging network");
  if (!(c.threshold > 0 && c.threshold < 1)) throw ConfigError("threshold must lie in (0, 1)");
}

struct TrainLogEntry {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double val_metric = 0;
  std::string event;  // "", "best", "stop", "best,stop"
  bool operator==(const TrainLogEntry&) const = default;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;

  bool operator==(const TrainLog&) const = default;

  static std::string format_entry(const TrainLogEntry& e) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%s\n", e.epoch, e.train_loss, e.val_metric,
                  e.event.empty() ? "-" : e.event.c_str());
    return buf;
  }

  std::string format() const {
    std::string out = "epoch\ttrain_loss\tval_metric\tevent\n";
    for (const auto& e : entries) out += format_entry(e);
    return out;
  }
};

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  nn::NamedTensors<float> best_weights;
  OptimizerState optimizer;
  std::size_t epochs_done = 0;
  std::size_t best_epoch = 0;  // 0: initial weights
  double best_metric = 0;
  bool has_best = false;
  std::size_t epochs_since_best = 0;
  bool stopped = false;
  TrainLog log;
};

inline TrainState start_training(nn::Network<float>& net) {
  TrainState st;
  st.best_weights = net.state();
  st.optimizer = init_optimizer(net.parameters());
  return st;
}

// ---- evaluation helpers -------------------------------------------------------

/// Validation score of the network in inference mode.
inline double validation_metric(const nn::Network<float>& net,
                                const std::vector<LabeledRecording>& data,
                                const TrainConfig& cfg) {
  const std::size_t L = cfg.sequence_length;
  const bool tagging = net.tagging();
  SegmentStats stats;
  double loss_sum = 0, loss_weight = 0;
  std::vector<Tensor<std::uint8_t>> labels;
  std::vector<Tensor<float>> scores;
  for (const auto& rec : data) {
    const Tensor<float> p = predict_matrix(net, rec.features.values, L);
    Tensor<float> y;
    EventRoll ref, pred;
    if (tagging) {
      const Tensor<std::uint8_t> lab = window_labels(rec.targets, L);
      y = Tensor<float>(lab.shape());
      for (std::size_t i = 0; i < lab.size(); ++i) y[i] = lab[i];
      ref = EventRoll(rec.targets.classes, lab.dim(1), rec.targets.frame_hop_seconds * L);
      ref.activity = lab;
      labels.push_back(lab);
      scores.push_back(p);
    } else {
      ref = rec.targets;
      y = Tensor<float>(ref.activity.shape());
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = ref.activity[i];
    }
    if (cfg.val_metric == "loss") {
      const auto l = bce_loss(p, y);
      loss_sum += l.loss * l.weight;
      loss_weight += l.weight;
      continue;
    }
    pred = EventRoll(ref.classes, ref.num_frames(), ref.frame_hop_seconds);
    for (std::size_t i = 0; i < p.size(); ++i) pred.activity[i] = p[i] >= static_cast<float>(cfg.threshold) ? 1 : 0;
    stats += accumulate_stats(segment_rolls(ref, pred, 1));
  }
  if (cfg.val_metric == "loss") return loss_weight > 0 ? loss_sum / loss_weight : 0.0;
  if (cfg.val_metric == "f1") return f1_from_stats(stats).f1;
  if (cfg.val_metric == "er") return stats.active ? error_rate_from_stats(stats) : 0.0;
  // eer over all validation windows
  std::size_t n = 0;
  for (const auto& l : labels) n += l.dim(1);
  const std::size_t K = net.spec().num_classes;
  Tensor<std::uint8_t> all_labels({K, n});
  Tensor<float> all_scores({K, n});
  std::size_t col = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    for (std::size_t c = 0; c < labels[r].dim(1); ++c, ++col)
      for (std::size_t k = 0; k < K; ++k) {
        all_labels.at(k, col) = labels[r].at(k, c);
        all_scores.at(k, col) = scores[r].at(k, c);
      }
  }
  return eer(all_labels, all_scores, data.front().targets.classes).mean;
}

// ---- training loop -------------------------------------------------------------

namespace detail {

struct Window {
  const LabeledRecording* rec;
  std::size_t start, valid;
};

inline std::vector<Window> epoch_windows(const std::vector<LabeledRecording>& data, std::size_t L,
                                         bool tagging, std::size_t epoch) {
  std::vector<Window> out;
  for (const auto& rec : data) {
    const std::size_t T = rec.features.num_frames();
    std::size_t offset = tagging ? 0 : sequence_offset(L, epoch);
    if (offset >= T) offset = 0;
    for (std::size_t s = offset; s < T; s += L) out.push_back({&rec, s, std::min(L, T - s)});
  }
  return out;
}

}  // namespace detail

using EpochCallback = std::function<void(const TrainLogEntry&)>;

/// Runs epochs until `epoch_limit` epochs are done in total, early stopping
/// fires, or the state is already stopped. The network holds the current
/// (not the best) weights afterwards; finish_training() restores the best.
inline void continue_training(nn::Network<float>& net, TrainState& st,
                              const std::vector<LabeledRecording>& train_set,
                              const std::vector<LabeledRecording>& val_set,
                              const TrainConfig& cfg, std::size_t epoch_limit,
                              const EpochCallback& on_epoch = {}) {
  const bool tagging = net.tagging();
  validate(cfg, tagging);
  if (train_set.empty()) throw EmptyInputError("training split is empty");
  if (val_set.empty()) throw EmptyInputError("validation split is empty");
  const std::size_t F = net.spec().input_bands, K = net.spec().num_classes;
  for (const auto* split : {&train_set, &val_set})
    for (const auto& rec : *split) {
      if (rec.features.num_bands() != F)
        throw ShapeError("recording " + rec.id + " has " + std::to_string(rec.features.num_bands()) +
                         " bands, network expects " + std::to_string(F));
      if (rec.targets.num_classes() != K || rec.targets.num_frames() != rec.features.num_frames())
        throw ShapeError("recording " + rec.id + " targets do not match features/classes");
    }
  const std::size_t L = cfg.sequence_length;
  const bool higher = metric_higher_is_better(cfg.val_metric);
  const std::size_t Ly = tagging ? 1 : L;

  while (!st.stopped && st.epochs_done < std::min(epoch_limit, cfg.max_epochs)) {
    const std::size_t epoch = st.epochs_done;
    Rng rng(derive_seed(cfg.seed, {0x747261696eULL, epoch}));
    auto windows = detail::epoch_windows(train_set, L, tagging, epoch);
    std::shuffle(windows.begin(), windows.end(), rng);

    double loss_sum = 0, loss_weight = 0;
    for (std::size_t b0 = 0; b0 < windows.size(); b0 += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, windows.size() - b0);
      Tensor<float> x({nb, F, L}), y({nb, K, Ly});
      std::vector<float> mask(nb * Ly, 0.0f);
      for (std::size_t b = 0; b < nb; ++b) {
        const auto& w = windows[b0 + b];
        const auto& feats = w.rec->features.values;
        for (std::size_t f = 0; f < F; ++f) std::copy_n(&feats.at(f, w.start), w.valid, &x.at(b, f, 0));
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t i = 0; i < w.valid; ++i) {
            const float v = w.rec->targets.at(k, w.start + i);
            if (tagging) y.at(b, k, 0) = std::max(y.at(b, k, 0), v);
            else y.at(b, k, i) = v;
          }
        if (tagging) mask[b] = 1.0f;
        else std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b * Ly), w.valid, 1.0f);
      }
      const std::uint64_t dropout_seed = rng();
      const Tensor<float> p = net.forward(x, {nn::Mode::Training, dropout_seed, true});
      const LossResult<float> loss = bce_loss(p, y, mask);
      if (!std::isfinite(loss.loss)) {
        net.load_state(st.best_weights);
        st.stopped = true;
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch + 1) +
                           "; best weights restored");
      }
      loss_sum += loss.loss * loss.weight;
      loss_weight += loss.weight;
      // Sigmoid and cross-entropy combined: d loss / d logit = mask * (p - y) / weight.
      Tensor<float> g(p.shape());
      const std::size_t T = Ly;
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t t = 0; t < T; ++t) {
            const std::size_t i = (b * K + k) * T + t;
            g[i] = static_cast<float>(mask[b * T + t] * (static_cast<double>(p[i]) - y[i]) /
                                      loss.weight);
          }
      net.backward_logits(g);
      adam_step(net.parameters(), st.optimizer, cfg.adam);
    }

    TrainLogEntry e;
    e.epoch = epoch + 1;
    e.train_loss = loss_weight > 0 ? loss_sum / loss_weight : 0.0;
    e.val_metric = validation_metric(net, val_set, cfg);
    if (!std::isfinite(e.train_loss)) {
      net.load_state(st.best_weights);
      st.stopped = true;
      throw NumericError("non-finite training loss at epoch " + std::to_string(e.epoch));
    }
    const bool improved = !st.has_best || (higher ? e.val_metric > st.best_metric
                                                  : e.val_metric < st.best_metric);
    ++st.epochs_done;
    if (improved) {
      st.has_best = true;
      st.best_metric = e.val_metric;
      st.best_epoch = e.epoch;
      st.best_weights = net.state();
      st.epochs_since_best = 0;
      e.event = "best";
    } else {
      ++st.epochs_since_best;
    }
    if (st.epochs_since_best >= cfg.patience) {
      st.stopped = true;
      e.event += e.event.empty() ? "stop" : ",stop";
    }
    st.log.entries.push_back(e);
    if (on_epoch) on_epoch(e);
  }
}

inline void finish_training(nn::Network<float>& net, const TrainState& st) {
  net.load_state(st.best_weights);
}

/// Full run: trains until early stopping or max_epochs and returns the log;
/// `net` ends up holding the best-validation weights.
inline TrainLog train(nn::Network<float>& net, const std::vector<LabeledRecording>& train_set,
                      const std::vector<LabeledRecording>& val_set, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {}, TrainState* state_out = nullptr) {
  TrainState st = start_training(net);
  if (cfg.max_epochs > 0) continue_training(net, st, train_set, val_set, cfg, cfg.max_epochs, on_epoch);
  finish_training(net, st);
  TrainLog log = st.log;
  if (state_out) *state_out = std::move(st);
  return log;
}

}  // namespace sedforge
