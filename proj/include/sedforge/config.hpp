#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sedforge/audio.hpp"
#include "sedforge/error.hpp"
#include "sedforge/features.hpp"
#include "sedforge/nn/spec.hpp"
#include "sedforge/synth.hpp"
#include "sedforge/train.hpp"

namespace sedforge {

enum class ExperimentMode { Frame, Tagging };

/// Everything one experiment needs besides the dataset manifest.
///
/// INI layout (every key optional):
///
///   [experiment]  seed, mode (frame|tagging), folds (all | 1,3), threshold,
///                 chunk_seconds, cnn_layers, rnn_layers
///   [features]    sample_rate, frame_seconds, overlap, num_bands
///   [network]     layers
///   [train]       sequence_length, batch_size, max_epochs, patience,
///                 learning_rate, beta1, beta2, epsilon, val_metric
///   [synth]       num_mixtures, mixture_seconds, events_per_mixture,
///                 min_cut_seconds, max_cut_seconds, polyphony_cap,
///                 train_fraction, val_fraction, test_fraction,
///                 instances_per_class, scene
struct ExperimentConfig {
  std::uint64_t seed = 1;
  ExperimentMode mode = ExperimentMode::Frame;
  std::vector<std::size_t> folds;  // 1-based; empty = all
  double threshold = kDefaultThreshold;
  double chunk_seconds = 4.0;
  std::string layers =
      "conv:8:5x5:5 bn dropout:0.25 conv:8:5x5:4 bn dropout:0.25 gru:16:0.25 dense:K:sigmoid";
  std::string cnn_layers;  // empty: derived from `layers`
  std::string rnn_layers;  // idem
  FeatureConfig features;
  TrainConfig train;
  SynthConfig synth;
  BankConfig bank;
  std::string scene = "synthetic";

  ExperimentConfig() {
    train.sequence_length = 64;
    train.batch_size = 8;
    train.max_epochs = 30;
    train.patience = 10;
  }

  /// Seeds handed to network initialization and training.
  std::uint64_t network_seed() const { return derive_seed(seed, {0x6e6574ULL}); }
  std::uint64_t train_seed() const { return derive_seed(seed, {0x747261696eULL}); }
};

namespace detail {

template <class T>
T ini_get(const boost::property_tree::ptree& tree, const std::string& path, const T& fallback) {
  const auto node = tree.get_optional<std::string>(boost::property_tree::ptree::path_type(path, '.'));
  if (!node) return fallback;
  std::istringstream in(*node);
  T value{};
  in >> value;
  if (in.fail() || !(in >> std::ws).eof())
    throw ConfigError("bad value for " + path + ": '" + *node + "'");
  return value;
}

template <>
inline std::string ini_get<std::string>(const boost::property_tree::ptree& tree,
                                        const std::string& path, const std::string& fallback) {
  const auto node = tree.get_optional<std::string>(boost::property_tree::ptree::path_type(path, '.'));
  return node ? std::string(detail::trim(*node)) : fallback;
}

inline std::vector<std::size_t> parse_fold_list(const std::string& text) {
  std::vector<std::size_t> out;
  if (text.empty() || text == "all") return out;
  std::istringstream in(text);
  for (std::string tok; std::getline(in, tok, ',');) {
    const auto t = std::string(detail::trim(tok));
    try {
      std::size_t used = 0;
      const long v = std::stol(t, &used);
      if (used != t.size() || v < 1) throw ConfigError("");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("bad fold list '" + text + "'");
    }
  }
  return out;
}

inline const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"experiment",
       {"seed", "mode", "folds", "threshold", "chunk_seconds", "cnn_layers", "rnn_layers"}},
      {"features", {"sample_rate", "frame_seconds", "overlap", "num_bands"}},
      {"network", {"layers"}},
      {"train",
       {"sequence_length", "batch_size", "max_epochs", "patience", "learning_rate", "beta1",
        "beta2", "epsilon", "val_metric"}},
      {"synth",
       {"num_mixtures", "mixture_seconds", "events_per_mixture", "min_cut_seconds",
        "max_cut_seconds", "polyphony_cap", "train_fraction", "val_fraction", "test_fraction",
        "instances_per_class", "scene"}},
  };
  return keys;
}

}  // namespace detail

inline std::string mode_name(ExperimentMode m) {
  return m == ExperimentMode::Tagging ? "tagging" : "frame";
}

inline nn::NetworkSpec network_spec(const ExperimentConfig& c, const std::string& layers,
                                    std::size_t num_classes) {
  nn::NetworkSpec spec;
  spec.input_bands = c.features.num_bands;
  spec.num_classes = num_classes;
  spec.layers = nn::parse_layers(layers, num_classes);
  spec.seed = c.network_seed();
  return spec;
}

/// Throws ConfigError listing every inconsistency.
inline void validate(const ExperimentConfig& c) {
  std::vector<std::string> problems;
  const auto check_layers = [&](const std::string& name, const std::string& layers) {
    if (layers.empty()) return;
    try {
      auto spec = network_spec(c, layers, 2);
      const auto* out =
          spec.layers.empty() ? nullptr : std::get_if<nn::DenseSpec>(&spec.layers.back());
      if (out) spec.num_classes = out->units;
      for (const auto& p : nn::validate(spec)) problems.push_back(name + ": " + p);
      if (spec.tagging() != (c.mode == ExperimentMode::Tagging))
        problems.push_back(name + ": mode " + mode_name(c.mode) +
                           (spec.tagging() ? " forbids" : " requires") +
                           " a temporal max pooling layer");
    } catch (const ConfigError& e) {
      problems.push_back(name + ": " + e.what());
    }
  };
  check_layers("network.layers", c.layers);
  check_layers("experiment.cnn_layers", c.cnn_layers);
  check_layers("experiment.rnn_layers", c.rnn_layers);
  try {
    validate(c.train, c.mode == ExperimentMode::Tagging);
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  if (!(c.chunk_seconds > 0)) problems.push_back("chunk_seconds must be positive");
  if (c.features.num_bands < 1) problems.push_back("num_bands must be positive");
  if (!(c.features.frame_seconds > 0)) problems.push_back("frame_seconds must be positive");
  if (!(c.features.overlap >= 0 && c.features.overlap < 1))
    problems.push_back("overlap must lie in [0, 1)");
  if (c.features.sample_rate <= 0) problems.push_back("sample_rate must be positive");
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
}

inline ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    const auto it = detail::known_keys().find(section);
    if (it == detail::known_keys().end())
      throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body)
      if (!it->second.count(key))
        throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
  }
  using detail::ini_get;
  ExperimentConfig c;
  c.seed = ini_get(tree, "experiment.seed", c.seed);
  const std::string mode = ini_get<std::string>(tree, "experiment.mode", "frame");
  if (mode == "frame") c.mode = ExperimentMode::Frame;
  else if (mode == "tagging") c.mode = ExperimentMode::Tagging;
  else throw ConfigError("config: mode must be frame or tagging, got '" + mode + "'");
  c.folds = detail::parse_fold_list(ini_get<std::string>(tree, "experiment.folds", "all"));
  c.threshold = ini_get(tree, "experiment.threshold", c.threshold);
  c.chunk_seconds = ini_get(tree, "experiment.chunk_seconds", c.chunk_seconds);
  c.cnn_layers = ini_get(tree, "experiment.cnn_layers", c.cnn_layers);
  c.rnn_layers = ini_get(tree, "experiment.rnn_layers", c.rnn_layers);

  c.features.sample_rate = ini_get(tree, "features.sample_rate", c.features.sample_rate);
  c.features.frame_seconds = ini_get(tree, "features.frame_seconds", c.features.frame_seconds);
  c.features.overlap = ini_get(tree, "features.overlap", c.features.overlap);
  c.features.num_bands = ini_get(tree, "features.num_bands", c.features.num_bands);

  c.layers = ini_get(tree, "network.layers", c.layers);

  auto& t = c.train;
  t.sequence_length = ini_get(tree, "train.sequence_length", t.sequence_length);
  t.batch_size = ini_get(tree, "train.batch_size", t.batch_size);
  t.max_epochs = ini_get(tree, "train.max_epochs", t.max_epochs);
  t.patience = ini_get(tree, "train.patience", t.patience);
  t.adam.learning_rate = ini_get(tree, "train.learning_rate", t.adam.learning_rate);
  t.adam.beta1 = ini_get(tree, "train.beta1", t.adam.beta1);
  t.adam.beta2 = ini_get(tree, "train.beta2", t.adam.beta2);
  t.adam.epsilon = ini_get(tree, "train.epsilon", t.adam.epsilon);
  t.val_metric = ini_get(tree, "train.val_metric", t.val_metric);

  auto& s = c.synth;
  s.num_mixtures = ini_get(tree, "synth.num_mixtures", s.num_mixtures);
  s.mixture_seconds = ini_get(tree, "synth.mixture_seconds", s.mixture_seconds);
  s.events_per_mixture = ini_get(tree, "synth.events_per_mixture", s.events_per_mixture);
  s.min_cut_seconds = ini_get(tree, "synth.min_cut_seconds", s.min_cut_seconds);
  s.max_cut_seconds = ini_get(tree, "synth.max_cut_seconds", s.max_cut_seconds);
  s.polyphony_cap = ini_get(tree, "synth.polyphony_cap", s.polyphony_cap);
  s.train_fraction = ini_get(tree, "synth.train_fraction", s.train_fraction);
  s.val_fraction = ini_get(tree, "synth.val_fraction", s.val_fraction);
  s.test_fraction = ini_get(tree, "synth.test_fraction", s.test_fraction);
  c.bank.instances_per_class = ini_get(tree, "synth.instances_per_class", c.bank.instances_per_class);
  c.scene = ini_get(tree, "synth.scene", c.scene);
  validate(c);
  return c;
}

inline ExperimentConfig read_config(const std::filesystem::path& path) {
  return parse_config(read_file_bytes(path));
}

/// Round-trippable INI text of a configuration.
inline std::string format_config(const ExperimentConfig& c) {
  std::ostringstream o;
  std::string folds;
  for (std::size_t i = 0; i < c.folds.size(); ++i) folds += (i ? "," : "") + std::to_string(c.folds[i]);
  o << "[experiment]\n"
    << "seed = " << c.seed << "\n"
    << "mode = " << mode_name(c.mode) << "\n"
    << "folds = " << (folds.empty() ? "all" : folds) << "\n"
    << "threshold = " << nn::format_real(c.threshold) << "\n"
    << "chunk_seconds = " << nn::format_real(c.chunk_seconds) << "\n";
  if (!c.cnn_layers.empty()) o << "cnn_layers = " << c.cnn_layers << "\n";
  if (!c.rnn_layers.empty()) o << "rnn_layers = " << c.rnn_layers << "\n";
  o << "\n[features]\n"
    << "sample_rate = " << c.features.sample_rate << "\n"
    << "frame_seconds = " << nn::format_real(c.features.frame_seconds) << "\n"
    << "overlap = " << nn::format_real(c.features.overlap) << "\n"
    << "num_bands = " << c.features.num_bands << "\n"
    << "\n[network]\nlayers = " << c.layers << "\n"
    << "\n[train]\n"
    << "sequence_length = " << c.train.sequence_length << "\n"
    << "batch_size = " << c.train.batch_size << "\n"
    << "max_epochs = " << c.train.max_epochs << "\n"
    << "patience = " << c.train.patience << "\n"
    << "learning_rate = " << nn::format_real(c.train.adam.learning_rate) << "\n"
    << "beta1 = " << nn::format_real(c.train.adam.beta1) << "\n"
    << "beta2 = " << nn::format_real(c.train.adam.beta2) << "\n"
    << "epsilon = " << nn::format_real(c.train.adam.epsilon) << "\n"
    << "val_metric = " << c.train.val_metric << "\n"
    << "\n[synth]\n"
    << "num_mixtures = " << c.synth.num_mixtures << "\n"
    << "mixture_seconds = " << nn::format_real(c.synth.mixture_seconds) << "\n"
    << "events_per_mixture = " << c.synth.events_per_mixture << "\n"
    << "min_cut_seconds = " << nn::format_real(c.synth.min_cut_seconds) << "\n"
    << "max_cut_seconds = " << nn::format_real(c.synth.max_cut_seconds) << "\n"
    << "polyphony_cap = " << c.synth.polyphony_cap << "\n"
    << "train_fraction = " << nn::format_real(c.synth.train_fraction) << "\n"
    << "val_fraction = " << nn::format_real(c.synth.val_fraction) << "\n"
    << "test_fraction = " << nn::format_real(c.synth.test_fraction) << "\n"
    << "instances_per_class = " << c.bank.instances_per_class << "\n"
    << "scene = " << c.scene << "\n";
  return o.str();
}

}  // namespace sedforge
