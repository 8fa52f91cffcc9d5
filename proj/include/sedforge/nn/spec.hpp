#pragma once

#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "sedforge/error.hpp"

namespace sedforge::nn {

/// Convolution block: same-padded conv -> [batch norm] -> ReLU -> frequency
/// max pooling by `pool` (1 = none). A following BatchNormSpec is fused
/// between the convolution and the ReLU.
struct ConvSpec {
  std::size_t maps = 1;
  std::size_t kernel_f = 5, kernel_t = 5;
  std::size_t pool = 1;
  bool operator==(const ConvSpec&) const = default;
};

/// GRU layer; `recurrent_dropout` masks the previous state with a mask held
/// constant along each sequence.
struct RecurrentSpec {
  std::size_t units = 1;
  double recurrent_dropout = 0.0;
  bool operator==(const RecurrentSpec&) const = default;
};

enum class Activation { Linear, Relu, Sigmoid };

/// Per-frame fully connected layer: linear -> [batch norm] -> activation.
struct DenseSpec {
  std::size_t units = 1;
  Activation activation = Activation::Linear;
  bool operator==(const DenseSpec&) const = default;
};

struct BatchNormSpec {
  bool operator==(const BatchNormSpec&) const = default;
};

struct DropoutSpec {
  double rate = 0.0;
  bool operator==(const DropoutSpec&) const = default;
};

/// Max over time; turns frame-level features into one vector per window.
struct TemporalMaxPoolSpec {
  bool operator==(const TemporalMaxPoolSpec&) const = default;
};

using LayerSpec = std::variant<ConvSpec, RecurrentSpec, DenseSpec, BatchNormSpec, DropoutSpec,
                               TemporalMaxPoolSpec>;

struct NetworkSpec {
  std::size_t input_bands = 40;
  std::size_t num_classes = 1;
  std::vector<LayerSpec> layers;
  std::uint64_t seed = 0;

  bool operator==(const NetworkSpec&) const = default;

  std::size_t count_conv() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += std::holds_alternative<ConvSpec>(l);
    return n;
  }
  std::size_t count_recurrent() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += std::holds_alternative<RecurrentSpec>(l);
    return n;
  }
  bool tagging() const {
    for (const auto& l : layers)
      if (std::holds_alternative<TemporalMaxPoolSpec>(l)) return true;
    return false;
  }
};

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline std::string layer_name(const LayerSpec& l) {
  return std::visit(
      [](const auto& s) -> std::string {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, ConvSpec>) return "conv";
        else if constexpr (std::is_same_v<T, RecurrentSpec>) return "gru";
        else if constexpr (std::is_same_v<T, DenseSpec>) return "dense";
        else if constexpr (std::is_same_v<T, BatchNormSpec>) return "bn";
        else if constexpr (std::is_same_v<T, DropoutSpec>) return "dropout";
        else return "tmaxpool";
      },
      l);
}

/// Lists every violation of the layer-stack rules; empty means valid.
inline std::vector<std::string> validate(const NetworkSpec& spec) {
  std::vector<std::string> problems;
  auto at = [](std::size_t i, const std::string& msg) {
    return "layer " + std::to_string(i) + ": " + msg;
  };
  if (spec.input_bands == 0) problems.push_back("input band count must be positive");
  if (spec.num_classes == 0) problems.push_back("class count must be positive");
  if (spec.layers.empty()) {
    problems.push_back("network has no layers");
    return problems;
  }
  std::size_t bands = spec.input_bands;
  bool conv_stage = true;
  std::size_t sigmoid_dense = 0, tmaxpool = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (const auto* c = std::get_if<ConvSpec>(&l)) {
      if (!conv_stage) problems.push_back(at(i, "convolutional layers must precede recurrent, dense and pooling-over-time layers"));
      if (c->maps == 0) problems.push_back(at(i, "conv needs at least one feature map"));
      if (c->kernel_f == 0 || c->kernel_t == 0) problems.push_back(at(i, "kernel dimensions must be at least 1"));
      if (c->pool == 0 || (bands > 0 && bands % c->pool != 0))
        problems.push_back(at(i, "pool " + std::to_string(c->pool) + " does not divide " +
                                     std::to_string(bands) + " frequency bands"));
      else bands /= c->pool;
    } else if (const auto* r = std::get_if<RecurrentSpec>(&l)) {
      conv_stage = false;
      if (r->units == 0) problems.push_back(at(i, "recurrent layer needs at least one unit"));
      if (!(r->recurrent_dropout >= 0 && r->recurrent_dropout < 1))
        problems.push_back(at(i, "recurrent dropout must lie in [0, 1)"));
    } else if (const auto* d = std::get_if<DenseSpec>(&l)) {
      conv_stage = false;
      if (d->units == 0) problems.push_back(at(i, "dense layer needs at least one unit"));
      if (d->activation == Activation::Sigmoid) ++sigmoid_dense;
    } else if (std::holds_alternative<BatchNormSpec>(l)) {
      bool ok = false;
      if (i > 0) {
        if (std::holds_alternative<ConvSpec>(spec.layers[i - 1])) ok = true;
        if (const auto* pd = std::get_if<DenseSpec>(&spec.layers[i - 1]))
          ok = pd->activation != Activation::Sigmoid;
      }
      if (!ok) problems.push_back(at(i, "batch norm must directly follow a conv or hidden dense layer"));
    } else if (const auto* dr = std::get_if<DropoutSpec>(&l)) {
      if (!(dr->rate >= 0 && dr->rate < 1)) problems.push_back(at(i, "dropout rate must lie in [0, 1)"));
    } else if (std::holds_alternative<TemporalMaxPoolSpec>(l)) {
      conv_stage = false;
      if (++tmaxpool > 1) problems.push_back(at(i, "at most one temporal max pooling layer"));
    }
  }
  const auto* last = std::get_if<DenseSpec>(&spec.layers.back());
  if (!last || last->activation != Activation::Sigmoid)
    problems.push_back("the last layer must be a sigmoid dense output layer");
  else if (last->units != spec.num_classes)
    problems.push_back("output layer has " + std::to_string(last->units) + " units but there are " +
                       std::to_string(spec.num_classes) + " classes");
  if (sigmoid_dense > 1) problems.push_back("exactly one sigmoid dense layer (the output) is allowed");
  return problems;
}

/// Layer-stack text form, whitespace separated:
///   conv:<maps>[:<kf>x<kt>[:<pool>]]   bn   dropout:<rate>
///   gru:<units>[:<recurrent dropout>]   dense:<units|K>:<linear|relu|sigmoid>
///   tmaxpool
/// "K" stands for the number of classes.
inline std::vector<LayerSpec> parse_layers(const std::string& text, std::size_t num_classes) {
  std::vector<LayerSpec> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) {
    std::vector<std::string> parts;
    {
      std::size_t start = 0;
      for (;;) {
        const auto p = tok.find(':', start);
        parts.push_back(tok.substr(start, p == std::string::npos ? p : p - start));
        if (p == std::string::npos) break;
        start = p + 1;
      }
    }
    const auto bad = [&tok](const std::string& why) {
      return ConfigError("bad layer '" + tok + "': " + why);
    };
    const auto count = [&](const std::string& s) -> std::size_t {
      if (s == "K") return num_classes;
      try {
        std::size_t used = 0;
        const long v = std::stol(s, &used);
        if (used != s.size() || v < 0) throw bad("expected a count");
        return static_cast<std::size_t>(v);
      } catch (const std::logic_error&) {
        throw bad("expected a count");
      }
    };
    const auto real = [&](const std::string& s) -> double {
      try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw bad("expected a number");
        return v;
      } catch (const std::logic_error&) {
        throw bad("expected a number");
      }
    };
    const std::string& kind = parts[0];
    if (kind == "conv") {
      if (parts.size() < 2 || parts.size() > 4) throw bad("conv:<maps>[:<kf>x<kt>[:<pool>]]");
      ConvSpec c;
      c.maps = count(parts[1]);
      if (parts.size() >= 3) {
        const auto x = parts[2].find('x');
        if (x == std::string::npos) throw bad("kernel must look like 5x5");
        c.kernel_f = count(parts[2].substr(0, x));
        c.kernel_t = count(parts[2].substr(x + 1));
      }
      if (parts.size() == 4) c.pool = count(parts[3]);
      out.emplace_back(c);
    } else if (kind == "bn" && parts.size() == 1) {
      out.emplace_back(BatchNormSpec{});
    } else if (kind == "dropout" && parts.size() == 2) {
      out.emplace_back(DropoutSpec{real(parts[1])});
    } else if (kind == "gru" && (parts.size() == 2 || parts.size() == 3)) {
      out.emplace_back(RecurrentSpec{count(parts[1]), parts.size() == 3 ? real(parts[2]) : 0.0});
    } else if (kind == "dense" && parts.size() == 3) {
      Activation a;
      if (parts[2] == "linear") a = Activation::Linear;
      else if (parts[2] == "relu") a = Activation::Relu;
      else if (parts[2] == "sigmoid") a = Activation::Sigmoid;
      else throw bad("activation must be linear, relu or sigmoid");
      out.emplace_back(DenseSpec{count(parts[1]), a});
    } else if (kind == "tmaxpool" && parts.size() == 1) {
      out.emplace_back(TemporalMaxPoolSpec{});
    } else {
      throw bad("unknown layer kind or wrong number of fields");
    }
  }
  return out;
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_real(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_layers(const std::vector<LayerSpec>& layers) {
  std::ostringstream out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) out << ' ';
    std::visit(
        [&out](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, ConvSpec>)
            out << "conv:" << s.maps << ':' << s.kernel_f << 'x' << s.kernel_t << ':' << s.pool;
          else if constexpr (std::is_same_v<T, RecurrentSpec>)
            out << "gru:" << s.units << ':' << format_real(s.recurrent_dropout);
          else if constexpr (std::is_same_v<T, DenseSpec>)
            out << "dense:" << s.units << ':' << activation_name(s.activation);
          else if constexpr (std::is_same_v<T, BatchNormSpec>)
            out << "bn";
          else if constexpr (std::is_same_v<T, DropoutSpec>)
            out << "dropout:" << format_real(s.rate);
          else
            out << "tmaxpool";
        },
        layers[i]);
  }
  return out.str();
}

}  // namespace sedforge::nn
