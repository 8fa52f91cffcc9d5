#pragma once

#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "sedforge/binary_io.hpp"
#include "sedforge/error.hpp"
#include "sedforge/features.hpp"
#include "sedforge/nn/network.hpp"
#include "sedforge/train.hpp"

namespace sedforge {

/// A trained network with everything detection needs: the feature settings,
/// class list, normalization statistics and sequence length.
struct Model {
  nn::Network<float> network;
  FeatureConfig features;
  std::vector<std::string> classes;
  NormStats norm;
  std::size_t sequence_length = 128;
};

// ---- generic container ------------------------------------------------------------
//
//   <MAGIC> <version>\n
//   <key> <value>\n ...
//   blob <name> <d0>x<d1>...\n <little-endian float32 payload>
//   ...
//   end\n

struct Container {
  std::vector<std::pair<std::string, std::string>> meta;
  nn::NamedTensors<float> blobs;

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    throw CorruptFileError("missing field '" + key + "'");
  }
  const Tensor<float>& blob(const std::string& name) const {
    for (const auto& [k, v] : blobs)
      if (k == name) return v;
    throw CorruptFileError("missing tensor '" + name + "'");
  }
};

inline std::string encode_container(const std::string& magic, int version, const Container& c) {
  std::string out = magic + " " + std::to_string(version) + "\n";
  for (const auto& [k, v] : c.meta) {
    if (v.find('\n') != std::string::npos) throw IoError("field '" + k + "' contains a newline");
    out += k + " " + v + "\n";
  }
  for (const auto& [name, t] : c.blobs) {
    out += "blob " + name + " ";
    for (std::size_t i = 0; i < t.rank(); ++i) out += (i ? "x" : "") + std::to_string(t.dim(i));
    out += "\n";
    append_f32_le(out, t.values());
  }
  out += "end\n";
  return out;
}

inline Container decode_container(std::string_view bytes, const std::string& magic, int version) {
  ByteReader reader(bytes);
  const auto head = reader.line();
  if (head.substr(0, magic.size() + 1) != magic + " ")
    throw CorruptFileError("not a " + magic + " file");
  const std::string ver(head.substr(magic.size() + 1));
  if (ver != std::to_string(version))
    throw VersionError(magic + " version " + ver + " is not supported (expected " +
                       std::to_string(version) + ")");
  Container c;
  for (;;) {
    const auto line = reader.line();
    if (line == "end") break;
    auto [key, value] = split_key_value(line);
    if (key != "blob") {
      c.meta.emplace_back(std::move(key), std::move(value));
      continue;
    }
    const auto sep = value.rfind(' ');
    if (sep == std::string::npos) throw CorruptFileError("malformed blob line");
    const std::string name = value.substr(0, sep);
    Shape shape;
    std::istringstream dims(value.substr(sep + 1));
    for (std::string d; std::getline(dims, d, 'x');) {
      try {
        shape.push_back(std::stoul(d));
      } catch (const std::logic_error&) {
        throw CorruptFileError("malformed shape for blob " + name);
      }
    }
    const std::size_t n = shape_size(shape);
    c.blobs.emplace_back(name, Tensor<float>(shape, read_f32_le(reader.take(n * 4), n)));
  }
  return c;
}

// ---- model metadata ------------------------------------------------------------

namespace detail {

inline std::string format_doubles(const std::vector<double>& v) {
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", v[i]);
    out += (i ? " " : "") + std::string(buf);
  }
  return out;
}

inline std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::istringstream in(s);
  for (std::string tok; in >> tok;) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::logic_error&) {
      throw CorruptFileError("bad number '" + tok + "'");
    }
  }
  return out;
}

inline std::vector<std::string> parse_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

template <class T>
T parse_number(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    if constexpr (std::is_floating_point_v<T>) {
      const T v = static_cast<T>(std::stod(s, &used));
      if (used == s.size()) return v;
    } else {
      const T v = static_cast<T>(std::stoull(s, &used));
      if (used == s.size()) return v;
    }
  } catch (const std::logic_error&) {
  }
  throw CorruptFileError(std::string("bad value for ") + what + ": '" + s + "'");
}

inline std::string real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void put_model_meta(Container& c, const Model& m) {
  const auto& spec = m.network.spec();
  std::string classes;
  for (std::size_t k = 0; k < m.classes.size(); ++k) classes += (k ? " " : "") + m.classes[k];
  c.meta = {
      {"layers", nn::format_layers(spec.layers)},
      {"input_bands", std::to_string(spec.input_bands)},
      {"num_classes", std::to_string(spec.num_classes)},
      {"seed", std::to_string(spec.seed)},
      {"sample_rate", std::to_string(m.features.sample_rate)},
      {"frame_seconds", real(m.features.frame_seconds)},
      {"overlap", real(m.features.overlap)},
      {"num_bands", std::to_string(m.features.num_bands)},
      {"classes", classes},
      {"sequence_length", std::to_string(m.sequence_length)},
      {"norm_identity", m.norm.identity()},
      {"norm_mean", format_doubles(m.norm.mean)},
      {"norm_std", format_doubles(m.norm.std)},
  };
}

inline Model get_model(const Container& c) {
  nn::NetworkSpec spec;
  spec.input_bands = parse_number<std::size_t>(c.get("input_bands"), "input_bands");
  spec.num_classes = parse_number<std::size_t>(c.get("num_classes"), "num_classes");
  spec.seed = parse_number<std::uint64_t>(c.get("seed"), "seed");
  try {
    spec.layers = nn::parse_layers(c.get("layers"), spec.num_classes);
  } catch (const ConfigError& e) {
    throw CorruptFileError(std::string("bad layer description: ") + e.what());
  }
  Model m{nn::Network<float>(spec), {}, {}, {}, 0};
  m.features.sample_rate = parse_number<int>(c.get("sample_rate"), "sample_rate");
  m.features.frame_seconds = parse_number<double>(c.get("frame_seconds"), "frame_seconds");
  m.features.overlap = parse_number<double>(c.get("overlap"), "overlap");
  m.features.num_bands = parse_number<std::size_t>(c.get("num_bands"), "num_bands");
  m.classes = parse_words(c.get("classes"));
  m.sequence_length = parse_number<std::size_t>(c.get("sequence_length"), "sequence_length");
  m.norm.mean = parse_doubles(c.get("norm_mean"));
  m.norm.std = parse_doubles(c.get("norm_std"));
  if (m.norm.identity() != c.get("norm_identity"))
    throw CorruptFileError("normalization statistics do not match their identity");
  if (m.classes.size() != spec.num_classes)
    throw CorruptFileError("class list does not match the output layer");
  nn::NamedTensors<float> weights;
  for (const auto& [name, t] : c.blobs)
    if (name.rfind("L", 0) == 0) weights.emplace_back(name, t);
  try {
    m.network.load_state(weights);
  } catch (const ShapeError& e) {
    throw CorruptFileError(std::string("weights do not fit the network: ") + e.what());
  }
  return m;
}

}  // namespace detail

inline constexpr int kModelVersion = 1;
inline constexpr int kCheckpointVersion = 1;

inline std::string encode_model(const Model& m) {
  Container c;
  detail::put_model_meta(c, m);
  c.blobs = m.network.state();
  return encode_container("SFMODEL", kModelVersion, c);
}

inline Model decode_model(std::string_view bytes) {
  return detail::get_model(decode_container(bytes, "SFMODEL", kModelVersion));
}

inline void save_model(const std::filesystem::path& path, const Model& m) {
  write_file_bytes(path, encode_model(m));
}

inline Model load_model(const std::filesystem::path& path) {
  return decode_model(read_file_bytes(path));
}

/// Model plus training state: optimizer moments, best snapshot and log.
inline std::string encode_checkpoint(const Model& m, const TrainState& st) {
  Container c;
  detail::put_model_meta(c, m);
  c.meta.emplace_back("epochs_done", std::to_string(st.epochs_done));
  c.meta.emplace_back("best_epoch", std::to_string(st.best_epoch));
  c.meta.emplace_back("best_metric", detail::real(st.best_metric));
  c.meta.emplace_back("has_best", st.has_best ? "1" : "0");
  c.meta.emplace_back("epochs_since_best", std::to_string(st.epochs_since_best));
  c.meta.emplace_back("stopped", st.stopped ? "1" : "0");
  c.meta.emplace_back("adam_step", std::to_string(st.optimizer.step));
  for (const auto& e : st.log.entries)
    c.meta.emplace_back("log", std::to_string(e.epoch) + " " + detail::real(e.train_loss) + " " +
                                   detail::real(e.val_metric) + " " +
                                   (e.event.empty() ? "-" : e.event));
  c.blobs = m.network.state();
  for (const auto& [name, t] : st.best_weights) c.blobs.emplace_back("best." + name, t);
  for (std::size_t i = 0; i < st.optimizer.m.size(); ++i) {
    c.blobs.emplace_back("adam.m." + std::to_string(i), st.optimizer.m[i]);
    c.blobs.emplace_back("adam.v." + std::to_string(i), st.optimizer.v[i]);
  }
  return encode_container("SFCHECKPOINT", kCheckpointVersion, c);
}

struct Checkpoint {
  Model model;
  TrainState state;
};

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  const Container c = decode_container(bytes, "SFCHECKPOINT", kCheckpointVersion);
  Checkpoint cp{detail::get_model(c), {}};
  TrainState& st = cp.state;
  st.epochs_done = detail::parse_number<std::size_t>(c.get("epochs_done"), "epochs_done");
  st.best_epoch = detail::parse_number<std::size_t>(c.get("best_epoch"), "best_epoch");
  st.best_metric = detail::parse_number<double>(c.get("best_metric"), "best_metric");
  st.has_best = c.get("has_best") == "1";
  st.epochs_since_best =
      detail::parse_number<std::size_t>(c.get("epochs_since_best"), "epochs_since_best");
  st.stopped = c.get("stopped") == "1";
  st.optimizer.step = detail::parse_number<std::uint64_t>(c.get("adam_step"), "adam_step");
  for (const auto& [k, v] : c.meta) {
    if (k != "log") continue;
    const auto w = detail::parse_words(v);
    if (w.size() != 4) throw CorruptFileError("malformed log line in checkpoint");
    st.log.entries.push_back({detail::parse_number<std::size_t>(w[0], "log epoch"),
                              detail::parse_number<double>(w[1], "log loss"),
                              detail::parse_number<double>(w[2], "log metric"),
                              w[3] == "-" ? std::string() : w[3]});
  }
  for (const auto& [name, t] : c.blobs)
    if (name.rfind("best.", 0) == 0) st.best_weights.emplace_back(name.substr(5), t);
  const std::size_t n_params = cp.model.network.parameters().size();
  for (std::size_t i = 0; i < n_params; ++i) {
    st.optimizer.m.push_back(c.blob("adam.m." + std::to_string(i)));
    st.optimizer.v.push_back(c.blob("adam.v." + std::to_string(i)));
  }
  return cp;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& m, const TrainState& st) {
  write_file_bytes(path, encode_checkpoint(m, st));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace sedforge
