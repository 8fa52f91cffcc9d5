#pragma once

#include <string>
#include <vector>

#include "sedforge/annotations.hpp"
#include "sedforge/error.hpp"
#include "sedforge/features.hpp"
#include "sedforge/nn/network.hpp"

namespace sedforge {

/// Per-class activity probabilities [K, N]. In frame mode N is the number of
/// feature frames; in tagging mode it is one column per window and `hop`
/// is the window duration.
struct ActivityProbabilities {
  Tensor<float> values;
  std::vector<std::string> classes;
  double frame_hop_seconds = 0.02;

  std::size_t num_classes() const { return values.rank() == 2 ? values.dim(0) : 0; }
  std::size_t num_frames() const { return values.rank() == 2 ? values.dim(1) : 0; }
};

inline constexpr double kDefaultThreshold = 0.5;
inline constexpr std::size_t kPredictBatch = 32;

/// Runs the network over consecutive non-overlapping windows of
/// `sequence_length` frames, each starting from a zero recurrent state, and
/// stitches the outputs back together. Padded tail frames are discarded.
inline Tensor<float> predict_matrix(const nn::Network<float>& net, const Tensor<float>& features,
                                    std::size_t sequence_length) {
  require_rank(features, 2, "features");
  const std::size_t F = features.dim(0), T = features.dim(1), L = sequence_length;
  if (F != net.spec().input_bands)
    throw ShapeError("model expects " + std::to_string(net.spec().input_bands) +
                     " bands, features have " + std::to_string(F));
  if (L == 0) throw ConfigError("sequence length must be at least 1 frame");
  if (T == 0) throw EmptyInputError("cannot predict on an empty feature matrix");
  const std::size_t K = net.spec().num_classes, windows = (T + L - 1) / L;
  const bool tagging = net.tagging();
  Tensor<float> out({K, tagging ? windows : T});
  for (std::size_t w0 = 0; w0 < windows; w0 += kPredictBatch) {
    const std::size_t nb = std::min(kPredictBatch, windows - w0);
    Tensor<float> x({nb, F, L});
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t start = (w0 + b) * L, valid = std::min(L, T - start);
      for (std::size_t f = 0; f < F; ++f)
        std::copy_n(&features.at(f, start), valid, &x.at(b, f, 0));
    }
    const Tensor<float> y = net.infer(x);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t w = w0 + b;
      if (tagging) {
        for (std::size_t k = 0; k < K; ++k) out.at(k, w) = y.at(b, k, 0);
        continue;
      }
      const std::size_t start = w * L, valid = std::min(L, T - start);
      for (std::size_t k = 0; k < K; ++k) std::copy_n(&y.at(b, k, 0), valid, &out.at(k, start));
    }
  }
  return out;
}

inline ActivityProbabilities predict(const nn::Network<float>& net, const FeatureMatrix& features,
                                     std::size_t sequence_length,
                                     const std::vector<std::string>& classes) {
  if (classes.size() != net.spec().num_classes)
    throw ShapeError("class list has " + std::to_string(classes.size()) + " entries, model has " +
                     std::to_string(net.spec().num_classes) + " outputs");
  ActivityProbabilities p;
  p.values = predict_matrix(net, features.values, sequence_length);
  p.classes = classes;
  p.frame_hop_seconds = net.tagging()
                            ? features.frame_hop_seconds * static_cast<double>(sequence_length)
                            : features.frame_hop_seconds;
  return p;
}

/// Active iff p >= threshold.
inline EventRoll binarize(const ActivityProbabilities& probs, double threshold = kDefaultThreshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("threshold must lie in (0, 1), got " + std::to_string(threshold));
  EventRoll roll(probs.classes, probs.num_frames(), probs.frame_hop_seconds);
  for (std::size_t i = 0; i < probs.values.size(); ++i)
    roll.activity[i] = probs.values[i] >= static_cast<float>(threshold) ? 1 : 0;
  return roll;
}

struct DetectionResult {
  EventRoll roll;
  std::vector<EventAnnotation> events;
};

inline DetectionResult detect(const ActivityProbabilities& probs,
                              double threshold = kDefaultThreshold) {
  DetectionResult r;
  r.roll = binarize(probs, threshold);
  r.events = roll_to_events(r.roll);
  return r;
}

/// Probability matrix in the feature-cache container (kind = probabilities).
inline std::string encode_probabilities(const ActivityProbabilities& p) {
  MatrixFile file;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", p.frame_hop_seconds);
  file.meta.emplace_back("kind", "probabilities");
  file.meta.emplace_back("hop", buf);
  std::string classes;
  for (std::size_t k = 0; k < p.classes.size(); ++k) classes += (k ? " " : "") + p.classes[k];
  file.meta.emplace_back("classes", classes);
  file.values = p.values;
  return encode_matrix_file(file);
}

inline ActivityProbabilities decode_probabilities(std::string_view bytes) {
  MatrixFile file = decode_matrix_file(bytes);
  const std::string* kind = file.find("kind");
  const std::string* hop = file.find("hop");
  const std::string* classes = file.find("classes");
  if (!kind || *kind != "probabilities" || !hop || !classes)
    throw CorruptFileError("matrix file is not a probability roll");
  ActivityProbabilities p;
  p.values = std::move(file.values);
  p.frame_hop_seconds = std::stod(*hop);
  std::istringstream in(*classes);
  for (std::string c; in >> c;) p.classes.push_back(c);
  if (p.classes.size() != p.num_classes())
    throw CorruptFileError("probability roll class list does not match its rows");
  return p;
}

}  // namespace sedforge
