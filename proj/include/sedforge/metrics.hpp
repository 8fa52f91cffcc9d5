#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sedforge/annotations.hpp"
#include "sedforge/error.hpp"
#include "sedforge/tensor.hpp"

namespace sedforge {

/// Class activity per segment for a reference and a prediction roll.
struct SegmentedComparison {
  std::size_t segment_frames = 1;
  Tensor<std::uint8_t> reference;   // [K, segments]
  Tensor<std::uint8_t> prediction;  // [K, segments]

  std::size_t num_segments() const { return reference.rank() == 2 ? reference.dim(1) : 0; }
};

/// A class is active in a segment if it is active in any of its frames. The
/// trailing partial segment is kept.
inline SegmentedComparison segment_rolls(const EventRoll& reference, const EventRoll& prediction,
                                         std::size_t segment_frames) {
  if (segment_frames == 0) throw ConfigError("segment length must be at least one frame");
  if (reference.num_classes() != prediction.num_classes() ||
      reference.num_frames() != prediction.num_frames())
    throw ShapeError("reference roll " + shape_string(reference.activity.shape()) +
                     " and prediction roll " + shape_string(prediction.activity.shape()) +
                     " differ in shape");
  if (reference.classes != prediction.classes)
    throw ShapeError("reference and prediction rolls use different class lists");
  if (std::abs(reference.frame_hop_seconds - prediction.frame_hop_seconds) > 1e-12)
    throw ShapeError("reference and prediction rolls use different frame hops");
  const std::size_t K = reference.num_classes(), T = reference.num_frames();
  const std::size_t n = (T + segment_frames - 1) / segment_frames;
  SegmentedComparison c;
  c.segment_frames = segment_frames;
  c.reference = Tensor<std::uint8_t>({K, n});
  c.prediction = Tensor<std::uint8_t>({K, n});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t s = t / segment_frames;
      c.reference.at(k, s) |= reference.at(k, t) ? 1 : 0;
      c.prediction.at(k, s) |= prediction.at(k, t) ? 1 : 0;
    }
  return c;
}

struct SegmentStats {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  std::uint64_t substitutions = 0, insertions = 0, deletions = 0, active = 0;

  SegmentStats& operator+=(const SegmentStats& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    substitutions += o.substitutions;
    insertions += o.insertions;
    deletions += o.deletions;
    active += o.active;
    return *this;
  }
  friend SegmentStats operator+(SegmentStats a, const SegmentStats& b) { return a += b; }
  bool operator==(const SegmentStats&) const = default;
};

inline SegmentStats accumulate_stats(const SegmentedComparison& c) {
  SegmentStats total;
  const std::size_t K = c.reference.rank() == 2 ? c.reference.dim(0) : 0;
  for (std::size_t s = 0; s < c.num_segments(); ++s) {
    std::uint64_t tp = 0, fp = 0, fn = 0, a = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const bool r = c.reference.at(k, s), p = c.prediction.at(k, s);
      tp += r && p;
      fp += !r && p;
      fn += r && !p;
      a += r;
    }
    const std::uint64_t sub = std::min(fn, fp);
    total.tp += tp;
    total.fp += fp;
    total.fn += fn;
    total.substitutions += sub;
    total.deletions += fn - sub;
    total.insertions += fp - sub;
    total.active += a;
  }
  return total;
}

struct PrecisionRecall {
  double precision = 0, recall = 0, f1 = 0;
};

inline PrecisionRecall f1_from_stats(const SegmentStats& s) {
  PrecisionRecall r;
  if (s.tp + s.fp > 0) r.precision = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp);
  if (s.tp + s.fn > 0) r.recall = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fn);
  if (r.precision + r.recall > 0) r.f1 = 2 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

inline double error_rate_from_stats(const SegmentStats& s) {
  if (s.active == 0) throw UndefinedMetricError("error rate undefined: no active reference classes");
  return static_cast<double>(s.substitutions + s.insertions + s.deletions) /
         static_cast<double>(s.active);
}

/// Number of frames in a one-second segment.
inline std::size_t one_second_frames(double frame_hop_seconds) {
  if (!(frame_hop_seconds > 0)) throw ConfigError("frame hop must be positive");
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(1.0 / frame_hop_seconds)));
}

inline double scene_average(const std::vector<double>& per_scene) {
  if (per_scene.empty()) throw EmptyInputError("scene average needs at least one scene");
  double sum = 0;
  for (double v : per_scene) sum += v;
  return sum / static_cast<double>(per_scene.size());
}

/// One evaluated recording: reference and prediction rolls plus its scene.
struct EvalItem {
  EventRoll reference;
  EventRoll prediction;
  std::string scene = "default";
};

/// F1 per segment, averaged over segments within each scene, then over
/// scenes. Segments empty in both rolls are skipped; so are scenes left
/// with no scorable segment.
inline double legacy_f1(const std::vector<EvalItem>& items, std::size_t segment_frames) {
  std::map<std::string, std::pair<double, std::size_t>> scenes;
  for (const auto& item : items) {
    const SegmentedComparison c = segment_rolls(item.reference, item.prediction, segment_frames);
    const std::size_t K = c.reference.dim(0);
    for (std::size_t s = 0; s < c.num_segments(); ++s) {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t k = 0; k < K; ++k) {
        const bool r = c.reference.at(k, s), p = c.prediction.at(k, s);
        tp += r && p;
        fp += !r && p;
        fn += r && !p;
      }
      if (tp + fp + fn == 0) continue;
      auto& acc = scenes[item.scene];
      acc.first += 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
      acc.second += 1;
    }
  }
  if (scenes.empty()) throw UndefinedMetricError("legacy F1 undefined: no scorable segments");
  std::vector<double> per_scene;
  for (const auto& [scene, acc] : scenes) per_scene.push_back(acc.first / static_cast<double>(acc.second));
  return scene_average(per_scene);
}

struct EerResult {
  std::vector<std::optional<double>> per_class;  // nullopt: class excluded
  std::vector<std::string> warnings;
  double mean = 0;
  std::size_t evaluated = 0;
};

/// Equal error rate of one score list. Operating points are visited from
/// the highest threshold down, equal scores forming a single threshold; the
/// crossing of FPR and FNR is interpolated linearly between neighbouring
/// points. Needs at least one positive and one negative.
inline double equal_error_rate(const std::vector<std::uint8_t>& labels,
                               const std::vector<float>& scores) {
  if (labels.size() != scores.size()) throw ShapeError("labels and scores differ in length");
  std::size_t P = 0, N = 0;
  for (auto l : labels) (l ? P : N) += 1;
  if (P == 0 || N == 0) throw UndefinedMetricError("EER needs positive and negative examples");
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  double fpr0 = 0, fnr0 = 1;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const float s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) (labels[order[i++]] ? tp : fp) += 1;
    const double fpr1 = static_cast<double>(fp) / static_cast<double>(N);
    const double fnr1 = static_cast<double>(P - tp) / static_cast<double>(P);
    if (fpr1 - fnr1 >= 0) {
      const double alpha = (fnr0 - fpr0) / ((fpr1 - fpr0) - (fnr1 - fnr0));
      return fpr0 + alpha * (fpr1 - fpr0);
    }
    fpr0 = fpr1;
    fnr0 = fnr1;
  }
  return fpr0;  // unreachable: the last point has FPR 1, FNR 0
}

/// Per-class EER over chunks; labels and scores are [K, chunks]. Classes
/// without both positive and negative chunks are excluded with a warning.
inline EerResult eer(const Tensor<std::uint8_t>& labels, const Tensor<float>& scores,
                     const std::vector<std::string>& classes) {
  require_rank(labels, 2, "EER labels");
  if (labels.shape() != scores.shape())
    throw ShapeError("EER labels " + shape_string(labels.shape()) + " and scores " +
                     shape_string(scores.shape()) + " differ in shape");
  const std::size_t K = labels.dim(0), N = labels.dim(1);
  if (classes.size() != K) throw ShapeError("EER class list does not match label rows");
  EerResult r;
  double sum = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<std::uint8_t> l(&labels.at(k, 0), &labels.at(k, 0) + N);
    std::vector<float> s(&scores.at(k, 0), &scores.at(k, 0) + N);
    const auto pos = static_cast<std::size_t>(std::count_if(l.begin(), l.end(), [](auto v) { return v != 0; }));
    if (pos == 0 || pos == N) {
      r.per_class.emplace_back();
      r.warnings.push_back("class " + classes[k] + " excluded from EER: no " +
                           (pos == 0 ? "positive" : "negative") + " chunks");
      continue;
    }
    const double e = equal_error_rate(l, s);
    r.per_class.emplace_back(e);
    sum += e;
    ++r.evaluated;
  }
  if (r.evaluated == 0) throw UndefinedMetricError("EER undefined: no class has both labels");
  r.mean = sum / static_cast<double>(r.evaluated);
  return r;
}

}  // namespace sedforge
