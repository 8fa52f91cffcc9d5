#pragma once

#include <filesystem>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sedforge/annotations.hpp"
#include "sedforge/audio.hpp"
#include "sedforge/config.hpp"
#include "sedforge/error.hpp"
#include "sedforge/features.hpp"
#include "sedforge/image.hpp"
#include "sedforge/inference.hpp"
#include "sedforge/manifest.hpp"
#include "sedforge/metrics.hpp"
#include "sedforge/model_io.hpp"
#include "sedforge/nn/gradient_ascent.hpp"
#include "sedforge/synth.hpp"
#include "sedforge/train.hpp"

namespace sedforge {

namespace fs = std::filesystem;

/// An error tagged with the pipeline stage it came from.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

template <class F>
auto run_stage(const std::string& stage, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

// ---- synthesis ----------------------------------------------------------------------

/// Generates the builtin synthetic dataset under out_dir and returns its manifest.
inline DatasetManifest synthesize_builtin(const ExperimentConfig& cfg, const fs::path& out_dir) {
  SynthConfig sc = cfg.synth;
  sc.seed = cfg.seed;
  BankConfig bc = cfg.bank;
  bc.sample_rate = cfg.features.sample_rate;
  const EventBank bank = builtin_event_bank(derive_seed(cfg.seed, {0x62616e6bULL}), bc);
  const GeneratedDataset ds = generate_dataset(bank, sc);
  return write_dataset(out_dir, bank, ds, cfg.scene);
}

// ---- feature extraction ---------------------------------------------------------------

inline std::string feature_config_key(const FeatureConfig& f) {
  const std::string text = std::to_string(f.sample_rate) + " " + nn::format_real(f.frame_seconds) +
                           " " + nn::format_real(f.overlap) + " " + std::to_string(f.num_bands);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Unnormalized features plus targets of every recording, or of every chunk
/// of every recording in tagging mode. Features are cached under
/// `cache_dir/<feature config key>/` (empty cache_dir: no caching).
struct DatasetFeatures {
  std::vector<std::string> classes;
  std::vector<LabeledRecording> items;
  std::map<std::string, std::vector<std::size_t>> by_recording;  // recording id -> item indices
  std::size_t frames_per_chunk = 0;                                // tagging only
};

inline FeatureMatrix cached_features(const fs::path& cache_file, const AudioClip& clip,
                                     const FeatureConfig& fc) {
  if (!cache_file.empty() && fs::exists(cache_file)) {
    try {
      return read_feature_cache(cache_file);
    } catch (const CorruptFileError&) {
      // stale or truncated cache entry: recompute below
    }
  }
  FeatureMatrix fm = extract_features(clip, fc);
  if (!cache_file.empty()) write_feature_cache(cache_file, fm);
  return fm;
}

inline DatasetFeatures load_dataset_features(const DatasetManifest& m, const ExperimentConfig& cfg,
                                             const fs::path& cache_dir) {
  DatasetFeatures out;
  out.classes = m.classes;
  const fs::path dir = cache_dir.empty() ? fs::path() : cache_dir / feature_config_key(cfg.features);
  const bool tagging = cfg.mode == ExperimentMode::Tagging;
  for (const auto& rec : m.recordings) {
    const AudioClip audio = read_wav(m.resolve(rec.audio_path));
    const auto events = read_annotations(m.resolve(rec.annotation_path));
    std::vector<Chunk> parts;
    if (tagging) {
      parts = chunk_recording(rec.id, audio, events, cfg.chunk_seconds);
      if (parts.empty())
        throw ValidationError("recording " + rec.id + " is shorter than one chunk");
    } else {
      parts.push_back({rec.id, audio, events});
    }
    for (auto& part : parts) {
      LabeledRecording item;
      item.id = part.id;
      item.scene = rec.scene;
      item.features = cached_features(dir.empty() ? fs::path() : dir / (part.id + ".sff"), part.audio,
                                      cfg.features);
      item.targets = build_target_matrix(part.annotations, m.classes, item.features.num_frames(),
                                         item.features.frame_hop_seconds);
      if (tagging) {
        if (out.frames_per_chunk && out.frames_per_chunk != item.features.num_frames())
          throw ValidationError("chunks differ in frame count; use one sample rate per dataset");
        out.frames_per_chunk = item.features.num_frames();
      }
      out.by_recording[rec.id].push_back(out.items.size());
      out.items.push_back(std::move(item));
    }
  }
  return out;
}

// ---- per-fold statistics ----------------------------------------------------------------

/// resolution ("frame" or "1sec") -> scene -> stats
using StatsTable = std::map<std::string, std::map<std::string, SegmentStats>>;

inline void merge_stats(StatsTable& into, const StatsTable& from) {
  for (const auto& [res, scenes] : from)
    for (const auto& [scene, s] : scenes) into[res][scene] += s;
}

inline std::string format_stats_table(const StatsTable& t) {
  std::ostringstream o;
  o << "resolution\tscene\ttp\tfp\tfn\tsubstitutions\tinsertions\tdeletions\tactive\n";
  for (const auto& [res, scenes] : t)
    for (const auto& [scene, s] : scenes)
      o << res << '\t' << scene << '\t' << s.tp << '\t' << s.fp << '\t' << s.fn << '\t'
        << s.substitutions << '\t' << s.insertions << '\t' << s.deletions << '\t' << s.active
        << '\n';
  return o.str();
}

inline StatsTable parse_stats_table(const std::string& text) {
  StatsTable t;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string res, scene;
    SegmentStats s;
    if (!(ls >> res >> scene >> s.tp >> s.fp >> s.fn >> s.substitutions >> s.insertions >>
          s.deletions >> s.active))
      throw ParseError(0, "bad stats line '" + line + "'");
    t[res][scene] += s;
  }
  return t;
}

struct MetricRow {
  std::string resolution, scene;  // scene may be "scene_average" or "pooled"
  double precision = 0, recall = 0, f1 = 0;
  std::optional<double> error_rate;
};

inline std::vector<MetricRow> metric_rows(const StatsTable& t) {
  std::vector<MetricRow> rows;
  for (const auto& [res, scenes] : t) {
    SegmentStats pooled;
    std::vector<double> f1s, ers;
    bool er_defined = true;
    for (const auto& [scene, s] : scenes) {
      pooled += s;
      const auto prf = f1_from_stats(s);
      MetricRow r{res, scene, prf.precision, prf.recall, prf.f1, std::nullopt};
      if (s.active) r.error_rate = error_rate_from_stats(s);
      else er_defined = false;
      f1s.push_back(prf.f1);
      if (r.error_rate) ers.push_back(*r.error_rate);
      rows.push_back(r);
    }
    if (scenes.size() > 1) {
      MetricRow avg{res, "scene_average", 0, 0, scene_average(f1s), std::nullopt};
      double p = 0, rc = 0;
      for (const auto& [scene, s] : scenes) {
        p += f1_from_stats(s).precision;
        rc += f1_from_stats(s).recall;
      }
      avg.precision = p / static_cast<double>(scenes.size());
      avg.recall = rc / static_cast<double>(scenes.size());
      if (er_defined) avg.error_rate = scene_average(ers);
      rows.push_back(avg);
    }
    const auto prf = f1_from_stats(pooled);
    MetricRow all{res, "pooled", prf.precision, prf.recall, prf.f1, std::nullopt};
    if (pooled.active) all.error_rate = error_rate_from_stats(pooled);
    rows.push_back(all);
  }
  return rows;
}

inline SegmentStats pooled_stats(const StatsTable& t, const std::string& resolution) {
  SegmentStats s;
  const auto it = t.find(resolution);
  if (it != t.end())
    for (const auto& [scene, st] : it->second) s += st;
  return s;
}

// ---- experiment ---------------------------------------------------------------------------

struct FoldResult {
  std::size_t index = 0;  // 1-based
  StatsTable stats;
  TrainLog log;
  fs::path model_path;
};

struct ExperimentResult {
  std::vector<FoldResult> folds;
  StatsTable pooled;                 // summed over folds
  StatsTable baseline_silent;        // all-zero predictions on the same test rolls
  StatsTable baseline_active;        // all-one predictions
  std::optional<double> legacy_f1;   // 1-second segments
  std::optional<EerResult> eer;      // tagging mode
  std::string report;
  fs::path report_path;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::vector<LabeledRecording> gather(const DatasetFeatures& data,
                                            const std::vector<std::string>& ids) {
  std::vector<LabeledRecording> out;
  for (const auto& id : ids) {
    const auto it = data.by_recording.find(id);
    if (it == data.by_recording.end()) throw ValidationError("no features for recording " + id);
    for (std::size_t i : it->second) out.push_back(data.items[i]);
  }
  return out;
}

inline EventRoll constant_roll(const EventRoll& like, std::uint8_t value) {
  EventRoll r(like.classes, like.num_frames(), like.frame_hop_seconds);
  r.activity.fill(value);
  return r;
}

}  // namespace detail

/// extract -> per fold: normalize (training recordings only), train, detect,
/// evaluate -> pooled report. Artifacts land under out_dir:
///   cache/features/<key>/*.sff, fold<i>/{model.sfm, train_log.tsv, stats.tsv,
///   provenance.txt, predictions/*.tsv}, report.txt
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const DatasetManifest& manifest,
                                       const fs::path& out_dir, std::ostream* log = nullptr,
                                       const std::string& layers_override = {}) {
  run_stage("config", [&] { validate(cfg); });
  run_stage("manifest", [&] { validate_manifest(manifest); });
  const std::string layers = layers_override.empty() ? cfg.layers : layers_override;
  const bool tagging = cfg.mode == ExperimentMode::Tagging;

  const DatasetFeatures data = run_stage("extract", [&] {
    return load_dataset_features(manifest, cfg, out_dir / "cache" / "features");
  });
  const std::size_t K = manifest.classes.size();
  TrainConfig tc = cfg.train;
  tc.seed = cfg.train_seed();
  if (tagging) tc.sequence_length = data.frames_per_chunk;

  std::vector<std::size_t> folds = cfg.folds;
  if (folds.empty())
    for (std::size_t i = 1; i <= manifest.folds.size(); ++i) folds.push_back(i);

  ExperimentResult result;
  std::vector<EvalItem> legacy_items;
  std::vector<Tensor<std::uint8_t>> chunk_labels;
  std::vector<Tensor<float>> chunk_scores;
  for (std::size_t f : folds) {
    if (f < 1 || f > manifest.folds.size())
      throw StageError("config", "fold " + std::to_string(f) + " does not exist in the manifest");
    const std::string stage = "fold " + std::to_string(f);
    const FoldAssignment& fa = manifest.folds[f - 1];
    const fs::path fold_dir = out_dir / ("fold" + std::to_string(f));
    FoldResult fr;
    fr.index = f;

    auto train_set = detail::gather(data, fa.train);
    auto val_set = detail::gather(data, fa.val);
    auto test_set = detail::gather(data, fa.test);
    const NormStats norm = run_stage(stage + " normalize", [&] {
      std::vector<FeatureMatrix> feats;
      for (const auto& r : train_set) feats.push_back(r.features);
      return compute_norm_stats(feats);
    });
    for (auto* split : {&train_set, &val_set, &test_set})
      for (auto& r : *split) r.features = normalize(r.features, norm);
    {
      std::ostringstream prov;
      prov << "norm_stats " << norm.identity() << "\n";
      for (const auto& [role, ids] : {std::pair{"train", &fa.train}, std::pair{"val", &fa.val},
                                      std::pair{"test", &fa.test}}) {
        prov << role;
        for (const auto& id : *ids) prov << '\t' << id;
        prov << '\n';
      }
      write_file_bytes(fold_dir / "provenance.txt", prov.str());
    }

    Model model = run_stage(stage + " train", [&] {
      nn::Network<float> net(network_spec(cfg, layers, K));
      fr.log = train(net, train_set, val_set, tc, [&](const TrainLogEntry& e) {
        if (log) *log << "[" << stage << "] " << TrainLog::format_entry(e);
      });
      return Model{std::move(net), cfg.features, manifest.classes, norm, tc.sequence_length};
    });
    fr.model_path = fold_dir / "model.sfm";
    save_model(fr.model_path, model);
    write_file_bytes(fold_dir / "train_log.tsv", fr.log.format());

    run_stage(stage + " detect", [&] {
      for (const auto& rec : test_set) {
        const ActivityProbabilities p = predict(model.network, rec.features, tc.sequence_length,
                                                manifest.classes);
        const DetectionResult det = detect(p, cfg.threshold);
        write_annotations(fold_dir / "predictions" / (rec.id + ".tsv"), det.events);
        EventRoll ref = rec.targets;
        if (tagging) {
          ref = EventRoll(rec.targets.classes, p.num_frames(), p.frame_hop_seconds);
          ref.activity = window_labels(rec.targets, tc.sequence_length);
          chunk_labels.push_back(ref.activity);
          chunk_scores.push_back(p.values);
          fr.stats["chunk"][rec.scene] += accumulate_stats(segment_rolls(ref, det.roll, 1));
          continue;
        }
        const std::size_t sec = one_second_frames(ref.frame_hop_seconds);
        fr.stats["frame"][rec.scene] += accumulate_stats(segment_rolls(ref, det.roll, 1));
        fr.stats["1sec"][rec.scene] += accumulate_stats(segment_rolls(ref, det.roll, sec));
        for (std::uint8_t v : {0, 1}) {
          auto& base = v ? result.baseline_active : result.baseline_silent;
          const EventRoll c = detail::constant_roll(ref, v);
          base["frame"][rec.scene] += accumulate_stats(segment_rolls(ref, c, 1));
          base["1sec"][rec.scene] += accumulate_stats(segment_rolls(ref, c, sec));
        }
        legacy_items.push_back({ref, det.roll, rec.scene});
      }
    });
    write_file_bytes(fold_dir / "stats.tsv", format_stats_table(fr.stats));
    merge_stats(result.pooled, fr.stats);
    result.folds.push_back(std::move(fr));
  }

  run_stage("eval", [&] {
    if (!legacy_items.empty()) {
      try {
        result.legacy_f1 = legacy_f1(
            legacy_items, one_second_frames(legacy_items.front().reference.frame_hop_seconds));
      } catch (const UndefinedMetricError&) {
      }
    }
    if (tagging && !chunk_labels.empty()) {
      std::size_t n = 0;
      for (const auto& l : chunk_labels) n += l.dim(1);
      Tensor<std::uint8_t> labels({K, n});
      Tensor<float> scores({K, n});
      std::size_t col = 0;
      for (std::size_t i = 0; i < chunk_labels.size(); ++i)
        for (std::size_t c = 0; c < chunk_labels[i].dim(1); ++c, ++col)
          for (std::size_t k = 0; k < K; ++k) {
            labels.at(k, col) = chunk_labels[i].at(k, c);
            scores.at(k, col) = chunk_scores[i].at(k, c);
          }
      result.eer = eer(labels, scores, manifest.classes);
    }

    std::ostringstream r;
    r << "sedforge-report 1\n";
    r << "mode\t" << mode_name(cfg.mode) << "\n";
    r << "layers\t" << layers << "\n";
    r << "seed\t" << cfg.seed << "\n";
    r << "threshold\t" << nn::format_real(cfg.threshold) << "\n";
    r << "folds";
    for (std::size_t f : folds) r << '\t' << f;
    r << "\n";
    r << "classes";
    for (const auto& c : manifest.classes) r << '\t' << c;
    r << "\n";
    for (const auto& fr : result.folds) {
      std::size_t best_epoch = 0;
      for (const auto& e : fr.log.entries)
        if (e.event.find("best") != std::string::npos) best_epoch = e.epoch;
      r << "fold" << fr.index << "_epochs\t" << fr.log.entries.size() << "\n";
      r << "fold" << fr.index << "_best_epoch\t" << best_epoch << "\n";
    }
    if (result.legacy_f1) r << "legacy_f1_1sec\t" << detail::fmt(*result.legacy_f1) << "\n";
    if (result.eer) {
      r << "eer_mean\t" << detail::fmt(result.eer->mean) << "\n";
      for (std::size_t k = 0; k < K; ++k)
        r << "eer_" << manifest.classes[k] << '\t'
          << (result.eer->per_class[k] ? detail::fmt(*result.eer->per_class[k]) : "excluded")
          << "\n";
    }
    r << "\nresolution\tscene\tprecision\trecall\tf1\terror_rate\n";
    const auto table = [&](const StatsTable& t, const std::string& prefix) {
      for (const auto& row : metric_rows(t))
        r << row.resolution << '\t' << prefix << row.scene << '\t' << detail::fmt(row.precision)
          << '\t' << detail::fmt(row.recall) << '\t' << detail::fmt(row.f1) << '\t'
          << (row.error_rate ? detail::fmt(*row.error_rate) : "undefined") << "\n";
    };
    table(result.pooled, "");
    table(result.baseline_silent, "baseline_silent:");
    table(result.baseline_active, "baseline_active:");
    result.report = r.str();
    result.report_path = out_dir / "report.txt";
    write_file_bytes(result.report_path, result.report);
  });
  return result;
}

// ---- architecture comparison ------------------------------------------------------------------

/// CNN and RNN counterparts of a CRNN layer stack: the RNN drops the
/// convolutional stage, the CNN replaces each GRU by a ReLU dense layer with
/// batch normalization.
inline std::string derive_variant_layers(const std::string& crnn_layers, const std::string& variant,
                                         std::size_t num_classes) {
  const auto layers = nn::parse_layers(crnn_layers, num_classes);
  std::vector<nn::LayerSpec> out;
  if (variant == "crnn") return crnn_layers;
  if (variant == "rnn") {
    bool conv_stage = true;
    for (const auto& l : layers) {
      if (std::holds_alternative<nn::RecurrentSpec>(l) || std::holds_alternative<nn::DenseSpec>(l) ||
          std::holds_alternative<nn::TemporalMaxPoolSpec>(l))
        conv_stage = false;
      if (!conv_stage) out.push_back(l);
    }
    if (std::none_of(out.begin(), out.end(), [](const auto& l) {
          return std::holds_alternative<nn::RecurrentSpec>(l);
        }))
      throw ConfigError("cannot derive an RNN variant: the stack has no recurrent layer");
  } else if (variant == "cnn") {
    for (const auto& l : layers) {
      if (const auto* r = std::get_if<nn::RecurrentSpec>(&l)) {
        out.emplace_back(nn::DenseSpec{r->units, nn::Activation::Relu});
        out.emplace_back(nn::BatchNormSpec{});
      } else {
        out.push_back(l);
      }
    }
    if (std::none_of(out.begin(), out.end(),
                     [](const auto& l) { return std::holds_alternative<nn::ConvSpec>(l); }))
      throw ConfigError("cannot derive a CNN variant: the stack has no convolutional layer");
  } else {
    throw ConfigError("unknown architecture variant '" + variant + "' (crnn, cnn, rnn)");
  }
  return nn::format_layers(out);
}

struct ComparisonRow {
  std::string variant, layers;
  double f1_frame = 0, f1_1sec = 0;
  std::optional<double> er_frame, er_1sec;
};

struct ComparisonResult {
  std::vector<ComparisonRow> rows;
  std::vector<ExperimentResult> runs;
  std::string report;
};

inline ComparisonResult compare_architectures(const ExperimentConfig& cfg,
                                              const DatasetManifest& manifest,
                                              const fs::path& out_dir,
                                              const std::vector<std::string>& variants = {"crnn", "cnn", "rnn"},
                                              std::ostream* log = nullptr) {
  if (cfg.mode != ExperimentMode::Frame)
    throw StageError("compare", "architecture comparison runs in frame mode");
  ComparisonResult res;
  std::ostringstream r;
  r << "variant\tF1_frm\tF1_1sec\tER_frm\tER_1sec\tlayers\n";
  const auto er = [](const std::optional<double>& v) { return v ? detail::fmt(*v) : std::string("undefined"); };
  const auto row_of = [&](const std::string& name, const std::string& layers, const StatsTable& t) {
    ComparisonRow row;
    row.variant = name;
    row.layers = layers;
    const SegmentStats fs_ = pooled_stats(t, "frame"), ss = pooled_stats(t, "1sec");
    row.f1_frame = f1_from_stats(fs_).f1;
    row.f1_1sec = f1_from_stats(ss).f1;
    if (fs_.active) row.er_frame = error_rate_from_stats(fs_);
    if (ss.active) row.er_1sec = error_rate_from_stats(ss);
    r << row.variant << '\t' << detail::fmt(row.f1_frame) << '\t' << detail::fmt(row.f1_1sec)
      << '\t' << er(row.er_frame) << '\t' << er(row.er_1sec) << '\t' << row.layers << "\n";
    return row;
  };
  for (const auto& v : variants) {
    const std::string layers = run_stage("compare", [&] {
      if (v == "cnn" && !cfg.cnn_layers.empty()) return cfg.cnn_layers;
      if (v == "rnn" && !cfg.rnn_layers.empty()) return cfg.rnn_layers;
      return derive_variant_layers(cfg.layers, v, manifest.classes.size());
    });
    if (log) *log << "[compare] " << v << ": " << layers << "\n";
    res.runs.push_back(run_experiment(cfg, manifest, out_dir / v, log, layers));
    res.rows.push_back(row_of(v, layers, res.runs.back().pooled));
  }
  if (!res.runs.empty()) row_of("baseline_silent", "-", res.runs.front().baseline_silent);
  res.report = r.str();
  write_file_bytes(out_dir / "comparison.tsv", res.report);
  return res;
}

// ---- detection from audio -----------------------------------------------------------------------

/// Probabilities for one recording. Unnormalized features are normalized with
/// the model's statistics; already normalized ones must carry its identity.
inline ActivityProbabilities predict_with_model(const Model& model, const FeatureMatrix& features) {
  if (features.num_bands() != model.network.spec().input_bands)
    throw ShapeError("features have " + std::to_string(features.num_bands()) +
                     " bands, model expects " + std::to_string(model.network.spec().input_bands));
  if (features.normalized) {
    if (features.stats_identity != model.norm.identity())
      throw ValidationError("features were normalized with statistics " + features.stats_identity +
                            ", model expects " + model.norm.identity());
    return predict(model.network, features, model.sequence_length, model.classes);
  }
  return predict(model.network, normalize(features, model.norm), model.sequence_length,
                 model.classes);
}

inline ActivityProbabilities predict_audio(const Model& model, const AudioClip& clip) {
  return predict_with_model(model, extract_features(clip, model.features));
}

// ---- filter visualization -------------------------------------------------------------------------

struct UnitSelector {
  std::size_t layer = 0;
  std::size_t unit = 0;
};

/// "L:U" selects one unit, "L:*" every unit of conv layer L, "all" every unit.
inline std::vector<UnitSelector> parse_unit_selectors(const std::vector<std::string>& texts,
                                                      const nn::NetworkSpec& spec) {
  std::vector<std::size_t> maps;
  for (const auto& l : spec.layers)
    if (const auto* c = std::get_if<nn::ConvSpec>(&l)) maps.push_back(c->maps);
  if (maps.empty()) throw ConfigError("model has no convolutional layers to visualize");
  std::vector<UnitSelector> out;
  const auto number = [](const std::string& s, const std::string& whole) {
    try {
      std::size_t used = 0;
      const long v = std::stol(s, &used);
      if (used == s.size() && v >= 0) return static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
    }
    throw ConfigError("bad unit selector '" + whole + "' (expected L:U, L:* or all)");
  };
  for (const auto& t : texts) {
    if (t == "all") {
      for (std::size_t l = 0; l < maps.size(); ++l)
        for (std::size_t u = 0; u < maps[l]; ++u) out.push_back({l, u});
      continue;
    }
    const auto colon = t.find(':');
    if (colon == std::string::npos) throw ConfigError("bad unit selector '" + t + "'");
    const std::size_t l = number(t.substr(0, colon), t);
    if (l >= maps.size())
      throw ConfigError("selector '" + t + "': conv layer " + std::to_string(l) +
                        " does not exist (model has " + std::to_string(maps.size()) + ")");
    const std::string u = t.substr(colon + 1);
    if (u == "*") {
      for (std::size_t i = 0; i < maps[l]; ++i) out.push_back({l, i});
      continue;
    }
    const std::size_t ui = number(u, t);
    if (ui >= maps[l])
      throw ConfigError("selector '" + t + "': layer " + std::to_string(l) + " has " +
                        std::to_string(maps[l]) + " units");
    out.push_back({l, ui});
  }
  return out;
}

struct VisualizedUnit {
  UnitSelector unit;
  nn::AscentResult ascent;
  fs::path matrix_path, image_path;
};

/// One pattern per selected unit: <out>/unit_L<l>_U<u>.txt (and .png when
/// `png`), plus an index visualize.tsv.
inline std::vector<VisualizedUnit> visualize_filters(const Model& model,
                                                     const std::vector<UnitSelector>& units,
                                                     const fs::path& out_dir,
                                                     const nn::AscentOptions& opt, bool png) {
  std::vector<VisualizedUnit> out;
  std::ostringstream index;
  index << "layer\tunit\tinitial_activation\tfinal_activation\taccepted_steps\tmatrix\n";
  for (const auto& sel : units) {
    VisualizedUnit v;
    v.unit = sel;
    v.ascent = nn::input_gradient_ascent(model.network, sel.layer, sel.unit, opt);
    const std::string stem = "unit_L" + std::to_string(sel.layer) + "_U" + std::to_string(sel.unit);
    v.matrix_path = out_dir / (stem + ".txt");
    write_file_bytes(v.matrix_path, format_matrix_text(v.ascent.pattern));
    if (png) {
      v.image_path = out_dir / (stem + ".png");
      write_png(v.image_path, render_matrix(v.ascent.pattern, 4));
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu\t%zu\t%.9g\t%.9g\t%zu\t", sel.layer, sel.unit,
                  v.ascent.initial_activation, v.ascent.final_activation,
                  v.ascent.accepted_steps);
    index << buf << v.matrix_path.filename().string() << "\n";
    out.push_back(std::move(v));
  }
  write_file_bytes(out_dir / "visualize.tsv", index.str());
  return out;
}

}  // namespace sedforge
