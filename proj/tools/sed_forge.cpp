#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sedforge/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sedforge;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string manifest;
  std::string out_dir;
  bool quiet = false;
};

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = run_stage("config", [&] {
    return c.config.empty() ? ExperimentConfig{} : read_config(c.config);
  });
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

DatasetManifest load_manifest(const Common& c) {
  if (c.manifest.empty()) throw StageError("manifest", "--manifest is required");
  return run_stage("manifest", [&] { return read_manifest(c.manifest); });
}

fs::path require_out_dir(const Common& c) {
  if (c.out_dir.empty()) throw StageError("args", "--out-dir is required");
  return c.out_dir;
}

std::ostream* progress(const Common& c) { return c.quiet ? nullptr : &std::cerr; }

/// Frames needed to cover every event in the lists.
std::size_t frames_covering(const std::vector<std::vector<EventAnnotation>*>& lists, double hop) {
  double end = 0;
  for (const auto* l : lists)
    for (const auto& e : *l) end = std::max(end, e.offset);
  return static_cast<std::size_t>(std::ceil(end / hop - 1e-6));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// ---- subcommands ----------------------------------------------------------------

int cmd_synth(const Common& c) {
  const ExperimentConfig cfg = load_config(c);
  const fs::path out = require_out_dir(c);
  run_stage("synth", [&] { synthesize_builtin(cfg, out); });
  std::cout << (out / "manifest.txt").string() << "\n";
  return 0;
}

int cmd_extract(const Common& c, const std::string& audio, const std::string& out_file) {
  const ExperimentConfig cfg = load_config(c);
  if (!audio.empty()) {
    if (out_file.empty()) throw StageError("args", "--out is required with --audio");
    run_stage("extract", [&] {
      write_feature_cache(out_file, extract_features(read_wav(audio), cfg.features));
    });
    return 0;
  }
  const DatasetManifest m = load_manifest(c);
  const fs::path out = require_out_dir(c);
  run_stage("extract", [&] {
    for (const auto& rec : m.recordings) {
      const FeatureMatrix fm = extract_features(read_wav(m.resolve(rec.audio_path)), cfg.features);
      write_feature_cache(out / (rec.id + ".sff"), fm);
      if (!c.quiet)
        std::cerr << rec.id << ": " << fm.num_bands() << " x " << fm.num_frames() << "\n";
    }
  });
  return 0;
}

int cmd_train(const Common& c, std::size_t fold, const std::string& out_model,
              const std::string& checkpoint, const std::string& resume) {
  const ExperimentConfig cfg = load_config(c);
  const DatasetManifest m = load_manifest(c);
  if (out_model.empty()) throw StageError("args", "--out is required");
  if (fold < 1 || fold > m.folds.size())
    throw StageError("args", "fold " + std::to_string(fold) + " does not exist");
  ExperimentConfig one = cfg;
  const DatasetFeatures data = run_stage("extract", [&] {
    return load_dataset_features(m, one, c.out_dir.empty() ? fs::path() : fs::path(c.out_dir) / "cache" / "features");
  });
  const FoldAssignment& fa = m.folds[fold - 1];
  auto train_set = detail::gather(data, fa.train);
  auto val_set = detail::gather(data, fa.val);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.train_seed();
  if (cfg.mode == ExperimentMode::Tagging) tc.sequence_length = data.frames_per_chunk;

  std::optional<Checkpoint> cp;
  if (!resume.empty()) cp = run_stage("resume", [&] { return load_checkpoint(resume); });
  const NormStats norm = cp ? cp->model.norm : run_stage("normalize", [&] {
    std::vector<FeatureMatrix> feats;
    for (const auto& r : train_set) feats.push_back(r.features);
    return compute_norm_stats(feats);
  });
  for (auto* split : {&train_set, &val_set})
    for (auto& r : *split) r.features = normalize(r.features, norm);

  Model model = cp ? std::move(cp->model)
                   : Model{nn::Network<float>(network_spec(cfg, cfg.layers, m.classes.size())),
                           cfg.features, m.classes, norm, tc.sequence_length};
  TrainState st = cp ? std::move(cp->state) : start_training(model.network);
  run_stage("train", [&] {
    continue_training(model.network, st, train_set, val_set, tc, tc.max_epochs,
                      [&](const TrainLogEntry& e) {
                        if (!c.quiet) std::cerr << TrainLog::format_entry(e);
                      });
  });
  if (!checkpoint.empty()) save_checkpoint(checkpoint, model, st);
  finish_training(model.network, st);
  run_stage("save", [&] {
    save_model(out_model, model);
    write_file_bytes(fs::path(out_model).replace_extension(".log.tsv"), st.log.format());
  });
  return 0;
}

int cmd_detect(const Common& c, const std::string& model_path, const std::string& audio,
               double threshold, const std::string& out, const std::string& emit_roll) {
  (void)c;
  if (model_path.empty() || audio.empty() || out.empty())
    throw StageError("args", "--model, --audio and --out are required");
  const Model model = run_stage("load", [&] { return load_model(model_path); });
  const ActivityProbabilities p =
      run_stage("detect", [&] { return predict_audio(model, read_wav(audio)); });
  const DetectionResult det = run_stage("detect", [&] { return detect(p, threshold); });
  run_stage("write", [&] {
    write_annotations(out, det.events);
    if (!emit_roll.empty()) write_file_bytes(emit_roll, encode_probabilities(p));
  });
  return 0;
}

int cmd_eval(const Common& c, const std::string& ref_dir, const std::string& pred_dir,
             const std::string& segment, bool by_scene, bool legacy, const std::string& out,
             double hop) {
  if (ref_dir.empty() || pred_dir.empty()) throw StageError("args", "--ref and --pred are required");
  if (segment != "frame" && segment != "1sec")
    throw StageError("args", "--segment must be frame or 1sec");
  std::optional<DatasetManifest> m;
  if (!c.manifest.empty()) m = load_manifest(c);
  return run_stage("eval", [&] {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(ref_dir))
      if (e.path().extension() == ".tsv") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw EmptyInputError("no .tsv annotation files in " + ref_dir);
    struct Pair {
      std::string id, scene;
      std::vector<EventAnnotation> ref, pred;
    };
    std::vector<Pair> pairs;
    std::set<std::string> class_set;
    for (const auto& f : files) {
      Pair p;
      p.id = f.stem().string();
      p.scene = "default";
      if (m) {
        for (const auto& r : m->recordings)
          if (r.id == p.id) p.scene = r.scene;
      }
      p.ref = read_annotations(f);
      const fs::path pf = fs::path(pred_dir) / f.filename();
      if (!fs::exists(pf)) throw IoError("missing prediction file " + pf.string());
      p.pred = read_annotations(pf);
      for (const auto& e : p.ref) class_set.insert(e.class_name);
      for (const auto& e : p.pred) class_set.insert(e.class_name);
      pairs.push_back(std::move(p));
    }
    const std::vector<std::string> classes =
        m ? m->classes : std::vector<std::string>(class_set.begin(), class_set.end());
    const std::size_t seg = segment == "frame" ? 1 : one_second_frames(hop);
    std::map<std::string, SegmentStats> per_scene;
    std::vector<EvalItem> items;
    for (auto& p : pairs) {
      std::size_t T = frames_covering({&p.ref, &p.pred}, hop);
      if (m) {
        for (const auto& r : m->recordings)
          if (r.id == p.id) {
            const AudioClip a = read_wav(m->resolve(r.audio_path));
            T = std::max(T, static_cast<std::size_t>(std::floor(
                                a.samples.size() / static_cast<double>(a.sample_rate) / hop)));
          }
      }
      EvalItem it{build_target_matrix(p.ref, classes, T, hop),
                  build_target_matrix(p.pred, classes, T, hop), by_scene ? p.scene : "all"};
      per_scene[it.scene] += accumulate_stats(segment_rolls(it.reference, it.prediction, seg));
      items.push_back(std::move(it));
    }
    std::ostringstream r;
    r << "segment\t" << segment << "\n";
    if (legacy) r << "legacy_f1\t" << detail::fmt(legacy_f1(items, seg)) << "\n";
    r << "scene\tprecision\trecall\tf1\terror_rate\n";
    StatsTable t;
    t[segment] = per_scene;
    for (const auto& row : metric_rows(t))
      r << row.scene << '\t' << detail::fmt(row.precision) << '\t' << detail::fmt(row.recall)
        << '\t' << detail::fmt(row.f1) << '\t'
        << (row.error_rate ? detail::fmt(*row.error_rate) : "undefined") << "\n";
    if (out.empty()) std::cout << r.str();
    else write_file_bytes(out, r.str());
    return 0;
  });
}

int cmd_run(const Common& c) {
  const ExperimentConfig cfg = load_config(c);
  const fs::path out = require_out_dir(c);
  DatasetManifest m = c.manifest.empty()
                          ? run_stage("synth", [&] { return synthesize_builtin(cfg, out / "dataset"); })
                          : load_manifest(c);
  const ExperimentResult r = run_experiment(cfg, m, out, progress(c));
  std::cout << r.report;
  return 0;
}

int cmd_compare(const Common& c, const std::string& variants) {
  const ExperimentConfig cfg = load_config(c);
  const fs::path out = require_out_dir(c);
  DatasetManifest m = c.manifest.empty()
                          ? run_stage("synth", [&] { return synthesize_builtin(cfg, out / "dataset"); })
                          : load_manifest(c);
  const ComparisonResult r =
      compare_architectures(cfg, m, out, split_list(variants), progress(c));
  std::cout << r.report;
  return 0;
}

int cmd_visualize(const Common& c, const std::string& model_path, const std::string& units,
                  std::size_t steps, double step_size, std::size_t frames, bool png) {
  if (model_path.empty()) throw StageError("args", "--model is required");
  const fs::path out = require_out_dir(c);
  const Model model = run_stage("load", [&] { return load_model(model_path); });
  return run_stage("visualize", [&] {
    const auto sel = parse_unit_selectors(split_list(units), model.network.spec());
    nn::AscentOptions opt;
    opt.steps = steps;
    opt.step_size = step_size;
    opt.frames = frames;
    opt.seed = c.seed.value_or(0);
    for (const auto& v : visualize_filters(model, sel, out, opt, png))
      std::cout << v.matrix_path.string() << "\t" << v.ascent.initial_activation << " -> "
                << v.ascent.final_activation << "\n";
    return 0;
  });
}

int cmd_plot(const Common& c, const std::string& annotations, const std::string& roll,
             const std::string& out, double hop, std::size_t scale) {
  (void)c;
  if (out.empty()) throw StageError("args", "--out is required");
  if (annotations.empty() == roll.empty())
    throw StageError("args", "give exactly one of --annotations and --roll");
  return run_stage("plot", [&] {
    if (!roll.empty()) {
      const auto p = decode_probabilities(read_file_bytes(roll));
      write_png(out, render_matrix(p.values, scale));
      return 0;
    }
    auto events = read_annotations(annotations);
    std::set<std::string> cs;
    for (const auto& e : events) cs.insert(e.class_name);
    const std::vector<std::string> classes(cs.begin(), cs.end());
    if (classes.empty()) throw EmptyInputError("annotation file has no events");
    const EventRoll r = build_target_matrix(events, classes, frames_covering({&events}, hop), hop);
    Tensor<float> m(r.activity.shape());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = r.activity[i];
    write_png(out, render_matrix(m, scale));
    return 0;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sed-forge: polyphonic sound event detection with convolutional recurrent networks"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Experiment seed");
  app.add_option("--config", common.config, "INI configuration file");
  app.add_option("--manifest", common.manifest, "Dataset manifest");
  app.add_option("--out-dir", common.out_dir, "Output directory");
  app.add_flag("-q,--quiet", common.quiet, "No progress output");
  for (auto* opt : app.get_options()) opt->configurable(false);

  app.add_subcommand("synth", "Generate the builtin synthetic dataset");
  auto* extract = app.add_subcommand("extract", "Compute log-mel feature caches");
  std::string audio, out;
  extract->add_option("--audio", audio, "Single WAV file instead of a manifest");
  extract->add_option("--out", out, "Output feature file for --audio");

  auto* train = app.add_subcommand("train", "Train one fold and save the model");
  std::size_t fold = 1;
  std::string checkpoint, resume;
  train->add_option("--fold", fold, "Fold to train (1-based)");
  train->add_option("--out", out, "Model file to write");
  train->add_option("--checkpoint", checkpoint, "Also write a resumable checkpoint");
  train->add_option("--resume", resume, "Continue from a checkpoint");

  auto* detect_cmd = app.add_subcommand("detect", "Detect events in a recording");
  std::string model_path, emit_roll;
  double threshold = kDefaultThreshold;
  detect_cmd->add_option("--model", model_path, "Model file");
  detect_cmd->add_option("--audio", audio, "WAV file");
  detect_cmd->add_option("--threshold", threshold, "Binarization threshold in (0, 1)");
  detect_cmd->add_option("--out", out, "Event list to write");
  detect_cmd->add_option("--emit-roll", emit_roll, "Also write the probability matrix");

  auto* eval_cmd = app.add_subcommand("eval", "Score predicted against reference annotations");
  std::string ref_dir, pred_dir, segment = "frame";
  bool by_scene = false, legacy = false;
  double hop = 0.02;
  eval_cmd->add_option("--ref", ref_dir, "Directory of reference annotation files");
  eval_cmd->add_option("--pred", pred_dir, "Directory of predicted annotation files");
  eval_cmd->add_option("--segment", segment, "frame or 1sec");
  eval_cmd->add_flag("--by-scene", by_scene, "Report per scene (needs --manifest)");
  eval_cmd->add_flag("--legacy", legacy, "Also report legacy segment-averaged F1");
  eval_cmd->add_option("--hop", hop, "Frame hop in seconds");
  eval_cmd->add_option("--out", out, "Report file (default: stdout)");

  app.add_subcommand("run", "Extract, train, detect and evaluate every fold");
  auto* compare = app.add_subcommand("compare", "Train CRNN, CNN and RNN variants side by side");
  std::string variants = "crnn,cnn,rnn";
  compare->add_option("--variants", variants, "Comma-separated subset of crnn,cnn,rnn");

  auto* visualize = app.add_subcommand("visualize", "Input patterns maximizing conv units");
  std::string units = "0:*";
  std::size_t steps = 100, frames = 32;
  double step_size = 0.1;
  bool png = false;
  visualize->add_option("--model", model_path, "Model file");
  visualize->add_option("--units", units, "Selectors L:U, L:* or all, comma separated");
  visualize->add_option("--steps", steps, "Gradient ascent updates");
  visualize->add_option("--step-size", step_size, "Step length");
  visualize->add_option("--frames", frames, "Pattern width in frames");
  visualize->add_flag("--png", png, "Also render PNG images");

  auto* plot = app.add_subcommand("plot", "Render an event roll or probability matrix as PNG");
  std::string annotations, roll;
  std::size_t scale = 4;
  plot->add_option("--annotations", annotations, "Annotation file");
  plot->add_option("--roll", roll, "Probability matrix written by detect --emit-roll");
  plot->add_option("--hop", hop, "Frame hop in seconds");
  plot->add_option("--scale", scale, "Pixels per cell");
  plot->add_option("--out", out, "PNG file to write");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (seed_opt->count()) common.seed = seed_value;

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "synth") return cmd_synth(common);
    if (name == "extract") return cmd_extract(common, audio, out);
    if (name == "train") return cmd_train(common, fold, out, checkpoint, resume);
    if (name == "detect") return cmd_detect(common, model_path, audio, threshold, out, emit_roll);
    if (name == "eval")
      return cmd_eval(common, ref_dir, pred_dir, segment, by_scene, legacy, out, hop);
    if (name == "run") return cmd_run(common);
    if (name == "compare") return cmd_compare(common, variants);
    if (name == "visualize")
      return cmd_visualize(common, model_path, units, steps, step_size, frames, png);
    if (name == "plot") return cmd_plot(common, annotations, roll, out, hop, scale);
  } catch (const StageError& e) {
    std::cerr << "sed-forge " << name << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "sed-forge " << name << ": " << e.what() << "\n";
    return 1;
  }
  return 1;
}
