#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "sedforge/annotations.hpp"
#include "sedforge/audio.hpp"
#include "sedforge/error.hpp"
#include "sedforge/manifest.hpp"
#include "sedforge/random.hpp"

namespace sedforge {

/// One isolated event recording in a sample library.
struct EventSample {
  std::string id;
  std::string class_name;
  AudioClip clip;
  double band_lo_hz = 0.0;  // declared band of the dominant spectral peak
  double band_hi_hz = 0.0;
};

struct EventBank {
  std::vector<std::string> classes;
  std::vector<EventSample> samples;
  double rms_lo = 0.0, rms_hi = 0.0;  // declared instance RMS range (0 = undeclared)

  std::vector<std::size_t> instances_of(const std::string& cls) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].class_name == cls) out.push_back(i);
    return out;
  }
};

struct BankConfig {
  int sample_rate = 44100;
  std::size_t instances_per_class = 12;
  double min_seconds = 4.0;
  double max_seconds = 8.0;
};

inline double rms(const std::vector<float>& x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (float v : x) s += static_cast<double>(v) * v;
  return std::sqrt(s / x.size());
}

namespace detail {

inline void apply_edge_fades(std::vector<double>& x, int sr) {
  const std::size_t n = std::min<std::size_t>(x.size() / 2, static_cast<std::size_t>(0.01 * sr));
  for (std::size_t i = 0; i < n; ++i) {
    const double g = static_cast<double>(i) / n;
    x[i] *= g;
    x[x.size() - 1 - i] *= g;
  }
}

/// Steady harmonic tone with slow vibrato and tremolo.
inline std::vector<double> make_tone(Rng& rng, std::size_t n, int sr, double f0) {
  const double vib_rate = uniform(rng, 3.0, 6.0), vib_depth = uniform(rng, 0.002, 0.01);
  const double trem_rate = uniform(rng, 0.5, 2.0);
  const double h2 = uniform(rng, 0.2, 0.5), h3 = uniform(rng, 0.05, 0.25);
  std::vector<double> x(n);
  double phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / sr;
    const double f = f0 * (1.0 + vib_depth * std::sin(2 * std::numbers::pi * vib_rate * t));
    phase += 2 * std::numbers::pi * f / sr;
    const double trem = 0.8 + 0.2 * std::sin(2 * std::numbers::pi * trem_rate * t);
    x[i] = trem * (std::sin(phase) + h2 * std::sin(2 * phase) + h3 * std::sin(3 * phase));
  }
  return x;
}

/// Train of short exponential up-sweeps separated by short gaps.
inline std::vector<double> make_chirps(Rng& rng, std::size_t n, int sr, double f_lo,
                                       double f_hi) {
  std::vector<double> x(n, 0.0);
  std::size_t pos = 0;
  while (pos < n) {
    const auto len = static_cast<std::size_t>(uniform(rng, 0.08, 0.2) * sr);
    const auto gap = static_cast<std::size_t>(uniform(rng, 0.02, 0.08) * sr);
    double phase = 0.0;
    for (std::size_t i = 0; i < len && pos + i < n; ++i) {
      const double u = static_cast<double>(i) / len;
      const double f = f_lo * std::pow(f_hi / f_lo, u);
      phase += 2 * std::numbers::pi * f / sr;
      const double env = std::sin(std::numbers::pi * u);
      x[pos + i] = env * std::sin(phase);
    }
    pos += len + gap;
  }
  return x;
}

/// Band-pass filtered noise with random burst gating.
inline std::vector<double> make_noise_bursts(Rng& rng, std::size_t n, int sr, double fc) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  // RBJ band-pass biquad, constant 0 dB peak gain.
  const double q = 1.2;
  const double w0 = 2 * std::numbers::pi * fc / sr;
  const double alpha = std::sin(w0) / (2 * q);
  const double a0 = 1 + alpha;
  const double b0 = alpha / a0, b2 = -alpha / a0;
  const double a1 = -2 * std::cos(w0) / a0, a2 = (1 - alpha) / a0;
  std::vector<double> x(n);
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double in = gauss(rng);
    const double y = b0 * in + b2 * x2 - a1 * y1 - a2 * y2;
    x2 = x1;
    x1 = in;
    y2 = y1;
    y1 = y;
    x[i] = y;
  }
  std::size_t pos = 0;
  bool on = true;
  while (pos < n) {
    const auto len = static_cast<std::size_t>(
        (on ? uniform(rng, 0.15, 0.5) : uniform(rng, 0.02, 0.06)) * sr);
    const double g = on ? 1.0 : 0.15;
    for (std::size_t i = pos; i < std::min(n, pos + len); ++i) x[i] *= g;
    pos += len;
    on = !on;
  }
  return x;
}

}  // namespace detail

/// Parametric library of isolated events for self-contained experiments:
/// "tone" (harmonic tones, fundamental 300-1800 Hz), "chirp" (up-sweep trains
/// in 2.5-7.5 kHz) and "noise" (gated band-pass noise centered 5-9 kHz).
/// Every instance is scaled to an RMS drawn from [0.05, 0.15].
inline EventBank builtin_event_bank(std::uint64_t seed, const BankConfig& config = {}) {
  if (config.instances_per_class < 1) throw ConfigError("bank needs at least one instance per class");
  if (!(config.min_seconds > 0 && config.max_seconds >= config.min_seconds))
    throw ConfigError("invalid bank duration range");
  EventBank bank;
  bank.classes = {"tone", "chirp", "noise"};
  bank.rms_lo = 0.05;
  bank.rms_hi = 0.15;
  const int sr = config.sample_rate;
  for (std::size_t c = 0; c < bank.classes.size(); ++c) {
    for (std::size_t i = 0; i < config.instances_per_class; ++i) {
      Rng rng(derive_seed(seed, {0xba4bULL, c, i}));
      const auto n = static_cast<std::size_t>(
          uniform(rng, config.min_seconds, config.max_seconds) * sr);
      EventSample s;
      s.class_name = bank.classes[c];
      char idbuf[32];
      std::snprintf(idbuf, sizeof idbuf, "%s_%02zu", s.class_name.c_str(), i);
      s.id = idbuf;
      std::vector<double> x;
      if (c == 0) {
        const double f0 = uniform(rng, 300.0, 1800.0);
        x = detail::make_tone(rng, n, sr, f0);
        s.band_lo_hz = 250.0;
        s.band_hi_hz = 2000.0;
      } else if (c == 1) {
        const double lo = uniform(rng, 2500.0, 3500.0);
        const double hi = lo * uniform(rng, 1.5, 2.1);
        x = detail::make_chirps(rng, n, sr, lo, hi);
        s.band_lo_hz = 2300.0;
        s.band_hi_hz = 8000.0;
      } else {
        const double fc = uniform(rng, 5000.0, 9000.0);
        x = detail::make_noise_bursts(rng, n, sr, fc);
        s.band_lo_hz = 3500.0;
        s.band_hi_hz = 13000.0;
      }
      detail::apply_edge_fades(x, sr);
      double e = 0.0;
      for (double v : x) e += v * v;
      const double cur = std::sqrt(e / n);
      const double target = uniform(rng, bank.rms_lo, bank.rms_hi);
      s.clip.sample_rate = sr;
      s.clip.samples.resize(n);
      for (std::size_t j = 0; j < n; ++j)
        s.clip.samples[j] = static_cast<float>(x[j] * target / cur);
      bank.samples.push_back(std::move(s));
    }
  }
  return bank;
}

/// Loads <dir>/<class>/<file>.wav as an event bank, classes in sorted order.
inline EventBank load_event_bank(const std::filesystem::path& dir, int sample_rate) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("event bank directory not found: " + dir.string());
  EventBank bank;
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  for (const auto& cdir : class_dirs) {
    const std::string cls = cdir.filename().string();
    bank.classes.push_back(cls);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(cdir))
      if (e.is_regular_file() && e.path().extension() == ".wav") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      EventSample s;
      s.id = cls + "/" + f.stem().string();
      s.class_name = cls;
      s.clip = resample_linear(read_wav(f), sample_rate);
      bank.samples.push_back(std::move(s));
    }
  }
  if (bank.samples.empty()) throw IoError("event bank directory holds no WAV files");
  return bank;
}

struct EventPlacement {
  std::size_t sample = 0;       // index into EventBank::samples
  std::size_t cut_start = 0;    // in samples, within the source
  std::size_t cut_length = 0;   // in samples
  std::size_t placement = 0;    // in samples, within the mixture
  double gain = 1.0;
};

struct MixtureRecipe {
  std::vector<EventPlacement> events;
  std::size_t total_length = 0;  // samples
  int sample_rate = 44100;
  std::uint64_t seed = 0;
};

struct MixtureResult {
  AudioClip audio;
  std::vector<EventAnnotation> annotations;
};

inline constexpr double kPeakTarget = 0.9;

/// Sums gain-scaled cuts at their placements. No background is added. When
/// the summed peak exceeds 1 the whole mixture is rescaled to a 0.9 peak.
inline MixtureResult synthesize_mixture(const EventBank& bank, const MixtureRecipe& recipe) {
  if (recipe.total_length == 0) throw RecipeError("mixture length must be positive");
  std::vector<double> mix(recipe.total_length, 0.0);
  MixtureResult out;
  for (std::size_t e = 0; e < recipe.events.size(); ++e) {
    const auto& ev = recipe.events[e];
    const auto tag = "event " + std::to_string(e) + ": ";
    if (ev.sample >= bank.samples.size()) throw RecipeError(tag + "unknown sample index");
    const auto& src = bank.samples[ev.sample];
    if (src.clip.sample_rate != recipe.sample_rate)
      throw RecipeError(tag + "sample rate differs from the mixture rate");
    if (ev.cut_length == 0) throw RecipeError(tag + "empty cut");
    if (ev.cut_start + ev.cut_length > src.clip.samples.size())
      throw RecipeError(tag + "cut exceeds the length of sample " + src.id);
    if (ev.placement + ev.cut_length > recipe.total_length)
      throw RecipeError(tag + "placement runs past the mixture end");
    for (std::size_t i = 0; i < ev.cut_length; ++i)
      mix[ev.placement + i] += ev.gain * src.clip.samples[ev.cut_start + i];
    out.annotations.push_back(
        {src.class_name, static_cast<double>(ev.placement) / recipe.sample_rate,
         static_cast<double>(ev.placement + ev.cut_length) / recipe.sample_rate, src.id});
  }
  double peak = 0.0;
  for (double v : mix) peak = std::max(peak, std::abs(v));
  const double scale = peak > 1.0 ? kPeakTarget / peak : 1.0;
  out.audio.sample_rate = recipe.sample_rate;
  out.audio.samples.resize(mix.size());
  for (std::size_t i = 0; i < mix.size(); ++i)
    out.audio.samples[i] = static_cast<float>(mix[i] * scale);
  std::stable_sort(out.annotations.begin(), out.annotations.end(),
                   [](const auto& a, const auto& b) { return a.onset < b.onset; });
  return out;
}

struct SynthConfig {
  std::size_t num_mixtures = 40;
  double mixture_seconds = 30.0;
  std::size_t events_per_mixture = 12;
  double min_cut_seconds = 1.0;
  double max_cut_seconds = 4.0;
  std::size_t polyphony_cap = 2;
  double train_fraction = 0.6, val_fraction = 0.2, test_fraction = 0.2;
  std::uint64_t seed = 1;
  std::size_t max_attempts = 50;  // rejection-sampling tries per event
};

enum class Partition { Train = 0, Val = 1, Test = 2 };

inline const char* partition_name(Partition p) {
  switch (p) {
    case Partition::Train: return "train";
    case Partition::Val: return "val";
    case Partition::Test: return "test";
  }
  return "?";
}

/// Per-class instance pools for the three partitions, pairwise disjoint.
using InstancePools = std::array<std::vector<std::size_t>, 3>;

inline InstancePools partition_instances(const EventBank& bank, const SynthConfig& config) {
  InstancePools pools;
  for (std::size_t c = 0; c < bank.classes.size(); ++c) {
    auto ids = bank.instances_of(bank.classes[c]);
    Rng rng(derive_seed(config.seed, {0x5917ULL, c}));
    std::shuffle(ids.begin(), ids.end(), rng);
    const std::size_t n = ids.size();
    const auto n_train = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(config.train_fraction * n)));
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(config.val_fraction * n)));
    if (n_train + n_val >= n)
      throw ConfigError("class '" + bank.classes[c] + "' has " + std::to_string(n) +
                        " instances, too few for disjoint train/val/test partitions");
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t part = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
      pools[part].push_back(ids[i]);
    }
  }
  for (auto& p : pools) std::sort(p.begin(), p.end());
  return pools;
}

/// Maximum number of placed events simultaneously sounding anywhere in
/// [start, start + length).
inline std::size_t max_concurrency(const std::vector<EventPlacement>& events,
                                   std::size_t start, std::size_t length) {
  std::vector<std::pair<std::size_t, int>> edges;
  for (const auto& e : events) {
    const std::size_t lo = std::max(e.placement, start);
    const std::size_t hi = std::min(e.placement + e.cut_length, start + length);
    if (lo < hi) {
      edges.emplace_back(lo, +1);
      edges.emplace_back(hi, -1);
    }
  }
  std::sort(edges.begin(), edges.end());  // ends (-1) sort before starts at equal time
  int cur = 0, best = 0;
  for (const auto& [pos, d] : edges) {
    cur += d;
    best = std::max(best, cur);
  }
  return static_cast<std::size_t>(best);
}

/// Draws one mixture recipe from `pool` by uniform placement with rejection
/// sampling against the polyphony cap.
inline MixtureRecipe plan_mixture(const EventBank& bank, const std::vector<std::size_t>& pool,
                                  const SynthConfig& config, int sample_rate,
                                  std::uint64_t recipe_seed) {
  if (pool.empty()) throw ConfigError("empty instance pool");
  MixtureRecipe recipe;
  recipe.sample_rate = sample_rate;
  recipe.seed = recipe_seed;
  recipe.total_length = static_cast<std::size_t>(std::lround(config.mixture_seconds * sample_rate));
  const auto min_cut = static_cast<std::size_t>(std::lround(config.min_cut_seconds * sample_rate));
  const auto max_cut = static_cast<std::size_t>(std::lround(config.max_cut_seconds * sample_rate));
  if (min_cut == 0 || max_cut < min_cut) throw ConfigError("invalid cut length range");
  if (min_cut > recipe.total_length) throw ConfigError("cuts longer than the mixture");
  if (config.polyphony_cap < 1) throw ConfigError("polyphony cap must be at least 1");

  Rng rng(recipe_seed);
  std::vector<std::string> classes;
  for (auto i : pool)
    if (std::find(classes.begin(), classes.end(), bank.samples[i].class_name) == classes.end())
      classes.push_back(bank.samples[i].class_name);

  for (std::size_t e = 0; e < config.events_per_mixture; ++e) {
    for (std::size_t attempt = 0; attempt < config.max_attempts; ++attempt) {
      const std::string& cls = classes[uniform_index(rng, classes.size())];
      std::vector<std::size_t> candidates;
      for (auto i : pool)
        if (bank.samples[i].class_name == cls) candidates.push_back(i);
      const std::size_t s = candidates[uniform_index(rng, candidates.size())];
      const std::size_t src_len = bank.samples[s].clip.samples.size();
      const std::size_t hi = std::min({max_cut, src_len, recipe.total_length});
      if (hi < min_cut) continue;
      const std::size_t len = std::uniform_int_distribution<std::size_t>(min_cut, hi)(rng);
      const std::size_t cut_start =
          std::uniform_int_distribution<std::size_t>(0, src_len - len)(rng);
      const std::size_t place =
          std::uniform_int_distribution<std::size_t>(0, recipe.total_length - len)(rng);
      if (max_concurrency(recipe.events, place, len) + 1 > config.polyphony_cap) continue;
      recipe.events.push_back({s, cut_start, len, place, 1.0});
      break;
    }
  }
  std::sort(recipe.events.begin(), recipe.events.end(),
            [](const auto& a, const auto& b) { return a.placement < b.placement; });
  return recipe;
}

struct GeneratedMixture {
  std::string id;
  Partition partition = Partition::Train;
  MixtureRecipe recipe;
  MixtureResult mixture;
};

struct GeneratedDataset {
  std::vector<std::string> classes;
  std::vector<GeneratedMixture> mixtures;
  InstancePools pools;
};

inline std::array<std::size_t, 3> partition_counts(const SynthConfig& config) {
  const double sum = config.train_fraction + config.val_fraction + config.test_fraction;
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  if (config.train_fraction <= 0 || config.val_fraction <= 0 || config.test_fraction <= 0)
    throw ConfigError("every split fraction must be positive");
  const auto n = config.num_mixtures;
  const auto n_train = static_cast<std::size_t>(std::lround(config.train_fraction * n));
  const auto n_val = static_cast<std::size_t>(std::lround(config.val_fraction * n));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
    throw ConfigError("too few mixtures for a train/val/test split");
  return {n_train, n_val, n - n_train - n_val};
}

/// Builds every mixture of a synthetic dataset. Partitions draw from disjoint
/// instance pools; each recipe has its own derived seed.
inline GeneratedDataset generate_dataset(const EventBank& bank, const SynthConfig& config) {
  const auto counts = partition_counts(config);
  GeneratedDataset ds;
  ds.classes = bank.classes;
  ds.pools = partition_instances(bank, config);
  const int sr = bank.samples.front().clip.sample_rate;
  std::size_t index = 0;
  for (std::size_t p = 0; p < 3; ++p) {
    for (std::size_t j = 0; j < counts[p]; ++j, ++index) {
      GeneratedMixture gm;
      char idbuf[32];
      std::snprintf(idbuf, sizeof idbuf, "mix_%03zu", index);
      gm.id = idbuf;
      gm.partition = static_cast<Partition>(p);
      gm.recipe = plan_mixture(bank, ds.pools[p], config, sr,
                               derive_seed(config.seed, {0x3ec1ULL, index}));
      gm.mixture = synthesize_mixture(bank, gm.recipe);
      ds.mixtures.push_back(std::move(gm));
    }
  }
  return ds;
}

/// Single-fold manifest matching the generated partitions.
inline DatasetManifest dataset_manifest(const GeneratedDataset& ds, const std::string& scene) {
  DatasetManifest m;
  m.classes = ds.classes;
  FoldAssignment fold;
  for (const auto& gm : ds.mixtures) {
    m.recordings.push_back({gm.id, "audio/" + gm.id + ".wav", "annotations/" + gm.id + ".tsv",
                            scene});
    (gm.partition == Partition::Train ? fold.train
                                      : gm.partition == Partition::Val ? fold.val : fold.test)
        .push_back(gm.id);
  }
  m.folds.push_back(std::move(fold));
  return m;
}

inline std::string format_recipes(const EventBank& bank, const GeneratedDataset& ds) {
  std::ostringstream out;
  out << "mixture\tpartition\tsample\tclass\tcut_start\tcut_length\tplacement\tgain\n";
  for (const auto& gm : ds.mixtures)
    for (const auto& e : gm.recipe.events)
      out << gm.id << '\t' << partition_name(gm.partition) << '\t' << bank.samples[e.sample].id
          << '\t' << bank.samples[e.sample].class_name << '\t' << e.cut_start << '\t'
          << e.cut_length << '\t' << e.placement << '\t' << e.gain << '\n';
  return out.str();
}

/// Writes audio/, annotations/, manifest.txt and recipes.tsv under out_dir.
inline DatasetManifest write_dataset(const std::filesystem::path& out_dir, const EventBank& bank,
                                     const GeneratedDataset& ds, const std::string& scene) {
  for (const auto& gm : ds.mixtures) {
    write_wav(out_dir / "audio" / (gm.id + ".wav"), gm.mixture.audio);
    write_annotations(out_dir / "annotations" / (gm.id + ".tsv"), gm.mixture.annotations);
  }
  DatasetManifest m = dataset_manifest(ds, scene);
  write_manifest(out_dir / "manifest.txt", m);
  write_file_bytes(out_dir / "recipes.tsv", format_recipes(bank, ds));
  m.base_dir = out_dir;
  return m;
}

struct Chunk {
  std::string id;
  AudioClip audio;
  std::vector<EventAnnotation> annotations;  // clipped to the chunk, chunk-relative times
};

/// Cuts a recording into consecutive fixed-length chunks (a shorter tail is
/// dropped), clipping annotations to each chunk.
inline std::vector<Chunk> chunk_recording(const std::string& id, const AudioClip& audio,
                                          const std::vector<EventAnnotation>& annotations,
                                          double chunk_seconds) {
  const auto len = static_cast<std::size_t>(std::lround(chunk_seconds * audio.sample_rate));
  if (len == 0) throw ConfigError("chunk length must be positive");
  std::vector<Chunk> out;
  for (std::size_t c = 0; (c + 1) * len <= audio.samples.size(); ++c) {
    Chunk ch;
    char buf[16];
    std::snprintf(buf, sizeof buf, "_c%02zu", c);
    ch.id = id + buf;
    ch.audio.sample_rate = audio.sample_rate;
    ch.audio.samples.assign(audio.samples.begin() + static_cast<std::ptrdiff_t>(c * len),
                            audio.samples.begin() + static_cast<std::ptrdiff_t>((c + 1) * len));
    const double t0 = static_cast<double>(c * len) / audio.sample_rate;
    const double t1 = static_cast<double>((c + 1) * len) / audio.sample_rate;
    for (const auto& ev : annotations) {
      const double on = std::max(ev.onset, t0), off = std::min(ev.offset, t1);
      if (off > on) ch.annotations.push_back({ev.class_name, on - t0, off - t0, ev.source_file});
    }
    out.push_back(std::move(ch));
  }
  return out;
}

}  // namespace sedforge
