#pragma once

#include <fftw3.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include "sedforge/annotations.hpp"
#include "sedforge/audio.hpp"
#include "sedforge/binary_io.hpp"
#include "sedforge/error.hpp"
#include "sedforge/tensor.hpp"

namespace sedforge {

inline constexpr double kLogFloor = 1e-10;
inline constexpr double kStdFloor = 1e-5;
/// Training windows start (epoch * 73) mod length frames into each recording.
inline constexpr std::size_t kSequenceOffsetStride = 73;

struct FeatureConfig {
  int sample_rate = 44100;
  double frame_seconds = 0.04;
  double overlap = 0.5;
  std::size_t num_bands = 40;

  std::size_t frame_length() const {
    return static_cast<std::size_t>(std::lround(frame_seconds * sample_rate));
  }
  std::size_t hop_length() const {
    const auto hop = static_cast<std::size_t>(
        std::lround(static_cast<double>(frame_length()) * (1.0 - overlap)));
    return hop == 0 ? 1 : hop;
  }
  double hop_seconds() const {
    return static_cast<double>(hop_length()) / sample_rate;
  }
  bool operator==(const FeatureConfig&) const = default;
};

/// F x T grid of log-mel energies.
struct FeatureMatrix {
  Tensor<float> values;  // [F, T]
  double frame_hop_seconds = 0.02;
  bool normalized = false;
  std::string stats_identity;

  std::size_t num_bands() const { return values.rank() == 2 ? values.dim(0) : 0; }
  std::size_t num_frames() const { return values.rank() == 2 ? values.dim(1) : 0; }
};

namespace detail {

inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

/// Real-to-complex FFT of one fixed length. Planning is serialized because
/// the FFTW planner is not thread-safe; execution is.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    in_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    out_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    std::lock_guard lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }

  double* input() { return in_; }
  const fftw_complex* output() const { return out_; }
  void execute() { fftw_execute(plan_); }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

inline std::vector<double> hamming_window(std::size_t n) {
  std::vector<double> w(n, 1.0);
  if (n == 1) return w;
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (n - 1));
  return w;
}

struct Framing {
  std::size_t length;
  std::size_t hop;
  std::size_t frames;
};

inline Framing framing_for(const AudioClip& clip, double frame_seconds, double overlap) {
  if (!(frame_seconds > 0)) throw ConfigError("frame length must be positive");
  if (!(overlap >= 0 && overlap < 1)) throw ConfigError("overlap must lie in [0, 1)");
  if (clip.sample_rate <= 0) throw ConfigError("sample rate must be positive");
  const auto length =
      static_cast<std::size_t>(std::lround(frame_seconds * clip.sample_rate));
  if (length < 2) throw ConfigError("frame shorter than two samples");
  auto hop = static_cast<std::size_t>(std::lround(length * (1.0 - overlap)));
  if (hop == 0) hop = 1;
  if (clip.samples.size() < length)
    throw EmptyInputError("clip shorter than one analysis frame");
  return {length, hop, (clip.samples.size() - length) / hop + 1};
}

/// Squared STFT magnitudes [B, T], Hamming window, no edge padding.
inline Tensor<double> stft_power(const AudioClip& clip, double frame_seconds,
                                 double overlap) {
  const Framing fr = framing_for(clip, frame_seconds, overlap);
  const std::size_t bins = fr.length / 2 + 1;
  const auto window = hamming_window(fr.length);
  RealFft fft(fr.length);
  Tensor<double> power({bins, fr.frames});
  for (std::size_t t = 0; t < fr.frames; ++t) {
    const float* src = clip.samples.data() + t * fr.hop;
    double* in = fft.input();
    for (std::size_t i = 0; i < fr.length; ++i) in[i] = src[i] * window[i];
    fft.execute();
    const fftw_complex* out = fft.output();
    for (std::size_t b = 0; b < bins; ++b)
      power.at(b, t) = out[b][0] * out[b][0] + out[b][1] * out[b][1];
  }
  return power;
}

}  // namespace detail

/// Magnitude spectrogram [B, T] with B = floor(frame_length / 2) + 1.
inline Tensor<double> stft_magnitude(const AudioClip& clip, double frame_seconds,
                                     double overlap) {
  Tensor<double> p = detail::stft_power(clip, frame_seconds, overlap);
  for (auto& v : p.values()) v = std::sqrt(v);
  return p;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel-scale filters over the bins of an fft_size-point DFT.
struct MelFilterbank {
  Tensor<double> weights;        // [F, B]
  std::vector<double> edges_hz;  // F + 2 points: lower edge, centers, upper edge
  std::vector<std::size_t> first_bin, last_bin;  // nonzero support [first, last)
  int sample_rate = 0;
  std::size_t fft_size = 0;

  std::size_t num_bands() const { return weights.dim(0); }
  std::size_t num_bins() const { return weights.dim(1); }
  double center_hz(std::size_t band) const { return edges_hz[band + 1]; }
};

inline MelFilterbank build_mel_filterbank(std::size_t num_bands, int sample_rate,
                                          std::size_t fft_size) {
  if (num_bands < 1) throw ConfigError("mel filterbank needs at least one band");
  if (sample_rate <= 0) throw ConfigError("sample rate must be positive");
  if (fft_size < 2) throw ConfigError("fft size must be at least 2");
  const std::size_t bins = fft_size / 2 + 1;
  if (num_bands > bins)
    throw ConfigError(std::to_string(num_bands) + " mel bands exceed the " +
                      std::to_string(bins) + " available frequency bins");

  MelFilterbank bank;
  bank.sample_rate = sample_rate;
  bank.fft_size = fft_size;
  const double nyquist = sample_rate / 2.0;
  const double mel_top = hz_to_mel(nyquist);
  bank.edges_hz.resize(num_bands + 2);
  for (std::size_t i = 0; i < num_bands + 2; ++i)
    bank.edges_hz[i] = mel_to_hz(mel_top * i / (num_bands + 1));
  bank.edges_hz.back() = nyquist;

  bank.weights = Tensor<double>({num_bands, bins});
  bank.first_bin.assign(num_bands, 0);
  bank.last_bin.assign(num_bands, 0);
  const double bin_hz = static_cast<double>(sample_rate) / fft_size;
  for (std::size_t m = 0; m < num_bands; ++m) {
    const double lo = bank.edges_hz[m], mid = bank.edges_hz[m + 1],
                 hi = bank.edges_hz[m + 2];
    bool any = false;
    for (std::size_t b = 0; b < bins; ++b) {
      const double f = b * bin_hz;
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      if (w > 0) {
        bank.weights.at(m, b) = w;
        any = true;
      }
    }
    if (!any) {
      // Narrow low-frequency triangle falling between bins.
      const auto nearest = std::min<std::size_t>(
          bins - 1, static_cast<std::size_t>(std::lround(mid / bin_hz)));
      bank.weights.at(m, nearest) = 1.0;
    }
    std::size_t first = bins, last = 0;
    for (std::size_t b = 0; b < bins; ++b)
      if (bank.weights.at(m, b) > 0) {
        first = std::min(first, b);
        last = b + 1;
      }
    bank.first_bin[m] = first;
    bank.last_bin[m] = last;
  }
  return bank;
}

/// log(bank x |STFT|^2 + 1e-10), unnormalized.
inline FeatureMatrix log_mel(const AudioClip& clip, const MelFilterbank& bank,
                             double frame_seconds, double overlap) {
  const Tensor<double> power = detail::stft_power(clip, frame_seconds, overlap);
  if (power.dim(0) != bank.num_bins())
    throw ShapeError("filterbank has " + std::to_string(bank.num_bins()) +
                     " bins but the STFT produced " + std::to_string(power.dim(0)));
  const std::size_t F = bank.num_bands(), T = power.dim(1);
  FeatureMatrix out;
  out.values = Tensor<float>({F, T});
  const detail::Framing fr = detail::framing_for(clip, frame_seconds, overlap);
  out.frame_hop_seconds = static_cast<double>(fr.hop) / clip.sample_rate;
  for (std::size_t m = 0; m < F; ++m) {
    for (std::size_t t = 0; t < T; ++t) {
      double e = 0.0;
      for (std::size_t b = bank.first_bin[m]; b < bank.last_bin[m]; ++b)
        e += bank.weights.at(m, b) * power.at(b, t);
      out.values.at(m, t) = static_cast<float>(std::log(e + kLogFloor));
    }
  }
  return out;
}

/// Builds the filterbank matching `config` and extracts log-mel features,
/// resampling the clip first when its rate differs from the configured one.
inline FeatureMatrix extract_features(const AudioClip& clip, const FeatureConfig& config) {
  const AudioClip& src = clip;
  AudioClip resampled;
  const AudioClip* use = &src;
  if (clip.sample_rate != config.sample_rate) {
    resampled = resample_linear(clip, config.sample_rate);
    use = &resampled;
  }
  const MelFilterbank bank =
      build_mel_filterbank(config.num_bands, config.sample_rate, config.frame_length());
  return log_mel(*use, bank, config.frame_seconds, config.overlap);
}

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t num_bands() const { return mean.size(); }

  /// FNV-1a hash of the stored values; ties feature caches and models to the
  /// statistics they were normalized with.
  std::string identity() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const std::vector<double>& v) {
      for (double d : v) {
        const auto bits = std::bit_cast<std::uint64_t>(d);
        for (int i = 0; i < 8; ++i) {
          h ^= (bits >> (8 * i)) & 0xff;
          h *= 1099511628211ULL;
        }
      }
    };
    mix(mean);
    mix(std);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  bool operator==(const NormStats&) const = default;
};

/// Mergeable per-band mean/variance accumulator (Chan et al. pairwise update).
class NormAccumulator {
 public:
  explicit NormAccumulator(std::size_t bands = 0)
      : count_(0), mean_(bands, 0.0), m2_(bands, 0.0) {}

  void add(const FeatureMatrix& features) {
    const std::size_t F = features.num_bands(), T = features.num_frames();
    if (mean_.empty() && count_ == 0) {
      mean_.assign(F, 0.0);
      m2_.assign(F, 0.0);
    }
    if (F != mean_.size())
      throw ShapeError("feature matrix has " + std::to_string(F) + " bands, expected " +
                       std::to_string(mean_.size()));
    if (T == 0) return;
    NormAccumulator part(F);
    part.count_ = T;
    for (std::size_t f = 0; f < F; ++f) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) s += features.values.at(f, t);
      const double m = s / T;
      double q = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const double d = features.values.at(f, t) - m;
        q += d * d;
      }
      part.mean_[f] = m;
      part.m2_[f] = q;
    }
    merge(part);
  }

  void merge(const NormAccumulator& other) {
    if (other.count_ == 0) return;
    if (count_ == 0) {
      *this = other;
      return;
    }
    if (other.mean_.size() != mean_.size()) throw ShapeError("band count mismatch in merge");
    const double n1 = static_cast<double>(count_), n2 = static_cast<double>(other.count_);
    const double n = n1 + n2;
    for (std::size_t f = 0; f < mean_.size(); ++f) {
      const double delta = other.mean_[f] - mean_[f];
      mean_[f] += delta * n2 / n;
      m2_[f] += other.m2_[f] + delta * delta * n1 * n2 / n;
    }
    count_ += other.count_;
  }

  std::size_t count() const { return count_; }

  NormStats stats() const {
    if (count_ == 0) throw EmptyInputError("no frames accumulated for normalization stats");
    NormStats s;
    s.mean = mean_;
    s.std.resize(mean_.size());
    for (std::size_t f = 0; f < mean_.size(); ++f)
      s.std[f] = std::max(std::sqrt(m2_[f] / static_cast<double>(count_)), kStdFloor);
    return s;
  }

 private:
  std::size_t count_;
  std::vector<double> mean_, m2_;
};

inline NormStats compute_norm_stats(const std::vector<FeatureMatrix>& training_features) {
  if (training_features.empty())
    throw EmptyInputError("normalization statistics need at least one feature matrix");
  NormAccumulator acc;
  for (const auto& fm : training_features) acc.add(fm);
  return acc.stats();
}

inline FeatureMatrix normalize(const FeatureMatrix& features, const NormStats& stats) {
  if (features.num_bands() != stats.num_bands())
    throw ShapeError("features have " + std::to_string(features.num_bands()) +
                     " bands but stats cover " + std::to_string(stats.num_bands()));
  FeatureMatrix out = features;
  const std::size_t T = features.num_frames();
  for (std::size_t f = 0; f < stats.num_bands(); ++f) {
    const double m = stats.mean[f], s = stats.std[f];
    for (std::size_t t = 0; t < T; ++t)
      out.values.at(f, t) = static_cast<float>((features.values.at(f, t) - m) / s);
  }
  out.normalized = true;
  out.stats_identity = stats.identity();
  return out;
}

inline FeatureMatrix denormalize(const FeatureMatrix& features, const NormStats& stats) {
  if (features.num_bands() != stats.num_bands())
    throw ShapeError("band count mismatch between features and stats");
  FeatureMatrix out = features;
  const std::size_t T = features.num_frames();
  for (std::size_t f = 0; f < stats.num_bands(); ++f)
    for (std::size_t t = 0; t < T; ++t)
      out.values.at(f, t) =
          static_cast<float>(features.values.at(f, t) * stats.std[f] + stats.mean[f]);
  out.normalized = false;
  out.stats_identity.clear();
  return out;
}

/// One fixed-length context window. Frames past the recording end are zero
/// in x and y and carry mask 0.
struct ContextWindow {
  Tensor<float> x;          // [F, L]
  Tensor<float> y;          // [K, L]
  std::vector<float> mask;  // [L]
  std::size_t start = 0;    // first recording frame covered
  std::size_t valid = 0;    // number of real (unpadded) frames
};

inline std::size_t sequence_offset(std::size_t length_frames, std::size_t epoch_index) {
  return (epoch_index % length_frames) * kSequenceOffsetStride % length_frames;
}

/// Cuts a recording into consecutive non-overlapping windows. Training mode
/// starts at sequence_offset(length, epoch); frames before the offset are left
/// out for that epoch. Evaluation mode always starts at frame 0.
inline std::vector<ContextWindow> split_sequences(const FeatureMatrix& features,
                                                  const EventRoll& targets,
                                                  std::size_t length_frames,
                                                  bool train_mode,
                                                  std::size_t epoch_index) {
  if (length_frames < 1) throw ConfigError("sequence length must be at least 1 frame");
  const std::size_t T = features.num_frames();
  if (T < 1) throw EmptyInputError("cannot split an empty feature matrix");
  if (targets.num_frames() != T)
    throw ShapeError("features have " + std::to_string(T) + " frames but targets have " +
                     std::to_string(targets.num_frames()));
  const std::size_t F = features.num_bands(), K = targets.num_classes();
  std::size_t offset = train_mode ? sequence_offset(length_frames, epoch_index) : 0;
  if (offset >= T) offset = 0;

  std::vector<ContextWindow> out;
  for (std::size_t start = offset; start < T; start += length_frames) {
    ContextWindow w;
    w.start = start;
    w.valid = std::min(length_frames, T - start);
    w.x = Tensor<float>({F, length_frames});
    w.y = Tensor<float>({K, length_frames});
    w.mask.assign(length_frames, 0.0f);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t i = 0; i < w.valid; ++i) w.x.at(f, i) = features.values.at(f, start + i);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < w.valid; ++i) w.y.at(k, i) = targets.at(k, start + i);
    std::fill(w.mask.begin(), w.mask.begin() + static_cast<std::ptrdiff_t>(w.valid), 1.0f);
    out.push_back(std::move(w));
  }
  return out;
}

// ---- feature cache -------------------------------------------------------

inline std::string encode_feature_cache(const FeatureMatrix& features) {
  MatrixFile file;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", features.frame_hop_seconds);
  file.meta.emplace_back("kind", "features");
  file.meta.emplace_back("hop", buf);
  file.meta.emplace_back("normalized", features.normalized ? "1" : "0");
  file.meta.emplace_back("stats", features.stats_identity.empty() ? "-"
                                                                  : features.stats_identity);
  file.values = features.values;
  return encode_matrix_file(file);
}

inline FeatureMatrix decode_feature_cache(std::string_view bytes) {
  MatrixFile file = decode_matrix_file(bytes);
  const std::string* kind = file.find("kind");
  if (!kind || *kind != "features") throw CorruptFileError("matrix file is not a feature cache");
  FeatureMatrix fm;
  fm.values = std::move(file.values);
  const std::string* hop = file.find("hop");
  const std::string* norm = file.find("normalized");
  const std::string* stats = file.find("stats");
  if (!hop || !norm || !stats) throw CorruptFileError("feature cache header incomplete");
  fm.frame_hop_seconds = std::stod(*hop);
  fm.normalized = *norm == "1";
  fm.stats_identity = *stats == "-" ? std::string() : *stats;
  return fm;
}

inline void write_feature_cache(const std::filesystem::path& path, const FeatureMatrix& fm) {
  write_file_bytes(path, encode_feature_cache(fm));
}

inline FeatureMatrix read_feature_cache(const std::filesystem::path& path) {
  return decode_feature_cache(read_file_bytes(path));
}

}  // namespace sedforge
