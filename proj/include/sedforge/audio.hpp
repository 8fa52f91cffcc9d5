#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sedforge/error.hpp"

namespace sedforge {

/// Mono PCM audio with samples nominally in [-1, 1].
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 44100;

  double duration_seconds() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

namespace detail {

inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace detail

/// Decodes a RIFF/WAVE byte buffer. Accepts 16-bit PCM and 32-bit float
/// (plain or WAVE_FORMAT_EXTENSIBLE); multichannel input is averaged to mono.
inline AudioClip decode_wav(const std::string& bytes) {
  using detail::read_u16;
  using detail::read_u32;
  const auto* b = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 12 || std::memcmp(b, "RIFF", 4) != 0 || std::memcmp(b + 8, "WAVE", 4) != 0)
    throw CorruptFileError("not a RIFF/WAVE stream");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const std::uint32_t len = read_u32(b + pos + 4);
    const unsigned char* body = b + pos + 8;
    const std::size_t avail = n - (pos + 8);
    if (std::memcmp(b + pos, "fmt ", 4) == 0) {
      if (len < 16 || avail < 16) throw CorruptFileError("truncated fmt chunk");
      format = read_u16(body);
      channels = read_u16(body + 2);
      rate = read_u32(body + 4);
      bits = read_u16(body + 14);
      if (format == 0xFFFE && len >= 26 && avail >= 26) format = read_u16(body + 24);
    } else if (std::memcmp(b + pos, "data", 4) == 0) {
      data = body;
      data_len = std::min<std::size_t>(len, avail);
      break;
    }
    pos += 8 + len + (len & 1);
  }
  if (channels == 0 || rate == 0) throw CorruptFileError("missing fmt chunk");
  if (data == nullptr) throw CorruptFileError("missing data chunk");

  const bool pcm16 = format == 1 && bits == 16;
  const bool float32 = format == 3 && bits == 32;
  if (!pcm16 && !float32)
    throw IoError("unsupported WAV encoding (format " + std::to_string(format) +
                  ", " + std::to_string(bits) + " bits)");

  const std::size_t frame_bytes = static_cast<std::size_t>(bits / 8) * channels;
  const std::size_t frames = data_len / frame_bytes;
  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + i * frame_bytes + c * (bits / 8);
      if (pcm16) {
        acc += static_cast<std::int16_t>(read_u16(p)) / 32768.0;
      } else {
        const std::uint32_t raw = read_u32(p);
        acc += std::bit_cast<float>(raw);
      }
    }
    clip.samples[i] = static_cast<float>(acc / channels);
  }
  return clip;
}

enum class WavEncoding { Pcm16, Float32 };

inline std::string encode_wav(const AudioClip& clip,
                              WavEncoding encoding = WavEncoding::Float32) {
  using detail::put_u16;
  using detail::put_u32;
  const std::uint16_t bits = encoding == WavEncoding::Pcm16 ? 16 : 32;
  const std::uint32_t data_len =
      static_cast<std::uint32_t>(clip.samples.size() * (bits / 8));
  std::string out;
  out.reserve(44 + data_len);
  out += "RIFF";
  put_u32(out, 36 + data_len);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, encoding == WavEncoding::Pcm16 ? 1 : 3);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * (bits / 8));
  put_u16(out, bits / 8);
  put_u16(out, bits);
  out += "data";
  put_u32(out, data_len);
  for (float s : clip.samples) {
    if (encoding == WavEncoding::Pcm16) {
      const double c = std::clamp(static_cast<double>(s), -1.0, 32767.0 / 32768.0);
      put_u16(out, static_cast<std::uint16_t>(
                       static_cast<std::int16_t>(std::lround(c * 32768.0))));
    } else {
      put_u32(out, std::bit_cast<std::uint32_t>(s));
    }
  }
  return out;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::filesystem::path& path,
                             const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline AudioClip read_wav(const std::filesystem::path& path) {
  try {
    return decode_wav(read_file_bytes(path));
  } catch (const CorruptFileError& e) {
    throw CorruptFileError(path.string() + ": " + e.what());
  }
}

inline void write_wav(const std::filesystem::path& path, const AudioClip& clip,
                      WavEncoding encoding = WavEncoding::Float32) {
  write_file_bytes(path, encode_wav(clip, encoding));
}

/// Linear-interpolation resampling; identity when the rates already agree.
inline AudioClip resample_linear(const AudioClip& clip, int target_rate) {
  if (target_rate <= 0) throw ConfigError("target sample rate must be positive");
  if (clip.sample_rate == target_rate || clip.samples.empty()) {
    AudioClip out = clip;
    out.sample_rate = target_rate;
    return out;
  }
  const double ratio = static_cast<double>(clip.sample_rate) / target_rate;
  const auto out_len = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(clip.samples.size() / ratio)));
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const double src = i * ratio;
    const auto i0 = std::min(static_cast<std::size_t>(src), clip.samples.size() - 1);
    const std::size_t i1 = std::min(i0 + 1, clip.samples.size() - 1);
    const double frac = src - static_cast<double>(i0);
    out.samples[i] = static_cast<float>(clip.samples[i0] * (1.0 - frac) +
                                        clip.samples[i1] * frac);
  }
  return out;
}

}  // namespace sedforge
