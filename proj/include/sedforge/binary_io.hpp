#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sedforge/error.hpp"
#include "sedforge/tensor.hpp"

namespace sedforge {

/// Appends float32 values in little-endian byte order.
inline void append_f32_le(std::string& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  char* dst = out.data() + start;
  for (float v : values) {
    std::uint32_t raw = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big) raw = __builtin_bswap32(raw);
    std::memcpy(dst, &raw, 4);
    dst += 4;
  }
}

inline std::vector<float> read_f32_le(std::string_view bytes, std::size_t count) {
  if (bytes.size() < count * 4) throw CorruptFileError("truncated float payload");
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t raw;
    std::memcpy(&raw, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) raw = __builtin_bswap32(raw);
    out[i] = std::bit_cast<float>(raw);
  }
  return out;
}

/// Sequential reader over a byte buffer; every short read is a corrupt-file error.
class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view line() {
    const auto nl = bytes_.find('\n', pos_);
    if (nl == std::string_view::npos) throw CorruptFileError("unexpected end of header");
    std::string_view out = bytes_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    return out;
  }

  std::string_view take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CorruptFileError("unexpected end of data");
    std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool at_end() const { return pos_ >= bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

/// Splits "key<space or tab>value"; the value keeps interior whitespace.
inline std::pair<std::string, std::string> split_key_value(std::string_view line) {
  const auto sep = line.find_first_of(" \t");
  if (sep == std::string_view::npos) return {std::string(line), {}};
  return {std::string(line.substr(0, sep)), std::string(line.substr(sep + 1))};
}

/// Row-major float32 matrix with a text metadata header:
///
///   SFMATRIX 1
///   rows <R>
///   cols <C>
///   <key> <value>      (any number)
///   end
///   <R*C little-endian float32>
struct MatrixFile {
  std::vector<std::pair<std::string, std::string>> meta;
  Tensor<float> values;  // [rows, cols]

  const std::string* find(std::string_view key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return &v;
    return nullptr;
  }
};

inline std::string encode_matrix_file(const MatrixFile& file) {
  if (file.values.rank() != 2) throw ShapeError("matrix file needs a 2-D tensor");
  std::string out = "SFMATRIX 1\n";
  out += "rows " + std::to_string(file.values.dim(0)) + "\n";
  out += "cols " + std::to_string(file.values.dim(1)) + "\n";
  for (const auto& [k, v] : file.meta) {
    if (k.empty() || k.find_first_of(" \t\n") != std::string::npos ||
        v.find('\n') != std::string::npos)
      throw ConfigError("invalid matrix metadata entry '" + k + "'");
    out += k + " " + v + "\n";
  }
  out += "end\n";
  append_f32_le(out, file.values.values());
  return out;
}

inline MatrixFile decode_matrix_file(std::string_view bytes) {
  ByteReader reader(bytes);
  const auto magic = reader.line();
  if (magic.substr(0, 9) != "SFMATRIX ") throw CorruptFileError("not a matrix file");
  if (magic != "SFMATRIX 1")
    throw VersionError("unsupported matrix file version: " + std::string(magic));
  MatrixFile file;
  std::size_t rows = 0, cols = 0;
  bool have_rows = false, have_cols = false;
  for (;;) {
    const auto line = reader.line();
    if (line == "end") break;
    auto [k, v] = split_key_value(line);
    try {
      if (k == "rows") {
        rows = std::stoul(v);
        have_rows = true;
      } else if (k == "cols") {
        cols = std::stoul(v);
        have_cols = true;
      } else {
        file.meta.emplace_back(std::move(k), std::move(v));
      }
    } catch (const std::logic_error&) {
      throw CorruptFileError("bad matrix dimension '" + v + "'");
    }
  }
  if (!have_rows || !have_cols) throw CorruptFileError("matrix header lacks rows/cols");
  auto data = read_f32_le(reader.take(rows * cols * 4), rows * cols);
  file.values = Tensor<float>({rows, cols}, std::move(data));
  return file;
}

}  // namespace sedforge
