/* Copyright 2026 The SSR Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// NumPy .npy v1.0 reader/writer. Only little-endian C-order f4/f8/i4/u1 payloads.
// The writer reproduces numpy's own header layout byte for byte, so files
// produced by `numpy.save` survive a load/save cycle unchanged.

#pragma once

#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "ssr/error.hpp"
#include "ssr/tensor.hpp"

namespace ssr {

namespace npy_detail {

inline constexpr char kMagic[] = "\x93NUMPY";
inline constexpr std::size_t kMagicLen = 6;

inline const char* descr_for(DType t) {
  switch (t) {
    case DType::f32: return "<f4";
    case DType::f64: return "<f8";
    case DType::i32: return "<i4";
    case DType::u8: return "|u1";
  }
  return "";
}

inline std::optional<DType> dtype_for(std::string_view descr) {
  if (descr == "<f4") return DType::f32;
  if (descr == "<f8") return DType::f64;
  if (descr == "<i4") return DType::i32;
  if (descr == "|u1" || descr == "<u1") return DType::u8;
  return std::nullopt;
}

// Minimal parser for the python-literal dict numpy writes in the header.
class HeaderParser {
 public:
  HeaderParser(std::string_view text, std::uint64_t base) : s_(text), base_(base) {}

  void parse(std::string& descr, bool& fortran, Shape& shape) {
    bool have_descr = false, have_fortran = false, have_shape = false;
    skip_ws();
    expect('{');
    while (true) {
      skip_ws();
      if (peek() == '}') {
        ++pos_;
        break;
      }
      const std::string key = parse_string();
      skip_ws();
      expect(':');
      skip_ws();
      if (key == "descr") {
        descr = parse_string();
        have_descr = true;
      } else if (key == "fortran_order") {
        fortran = parse_bool();
        have_fortran = true;
      } else if (key == "shape") {
        shape = parse_shape();
        have_shape = true;
      } else {
        fail("unknown header key '" + key + "'");
      }
      skip_ws();
      if (peek() == ',') {
        ++pos_;
        continue;
      }
      skip_ws();
      expect('}');
      break;
    }
    if (!have_descr || !have_fortran || !have_shape) {
      fail("header dict must contain descr, fortran_order and shape");
    }
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError("npy header: " + msg, base_ + pos_);
  }
  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  std::string parse_string() {
    const char q = peek();
    if (q != '\'' && q != '"') fail("expected string");
    ++pos_;
    const auto end = s_.find(q, pos_);
    if (end == std::string_view::npos) fail("unterminated string");
    std::string out(s_.substr(pos_, end - pos_));
    pos_ = end + 1;
    return out;
  }
  bool parse_bool() {
    if (s_.substr(pos_, 4) == "True") {
      pos_ += 4;
      return true;
    }
    if (s_.substr(pos_, 5) == "False") {
      pos_ += 5;
      return false;
    }
    fail("expected True or False");
  }
  Shape parse_shape() {
    Shape shape;
    expect('(');
    while (true) {
      skip_ws();
      if (peek() == ')') {
        ++pos_;
        return shape;
      }
      if (!std::isdigit(static_cast<unsigned char>(peek()))) fail("expected dimension");
      std::int64_t v = 0;
      while (std::isdigit(static_cast<unsigned char>(peek()))) {
        v = v * 10 + (s_[pos_] - '0');
        if (v > (std::int64_t{1} << 48)) fail("dimension too large");
        ++pos_;
      }
      shape.push_back(v);
      skip_ws();
      if (peek() == ',') ++pos_;
      else if (peek() != ')') fail("expected ',' or ')'");
    }
  }

  std::string_view s_;
  std::uint64_t base_;
  std::size_t pos_ = 0;
};

inline std::string shape_literal(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  if (shape.size() == 1) s += ",";
  return s + ")";
}

}  // namespace npy_detail

/// Serializes to the exact bytes `numpy.save` would produce.
inline std::string encode_npy(const Tensor& t) {
  std::string header = std::string("{'descr': '") + npy_detail::descr_for(t.dtype()) +
                       "', 'fortran_order': False, 'shape': " +
                       npy_detail::shape_literal(t.shape()) + ", }";
  // magic(6) + version(2) + len(2) + header + '\n', padded to 64 bytes.
  const std::size_t preamble = npy_detail::kMagicLen + 4;
  const std::size_t unpadded = preamble + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  if (header.size() > 0xFFFF) throw InvalidArgument("npy header too long for v1.0");

  std::string out;
  out.reserve(preamble + header.size() + t.nbytes());
  out.append(npy_detail::kMagic, npy_detail::kMagicLen);
  out.push_back('\x01');
  out.push_back('\x00');
  out.push_back(static_cast<char>(header.size() & 0xFF));
  out.push_back(static_cast<char>((header.size() >> 8) & 0xFF));
  out += header;
  out.append(t.raw_bytes(), t.nbytes());
  return out;
}

/// Parses an in-memory .npy image. Accepts format versions 1.0, 2.0 and 3.0.
inline Tensor decode_npy(std::string_view bytes) {
  using npy_detail::kMagicLen;
  if (bytes.size() < kMagicLen || bytes.substr(0, kMagicLen) != std::string_view(npy_detail::kMagic, kMagicLen)) {
    throw FormatError("missing \\x93NUMPY magic", 0);
  }
  if (bytes.size() < kMagicLen + 2) throw FormatError("truncated version", kMagicLen);
  const auto major = static_cast<unsigned char>(bytes[kMagicLen]);
  std::size_t len_bytes = 0;
  if (major == 1) len_bytes = 2;
  else if (major == 2 || major == 3) len_bytes = 4;
  else throw FormatError("unsupported npy version " + std::to_string(major), kMagicLen);

  const std::size_t len_off = kMagicLen + 2;
  if (bytes.size() < len_off + len_bytes) throw FormatError("truncated header length", len_off);
  std::size_t header_len = 0;
  for (std::size_t i = 0; i < len_bytes; ++i) {
    header_len |= static_cast<std::size_t>(static_cast<unsigned char>(bytes[len_off + i]))
                  << (8 * i);
  }
  const std::size_t header_off = len_off + len_bytes;
  if (bytes.size() < header_off + header_len) {
    throw FormatError("header length " + std::to_string(header_len) + " exceeds file size",
                      len_off);
  }

  std::string descr;
  bool fortran = false;
  Shape shape;
  npy_detail::HeaderParser(bytes.substr(header_off, header_len), header_off)
      .parse(descr, fortran, shape);
  if (fortran) throw FormatError("fortran_order=True is not supported", header_off);
  const auto dtype = npy_detail::dtype_for(descr);
  if (!dtype) throw FormatError("unsupported descr '" + descr + "'", header_off);

  Tensor t(*dtype, shape);
  const std::size_t payload_off = header_off + header_len;
  const std::size_t payload = bytes.size() - payload_off;
  if (payload != t.nbytes()) {
    throw CorruptionError("npy payload is " + std::to_string(payload) + " bytes but shape " +
                          shape_str(shape) + " of " + descr + " needs " +
                          std::to_string(t.nbytes()));
  }
  if (payload) std::memcpy(t.raw_bytes(), bytes.data() + payload_off, payload);
  return t;
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decode_npy(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.message(), e.offset());
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  const std::string bytes = encode_npy(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace ssr
