// Binary model file.
//
//   "ISRK" | u32 version=1 | config block | u32 tensor count |
//   per tensor: u16 name length, name bytes, u8 ndim, u32 dims[ndim],
//               row-major little-endian float32 data
//
// Config block: u8 variant, u8 input mode, u32 embed_dim, u32 hidden_dim,
// u32 heads, u32 layers, u32 max_len, u32 n_titles, u32 n_genres,
// f32 alpha[3], u32 feature schema version.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "sessionrank/model.hpp"

namespace sessionrank {

inline constexpr std::array<char, 4> kModelMagic = {'I', 'S', 'R', 'K'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& out) : out_(out) {}
  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::string_view s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.put(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::ostream& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::istream& in) : in_(in) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw Error(ErrorCode::TruncatedFile, "unexpected end of file");
    return s;
  }
  void floats(float* dst, std::size_t n) {
    std::vector<unsigned char> buf(n * 4);
    in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in_.gcount()) != buf.size())
      throw Error(ErrorCode::TruncatedFile, "unexpected end of file");
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t v = std::uint32_t{buf[4 * i]} | std::uint32_t{buf[4 * i + 1]} << 8 |
                        std::uint32_t{buf[4 * i + 2]} << 16 | std::uint32_t{buf[4 * i + 3]} << 24;
      dst[i] = std::bit_cast<float>(v);
    }
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::uint64_t le(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      int c = in_.get();
      if (c == std::char_traits<char>::eof()) throw Error(ErrorCode::TruncatedFile, "unexpected end of file");
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
  }
  std::istream& in_;
};

}  // namespace detail

inline void write_model(const RankerModel<float>& model, std::ostream& out) {
  detail::ByteWriter w(out);
  const auto& c = model.config;
  w.bytes(std::string_view(kModelMagic.data(), kModelMagic.size()));
  w.u32(kModelFormatVersion);
  w.u8(static_cast<std::uint8_t>(c.variant));
  w.u8(static_cast<std::uint8_t>(c.input_mode));
  w.u32(c.embed_dim);
  w.u32(c.hidden_dim);
  w.u32(c.heads);
  w.u32(c.layers);
  w.u32(c.max_len);
  w.u32(c.n_titles);
  w.u32(c.n_genres);
  for (float a : c.alpha) w.f32(a);
  w.u32(c.feature_schema);

  std::uint32_t count = 0;
  ParamSet<float>::visit(model.params, c.variant, [&](std::string_view, const Mat<float>&) { ++count; });
  w.u32(count);
  ParamSet<float>::visit(model.params, c.variant, [&](std::string_view name, const Mat<float>& t) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(2);
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i) w.f32(t.data()[i]);
  });
}

inline RankerModel<float> read_model(std::istream& in) {
  detail::ByteReader r(in);
  std::array<char, 4> magic{};
  for (auto& ch : magic) {
    int v = in.get();
    if (v == std::char_traits<char>::eof()) throw Error(ErrorCode::BadMagic, "file too short for magic");
    ch = static_cast<char>(v);
  }
  if (magic != kModelMagic) throw Error(ErrorCode::BadMagic, "not a model file");
  std::uint32_t version = r.u32();
  if (version != kModelFormatVersion)
    throw Error(ErrorCode::VersionMismatch, "file version " + std::to_string(version));

  ModelConfig c;
  std::uint8_t variant = r.u8();
  std::uint8_t mode = r.u8();
  if (variant > static_cast<std::uint8_t>(Variant::transformer))
    throw Error(ErrorCode::ShapeMismatch, "unknown variant tag", "variant");
  if (mode > static_cast<std::uint8_t>(InputMode::baseline))
    throw Error(ErrorCode::ShapeMismatch, "unknown input mode", "input_mode");
  c.variant = static_cast<Variant>(variant);
  c.input_mode = static_cast<InputMode>(mode);
  c.embed_dim = r.u32();
  c.hidden_dim = r.u32();
  c.heads = r.u32();
  c.layers = r.u32();
  c.max_len = r.u32();
  c.n_titles = r.u32();
  c.n_genres = r.u32();
  for (auto& a : c.alpha) a = r.f32();
  c.feature_schema = r.u32();
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::ShapeMismatch, e.detail(), e.field());
  }

  auto model = RankerModel<float>::zeros(c);
  std::uint32_t expected = 0;
  ParamSet<float>::visit(model.params, c.variant, [&](std::string_view, Mat<float>&) { ++expected; });
  std::uint32_t count = r.u32();
  if (count > expected) throw Error(ErrorCode::ShapeMismatch, "more tensors than the variant defines");

  std::uint32_t read = 0;
  ParamSet<float>::visit(model.params, c.variant, [&](std::string_view name, Mat<float>& t) {
    if (read == count) throw Error(ErrorCode::TruncatedFile, "tensor count in header is short of the variant");
    std::string got = r.bytes(r.u16());
    if (got != name) throw Error(ErrorCode::ShapeMismatch, "expected tensor " + std::string(name) + ", found " + got);
    std::uint8_t ndim = r.u8();
    std::vector<std::uint32_t> dims(ndim);
    std::uint64_t size = 1;
    for (auto& dim : dims) {
      dim = r.u32();
      size *= dim;
    }
    if (ndim != 2 || dims[0] != t.rows() || dims[1] != t.cols())
      throw Error(ErrorCode::ShapeMismatch, "tensor " + std::string(name) + " has unexpected shape");
    r.floats(t.data(), static_cast<std::size_t>(size));
    ++read;
  });
  return model;
}

inline void save_model(const RankerModel<float>& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  write_model(model, out);
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

inline RankerModel<float> load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  return read_model(in);
}

}  // namespace sessionrank
