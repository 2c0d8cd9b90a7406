#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ddcn/errors.hpp"
#include "ddcn/tensor.hpp"

namespace ddcn {

// Binary layout (all integers little-endian):
//   "DDCN" | u16 version | u32 record count
//   record: u32 byte length of the rest | u16 name length | UTF-8 name |
//           u8 precision (0 = f32, 1 = f64) | u8 rank | rank x u32 dims | payload
//   u32 metadata length | UTF-8 "key=value\n" lines
inline constexpr char kCheckpointMagic[4] = {'D', 'D', 'C', 'N'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Blob {
  std::string name;
  Precision precision = Precision::F32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;  // little-endian element bytes

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  template <Real T>
  static Blob from(std::string name, std::vector<std::uint32_t> dims, std::span<const T> values) {
    Blob b{std::move(name), precision_of<T>(), std::move(dims), {}};
    if (b.element_count() != values.size())
      throw ShapeError("blob " + b.name + " dims do not match " + std::to_string(values.size()) + " values");
    b.payload.resize(values.size() * sizeof(T));
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Bits bits = std::bit_cast<Bits>(values[i]);
      for (std::size_t k = 0; k < sizeof(T); ++k)
        b.payload[i * sizeof(T) + k] = static_cast<std::uint8_t>(bits >> (8 * k));
    }
    return b;
  }

  template <Real T>
  void copy_to(std::span<T> out) const {
    if (precision != precision_of<T>())
      throw FormatError("blob " + name + " is " + to_string(precision) + ", expected " +
                        to_string(precision_of<T>()));
    if (out.size() != element_count())
      throw ShapeError("blob " + name + " holds " + std::to_string(element_count()) +
                       " values, destination has " + std::to_string(out.size()));
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (std::size_t i = 0; i < out.size(); ++i) {
      Bits bits = 0;
      for (std::size_t k = 0; k < sizeof(T); ++k)
        bits |= static_cast<Bits>(payload[i * sizeof(T) + k]) << (8 * k);
      out[i] = std::bit_cast<T>(bits);
    }
  }
};

struct Checkpoint {
  std::vector<Blob> blobs;
  std::map<std::string, std::string> metadata;

  const Blob& blob(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return b;
    throw FormatError("checkpoint has no blob named '" + name + "'");
  }
  bool has_blob(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return true;
    return false;
  }
  const std::string& meta(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) throw FormatError("checkpoint metadata lacks '" + key + "'");
    return it->second;
  }
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError(source_ + ": truncated checkpoint");
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(bytes_[pos_ + k]) << (8 * k);
    pos_ += 4;
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> raw(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> v(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_u16(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.blobs.size()));
  for (const auto& b : ckpt.blobs) {
    if (b.payload.size() != b.element_count() * (b.precision == Precision::F32 ? 4 : 8))
      throw ShapeError("blob " + b.name + " payload does not match its dims");
    std::vector<std::uint8_t> rec;
    detail::put_u16(rec, static_cast<std::uint16_t>(b.name.size()));
    rec.insert(rec.end(), b.name.begin(), b.name.end());
    rec.push_back(static_cast<std::uint8_t>(b.precision));
    rec.push_back(static_cast<std::uint8_t>(b.dims.size()));
    for (auto d : b.dims) detail::put_u32(rec, d);
    rec.insert(rec.end(), b.payload.begin(), b.payload.end());
    detail::put_u32(out, static_cast<std::uint32_t>(rec.size()));
    out.insert(out.end(), rec.begin(), rec.end());
  }
  std::string meta;
  for (const auto& [k, v] : ckpt.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ConfigError("checkpoint metadata entry '" + k + "' is not a single key=value line");
    meta += k + "=" + v + "\n";
  }
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source = "checkpoint") {
  detail::Reader r(bytes, source);
  if (r.text(4) != std::string(kCheckpointMagic, 4)) throw FormatError(source + ": bad magic, not a DDCN checkpoint");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion)
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t length = r.u32();
    const std::size_t end = r.pos() + length;
    Blob b;
    b.name = r.text(r.u16());
    const std::uint8_t tag = r.u8();
    if (tag > 1) throw FormatError(source + ": unknown precision tag in blob " + b.name);
    b.precision = static_cast<Precision>(tag);
    const std::uint8_t rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) b.dims.push_back(r.u32());
    const std::size_t bytes_needed = b.element_count() * (b.precision == Precision::F32 ? 4 : 8);
    if (r.pos() + bytes_needed != end) throw FormatError(source + ": record length mismatch in blob " + b.name);
    b.payload = r.raw(bytes_needed);
    ckpt.blobs.push_back(std::move(b));
  }
  std::istringstream meta(r.text(r.u32()));
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(source + ": metadata line without '='");
    ckpt.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!r.done()) throw FormatError(source + ": trailing bytes after metadata");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

}  // namespace ddcn
