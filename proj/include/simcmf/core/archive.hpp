#pragma once

// CMF1 tensor archive. Layout, all integers little-endian:
//
//   "CMF1" | u32 version (=1) | u32 meta_len | meta (UTF-8 JSON)
//   u32 count
//   count x { u16 name_len | name | u8 dtype | u8 ndim | ndim x u64 dim }
//   payloads in entry order, row-major, numel x sizeof(dtype) bytes each
//
// The file size must match the header exactly; anything else is rejected.

#include <bit>
#include <cmath>
#include <iterator>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "simcmf/core/error.hpp"
#include "simcmf/core/tensor.hpp"

namespace simcmf {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, i32 = 3, u8 = 4, u16 = 5 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i32: return 4;
    case DType::u8: return 1;
    case DType::u16: return 2;
  }
  throw LoadError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

inline std::string dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i32: return "i32";
    case DType::u8: return "u8";
    case DType::u16: return "u16";
  }
  return "?";
}

struct ArchiveEntry {
  std::string name;
  DType dtype = DType::f64;
  Shape shape;
  std::vector<double> values;  // decoded; empty when only the index was read
};

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ArchiveEntry> entries;

  const ArchiveEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  void add(std::string name, const Tensor& t, DType dtype = DType::f64) {
    entries.push_back({std::move(name), dtype, t.shape(), {t.data().begin(), t.data().end()}});
  }
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i)
      bytes_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
  void put_bytes(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  const char* cursor(std::size_t n) {
    need(n);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t position() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw LoadError(source_ + ": truncated archive (need " + std::to_string(pos_ + n) +
                      " bytes, have " + std::to_string(bytes_.size()) + ")");
  }
  const std::vector<char>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline void encode_value(std::vector<char>& out, DType dtype, double v, const std::string& name) {
  auto put_le = [&out](std::uint64_t bits, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  };
  switch (dtype) {
    case DType::f32: put_le(std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4); return;
    case DType::f64: put_le(std::bit_cast<std::uint64_t>(v), 8); return;
    case DType::i32:
      if (v != std::floor(v) || v < INT32_MIN || v > INT32_MAX)
        throw ValidationError(name + ": value " + std::to_string(v) + " not representable as i32");
      put_le(static_cast<std::uint32_t>(static_cast<std::int32_t>(v)), 4);
      return;
    case DType::u8:
      if (v != std::floor(v) || v < 0 || v > 255)
        throw ValidationError(name + ": value " + std::to_string(v) + " not representable as u8");
      put_le(static_cast<std::uint64_t>(v), 1);
      return;
    case DType::u16:
      if (v != std::floor(v) || v < 0 || v > 65535)
        throw ValidationError(name + ": value " + std::to_string(v) + " not representable as u16");
      put_le(static_cast<std::uint64_t>(v), 2);
      return;
  }
}

inline double decode_value(const char* p, DType dtype) {
  std::uint64_t bits = 0;
  const auto n = dtype_size(dtype);
  for (std::size_t i = 0; i < n; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  switch (dtype) {
    case DType::f32: return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
    case DType::f64: return std::bit_cast<double>(bits);
    case DType::i32: return static_cast<std::int32_t>(static_cast<std::uint32_t>(bits));
    case DType::u8:
    case DType::u16: return static_cast<double>(bits);
  }
  return 0.0;
}

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string() + ": cannot open");
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

inline std::vector<char> encode_archive(const Archive& archive) {
  detail::ByteWriter w;
  w.put_bytes("CMF1");
  w.put<std::uint32_t>(1);
  const auto meta = archive.meta.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.put_bytes(meta);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(archive.entries.size()));
  for (const auto& e : archive.entries) {
    if (e.name.empty() || e.name.size() > 0xFFFF)
      throw ValidationError("archive entry name length out of range: '" + e.name + "'");
    if (static_cast<std::int64_t>(e.values.size()) != shape_numel(e.shape))
      throw ShapeError(e.name + ": " + std::to_string(e.values.size()) + " values for shape " +
                       shape_str(e.shape));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
  }
  auto& bytes = w.bytes();
  std::size_t total = bytes.size();
  for (const auto& e : archive.entries) total += e.values.size() * dtype_size(e.dtype);
  bytes.reserve(total);
  for (const auto& e : archive.entries) {
    for (double v : e.values) detail::encode_value(bytes, e.dtype, v, e.name);
  }
  return std::move(bytes);
}

// Writes through a temporary file and renames, so readers never observe a
// partially written archive.
inline void write_archive(const std::filesystem::path& path, const Archive& archive) {
  const auto bytes = encode_archive(archive);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(tmp.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(tmp.string() + ": write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Archive decode_archive(const std::vector<char>& bytes, const std::string& source,
                              bool with_values = true) {
  detail::ByteReader r(bytes, source);
  if (r.get_bytes(4) != "CMF1") throw LoadError(source + ": bad magic (expected CMF1)");
  const auto version = r.get<std::uint32_t>();
  if (version != 1) throw LoadError(source + ": unsupported version " + std::to_string(version));
  Archive a;
  const auto meta_len = r.get<std::uint32_t>();
  const auto meta = r.get_bytes(meta_len);
  try {
    a.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(source + ": corrupt metadata: " + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  std::size_t payload = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchiveEntry e;
    const auto len = r.get<std::uint16_t>();
    e.name = r.get_bytes(len);
    e.dtype = static_cast<DType>(r.get<std::uint8_t>());
    const auto ndim = r.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < ndim; ++d) e.shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
    payload += static_cast<std::size_t>(shape_numel(e.shape)) * dtype_size(e.dtype);
    a.entries.push_back(std::move(e));
  }
  if (r.position() + payload != r.size())
    throw LoadError(source + ": size mismatch (header promises " +
                    std::to_string(r.position() + payload) + " bytes, file has " +
                    std::to_string(r.size()) + ")");
  if (!with_values) return a;
  for (auto& e : a.entries) {
    const auto n = static_cast<std::size_t>(shape_numel(e.shape));
    const auto sz = dtype_size(e.dtype);
    const char* p = r.cursor(n * sz);
    e.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) e.values[k] = detail::decode_value(p + k * sz, e.dtype);
  }
  return a;
}

inline Archive read_archive(const std::filesystem::path& path) {
  return decode_archive(detail::read_file_bytes(path), path.string());
}

// Header and metadata only; entry values stay empty. Reads just the header
// bytes, so large checkpoints can be inspected cheaply.
inline Archive read_archive_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string() + ": cannot open");
  const auto file_size = static_cast<std::size_t>(std::filesystem::file_size(path));
  std::vector<char> head;
  auto ensure = [&](std::size_t n) {
    if (head.size() >= n) return;
    const auto want = std::min(file_size, std::max(n, head.size() * 2 + 4096));
    const auto old = head.size();
    head.resize(want);
    in.read(head.data() + old, static_cast<std::streamsize>(want - old));
    head.resize(old + static_cast<std::size_t>(in.gcount()));
  };
  // Grow the buffer until the header parses; payload bytes are never decoded.
  for (std::size_t n = 4096;; n *= 2) {
    ensure(n);
    std::vector<char> probe(head);
    const bool complete = head.size() >= file_size;
    try {
      detail::ByteReader r(probe, path.string());
      if (r.get_bytes(4) != "CMF1") throw LoadError(path.string() + ": bad magic (expected CMF1)");
      if (r.get<std::uint32_t>() != 1) throw LoadError(path.string() + ": unsupported version");
      Archive a;
      const auto meta = r.get_bytes(r.get<std::uint32_t>());
      try {
        a.meta = nlohmann::json::parse(meta);
      } catch (const nlohmann::json::exception& e) {
        throw LoadError(path.string() + ": corrupt metadata: " + e.what());
      }
      const auto count = r.get<std::uint32_t>();
      std::size_t payload = 0;
      for (std::uint32_t i = 0; i < count; ++i) {
        ArchiveEntry e;
        e.name = r.get_bytes(r.get<std::uint16_t>());
        e.dtype = static_cast<DType>(r.get<std::uint8_t>());
        const auto ndim = r.get<std::uint8_t>();
        for (std::uint8_t d = 0; d < ndim; ++d)
          e.shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>()));
        payload += static_cast<std::size_t>(shape_numel(e.shape)) * dtype_size(e.dtype);
        a.entries.push_back(std::move(e));
      }
      if (r.position() + payload != file_size)
        throw LoadError(path.string() + ": size mismatch (header promises " +
                        std::to_string(r.position() + payload) + " bytes, file has " +
                        std::to_string(file_size) + ")");
      return a;
    } catch (const LoadError& e) {
      if (complete || std::string(e.what()).find("truncated") == std::string::npos) throw;
    }
  }
}

inline Tensor to_tensor(const ArchiveEntry& e) { return Tensor::from(e.shape, e.values); }

}  // namespace simcmf
