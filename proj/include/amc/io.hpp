#pragma once

// Little-endian binary encoding, checksums and content hashes shared by the
// AMCD / AMCM / AMCP artifact formats.

#include <openssl/evp.h>
#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "amc/error.hpp"

namespace amc::io {

static_assert(std::endian::native == std::endian::little,
              "artifact encoding assumes a little-endian host");

using Bytes = std::vector<std::uint8_t>;

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::string to_hex(const std::uint8_t* data, std::size_t n) {
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (std::size_t i = 0; i < n; ++i) os << std::setw(2) << static_cast<int>(data[i]);
  return os.str();
}

inline std::string sha256_hex(const void* data, std::size_t n) {
  std::array<std::uint8_t, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(data, n, md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  return to_hex(md.data(), len);
}

inline std::string sha256_hex(const Bytes& b) { return sha256_hex(b.data(), b.size()); }
inline std::string sha256_hex(std::string_view s) { return sha256_hex(s.data(), s.size()); }

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  Bytes b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return b;
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path.string());
}

inline std::string file_sha256(const std::filesystem::path& path) {
  return sha256_hex(read_file(path));
}

class Writer {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void u8(std::uint8_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void i32(std::int32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(v); }
  void f64(double v) { put(v); }
  void magic(std::string_view m) { buf_.insert(buf_.end(), m.begin(), m.end()); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }

  /// Appends CRC32 of every byte written so far.
  Bytes finish() {
    const std::uint32_t c = crc32(buf_.data(), buf_.size());
    u32(c);
    return std::move(buf_);
  }

  const Bytes& bytes() const { return buf_; }

 private:
  Bytes buf_;
};

class Reader {
 public:
  /// The final four bytes are reserved for the CRC32, checked in finish().
  Reader(const Bytes& bytes, std::string_view magic, std::string what)
      : data_(bytes), what_(std::move(what)) {
    if (bytes.size() < magic.size() || std::memcmp(bytes.data(), magic.data(), magic.size()) != 0) {
      throw FormatError(what_ + ": bad magic");
    }
    pos_ = magic.size();
    if (bytes.size() < magic.size() + 4) throw FormatError(what_ + ": truncated file");
    end_ = bytes.size() - 4;
  }

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > end_) throw FormatError(what_ + ": truncated file");
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::int32_t i32() { return get<std::int32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return get<float>(); }
  double f64() { return get<double>(); }
  std::string str() {
    const std::uint32_t n = u32();
    ensure(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  /// Throws "truncated file" unless `n` more payload bytes are available.
  void ensure(std::uint64_t n) const {
    if (n > end_ - pos_) throw FormatError(what_ + ": truncated file");
  }

  /// Checks that the payload was consumed exactly and the checksum matches.
  void finish() const {
    std::uint32_t stored;
    std::memcpy(&stored, data_.data() + end_, 4);
    if (crc32(data_.data(), end_) != stored) throw FormatError(what_ + ": checksum failure");
    if (pos_ != end_) throw FormatError(what_ + ": trailing bytes before checksum");
  }

  bool checksum_ok() const {
    std::uint32_t stored;
    std::memcpy(&stored, data_.data() + end_, 4);
    return crc32(data_.data(), end_) == stored;
  }

 private:
  const Bytes& data_;
  std::string what_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

// splitmix64 finalizer; used to derive independent per-item seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace amc::io
