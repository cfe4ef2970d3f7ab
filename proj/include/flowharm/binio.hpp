#pragma once
// Little-endian binary helpers shared by the model file and the noise sidecar.

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowharm/data.hpp"

namespace flowharm::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::uint64_t fnv1a(const unsigned char* p, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class T>
  void put(T v) {
    bytes(&v, sizeof v);
  }
  void str(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void f64s(const std::vector<double>& v) {
    put<std::uint64_t>(v.size());
    bytes(v.data(), v.size() * sizeof(double));
  }
  // Appends the FNV-1a checksum of everything written so far.
  void seal() { put<std::uint64_t>(fnv1a(buf_.data(), buf_.size())); }
  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  Reader(const unsigned char* p, std::size_t n, std::string what) : p_(p), n_(n), what_(std::move(what)) {}

  void bytes(void* out, std::size_t n) {
    if (n > n_ - pos_) throw data::DataError(what_ + ": truncated file");
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
  }
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = get<std::uint64_t>();
    if (n > n_ - pos_) throw data::DataError(what_ + ": truncated file");
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64s() {
    const auto n = get<std::uint64_t>();
    if (n > (n_ - pos_) / sizeof(double)) throw data::DataError(what_ + ": truncated file");
    std::vector<double> v(n);
    bytes(v.data(), n * sizeof(double));
    return v;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  const unsigned char* p_;
  std::size_t n_, pos_ = 0;
  std::string what_;
};

// Verifies the trailing checksum; returns the payload length.
inline std::size_t verify_sealed(const std::vector<unsigned char>& buf, const std::string& what) {
  if (buf.size() < sizeof(std::uint64_t)) throw data::DataError(what + ": truncated file");
  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof stored);
  if (stored != fnv1a(buf.data(), body)) throw data::DataError(what + ": checksum mismatch (corrupted or truncated)");
  return body;
}

std::vector<unsigned char> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<unsigned char>& buf);

}  // namespace flowharm::binio
