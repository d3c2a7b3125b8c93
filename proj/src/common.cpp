#include "gmptl/common.hpp"

#include <atomic>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <iostream>

namespace gmptl {

Hasher& Hasher::bytes(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    state_ ^= p[i];
    state_ *= 1099511628211ULL;
  }
  return *this;
}

Hasher& Hasher::str(std::string_view s) {
  u64(s.size());
  return bytes(s.data(), s.size());
}

Hasher& Hasher::mat(const Mat& m) {
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  return bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}

std::string Hasher::hex() const { return hex64(state_); }

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
  Hasher h;
  h.u64(base).str(tag).u64(index);
  // splitmix finalizer
  std::uint64_t z = h.value() + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {
std::atomic<LogLevel> g_level{LogLevel::Info};
}

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log(LogLevel level, const std::string& msg) {
  if (level < g_level.load()) return;
  static constexpr const char* kTags[] = {"DEBUG", "INFO", "WARN", "ERROR"};
  std::cerr << "[gmptl " << kTags[static_cast<int>(level)] << "] " << msg << '\n';
}

namespace bin {

void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

bool read_magic(std::istream& is, std::string_view magic) {
  char buf[8] = {};
  if (magic.size() > sizeof buf) return false;
  if (!is.read(buf, static_cast<std::streamsize>(magic.size()))) return false;
  return std::memcmp(buf, magic.data(), magic.size()) == 0;
}

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
bool read_u32(std::istream& is, std::uint32_t& v) { return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), 4)); }
void write_f32(std::ostream& os, float v) { os.write(reinterpret_cast<const char*>(&v), 4); }
bool read_f32(std::istream& is, float& v) { return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), 4)); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
bool read_f64(std::istream& is, double& v) { return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), 8)); }

}  // namespace bin

}  // namespace gmptl
