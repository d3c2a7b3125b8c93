#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace gmptl {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Rng = std::mt19937_64;

// FNV-1a, 64 bit. Used for provenance and config hashes.
class Hasher {
 public:
  Hasher& bytes(const void* data, std::size_t n);
  Hasher& str(std::string_view s);
  Hasher& u64(std::uint64_t v) { return bytes(&v, sizeof v); }
  Hasher& f64(double v) { return bytes(&v, sizeof v); }
  Hasher& mat(const Mat& m);
  std::uint64_t value() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 1469598103934665603ULL;
};

std::string hex64(std::uint64_t v);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

/// Derives an independent child seed; stable across platforms.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0);

enum class LogLevel { Debug, Info, Warn, Error };
void set_log_level(LogLevel level);
LogLevel log_level();
void log(LogLevel level, const std::string& msg);
inline void log_info(const std::string& msg) { log(LogLevel::Info, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::Warn, msg); }

// Little-endian binary helpers. All supported targets are little-endian.
namespace bin {
void write_magic(std::ostream& os, std::string_view magic);
bool read_magic(std::istream& is, std::string_view magic);
void write_u32(std::ostream& os, std::uint32_t v);
bool read_u32(std::istream& is, std::uint32_t& v);
void write_f32(std::ostream& os, float v);
bool read_f32(std::istream& is, float& v);
void write_f64(std::ostream& os, double v);
bool read_f64(std::istream& is, double& v);
}  // namespace bin

}  // namespace gmptl
