#include "m3dm/random.hpp"

#include <cmath>
#include <numbers>

#include "m3dm/error.hpp"

namespace m3dm {

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  require(n > 0, ErrorKind::BadParam, "uniform_index on empty range");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform01();
  while (u1 <= 0.0) u1 = uniform01();
  const double u2 = uniform01();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index) {
  // FNV-1a over the tag keeps streams with different names apart.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return mix_seed(mix_seed(base ^ h) + index);
}

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::BadArity: return "BadArity";
    case ErrorKind::BadParam: return "BadParam";
    case ErrorKind::DegenerateScene: return "DegenerateScene";
    case ErrorKind::EmptyData: return "EmptyData";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::SizeMismatch: return "SizeMismatch";
    case ErrorKind::OneClassOnly: return "OneClassOnly";
    case ErrorKind::NoAnomaly: return "NoAnomaly";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::DataError: return "DataError";
  }
  return "Unknown";
}

}  // namespace m3dm
