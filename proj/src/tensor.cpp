#include "teata/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

namespace teata {

std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salt) {
  // splitmix64 chained over the salt values
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(base);
  for (auto s : salt) h = mix(h ^ mix(s));
  return h;
}

void truncated_normal_(Matrix& m, double std, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double x = normal(rng);
    while (std::abs(x) > 2.0) x = normal(rng);
    m.data()[i] = x * std;
  }
}

Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
  Matrix m(rows, cols);
  truncated_normal_(m, std, rng);
  return m;
}

Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (auto b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view text) {
  return fnv1a(std::as_bytes(std::span<const char>(text.data(), text.size())));
}

std::uint64_t hash_matrix(const Matrix& m, std::uint64_t seed) {
  const std::int64_t shape[2] = {m.rows(), m.cols()};
  std::uint64_t h = fnv1a(std::as_bytes(std::span<const std::int64_t>(shape, 2)), seed);
  return fnv1a(std::as_bytes(std::span<const double>(m.data(), static_cast<std::size_t>(m.size()))), h);
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace teata
