#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace teata {

// All numerics run in double precision; checkpoints store float32.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Rng = std::mt19937_64;

/// Mixes a base seed with a list of integers (step, epoch, ...) into one
/// well-spread 64-bit seed.
std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> salt);

/// Fills `m` with N(0, std^2) samples truncated (by resampling) to +-2 std.
void truncated_normal_(Matrix& m, double std, Rng& rng);
Matrix truncated_normal(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng);

/// Rows scaled to unit L2 norm. Zero rows stay zero.
Matrix normalize_rows(const Matrix& m);

bool all_finite(const Matrix& m);

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(std::string_view text);

/// Bitwise hash of matrix contents (shape included).
std::uint64_t hash_matrix(const Matrix& m, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string hex64(std::uint64_t value);

}  // namespace teata
