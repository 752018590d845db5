#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace hemorl {

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

/// splitmix64 finaliser; good avalanche, used to derive independent streams.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Seed for stream `stream` of a master seed, e.g. one stream per patient.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t salt = 0) noexcept;

/// Stable 64-bit salt from a short label ("physician", "rollout", ...).
std::uint64_t label_salt(std::string_view label) noexcept;

// ---------------------------------------------------------------------------
// Summation
// ---------------------------------------------------------------------------

/// Neumaier compensated accumulator. Results are independent of how the
/// caller batches additions only up to rounding; fixed order gives bitwise
/// reproducibility.
class CompensatedSum {
 public:
  void add(double x) noexcept;
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

double compensated_sum(std::span<const double> xs) noexcept;

// ---------------------------------------------------------------------------
// Parallelism
// ---------------------------------------------------------------------------

/// Worker count used when callers pass 0: HEMORL_THREADS if set, else
/// hardware concurrency.
std::size_t default_threads() noexcept;

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index runs
/// exactly once; callers write results into slot i so output order never
/// depends on scheduling. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, std::size_t threads = 0);

// ---------------------------------------------------------------------------
// Hashing and canonical JSON
// ---------------------------------------------------------------------------

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Deterministic serialisation: object keys sorted, every number printed as a
/// round-trippable double ("1" and "1.0" serialise identically).
std::string canonical_dump(const nlohmann::json& j);
std::string canonical_hash(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Bit-exact doubles
// ---------------------------------------------------------------------------

/// 16 lowercase hex digits per value, IEEE-754 bit pattern.
std::string doubles_to_hex(std::span<const double> xs);
std::vector<double> doubles_from_hex(std::string_view hex);

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file then renames, so readers never see a torn file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Minimal RFC-4180-ish CSV: comma separated, fields quoted only when needed.
std::string csv_escape(std::string_view field);
std::vector<std::string> csv_split(std::string_view line);

}  // namespace hemorl
