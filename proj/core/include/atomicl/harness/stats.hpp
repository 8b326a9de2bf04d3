#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace atomicl::harness {

struct Interval {
  double low = 0.0;
  double high = 1.0;
};

/// Wilson score interval for `errors` successes out of `trials`; z = 1.96
/// gives 95% coverage. trials == 0 yields [0, 1].
Interval wilson_interval(std::size_t errors, std::size_t trials, double z = 1.96);

/// Two intervals share at least one point.
bool overlaps(const Interval& a, const Interval& b) noexcept;

inline constexpr std::size_t kMinBitsPerPoint = 10000;

/// One (sweep point, detector) cell of a BER table.
struct ResultRow {
  std::string axis;             ///< "snr_db" or "users"
  double value = 0.0;
  std::string detector;
  std::size_t errors = 0;
  std::size_t bits = 0;
  double ber = 0.0;
  Interval ci;
  std::optional<double> ms_per_frame;

  bool low_bits() const noexcept { return bits < kMinBitsPerPoint; }
};

ResultRow make_row(std::string axis, double value, std::string detector, std::size_t errors, std::size_t bits,
                   std::optional<double> ms_per_frame = std::nullopt);

/// First line of every BER table; bump the suffix on any column change.
inline constexpr const char* kBerSchema = "# atomicl-ber-csv v1";
inline constexpr const char* kBerHeader = "axis,value,detector,ber,errors,bits,ci_low,ci_high,low_bits,ms_per_frame";

void write_ber_csv(std::ostream& out, const std::vector<ResultRow>& rows);
/// Parses a table written by write_ber_csv; throws std::runtime_error on a
/// schema or column mismatch.
std::vector<ResultRow> read_ber_csv(std::istream& in);

/// Shortest round-trip decimal form of `v`.
std::string format_number(double v);

}  // namespace atomicl::harness
