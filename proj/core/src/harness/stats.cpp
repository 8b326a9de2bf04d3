#include "atomicl/harness/stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace atomicl::harness {

Interval wilson_interval(std::size_t errors, std::size_t trials, double z) {
  if (trials == 0) return {0.0, 1.0};
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(errors) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double centre = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  Interval ci{std::max(0.0, centre - half), std::min(1.0, centre + half)};
  // Rounding can push an endpoint past p at the extremes.
  if (ci.low > p) ci.low = p;
  if (ci.high < p) ci.high = p;
  return ci;
}

bool overlaps(const Interval& a, const Interval& b) noexcept { return a.low <= b.high && b.low <= a.high; }

ResultRow make_row(std::string axis, double value, std::string detector, std::size_t errors, std::size_t bits,
                   std::optional<double> ms_per_frame) {
  ResultRow r;
  r.axis = std::move(axis);
  r.value = value;
  r.detector = std::move(detector);
  r.errors = errors;
  r.bits = bits;
  r.ber = bits == 0 ? 0.0 : static_cast<double>(errors) / static_cast<double>(bits);
  r.ci = wilson_interval(errors, bits);
  r.ms_per_frame = ms_per_frame;
  return r;
}

std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void write_ber_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << kBerSchema << '\n' << kBerHeader << '\n';
  for (const auto& r : rows) {
    out << r.axis << ',' << format_number(r.value) << ',' << r.detector << ',' << format_number(r.ber) << ','
        << r.errors << ',' << r.bits << ',' << format_number(r.ci.low) << ',' << format_number(r.ci.high) << ','
        << (r.low_bits() ? 1 : 0) << ',';
    if (r.ms_per_frame) out << format_number(*r.ms_per_frame);
    out << '\n';
  }
}

namespace {

double parse_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw std::runtime_error("ber csv: bad number '" + s + "'");
  return v;
}

std::size_t parse_size(const std::string& s) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw std::runtime_error("ber csv: bad count '" + s + "'");
  return v;
}

}  // namespace

std::vector<ResultRow> read_ber_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kBerSchema) throw std::runtime_error("ber csv: missing or unknown schema line");
  if (!std::getline(in, line) || line != kBerHeader) throw std::runtime_error("ber csv: unexpected header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    if (cells.size() != 10) throw std::runtime_error("ber csv: expected 10 columns in '" + line + "'");
    ResultRow r;
    r.axis = cells[0];
    r.value = parse_double(cells[1]);
    r.detector = cells[2];
    r.ber = parse_double(cells[3]);
    r.errors = parse_size(cells[4]);
    r.bits = parse_size(cells[5]);
    r.ci = {parse_double(cells[6]), parse_double(cells[7])};
    if (!cells[9].empty()) r.ms_per_frame = parse_double(cells[9]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace atomicl::harness
