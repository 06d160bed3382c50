#pragma once

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bilevel {

// One metrics row per recorded iteration. Fields that do not apply to a run
// (no closed-form optimum, no ground truth, timing disabled) stay unset and
// serialize as empty CSV cells.
struct TraceRecord {
  std::size_t k = 0;
  std::optional<double> wall_time_s;
  std::optional<double> upper_value;
  std::optional<double> fw_gap_practical;
  std::optional<double> fw_gap_exact;
  std::optional<double> suboptimality;
  std::optional<double> lower_grad_norm;
  std::optional<double> normalized_error;
  std::optional<double> lemma2_measured;
  std::optional<double> lemma2_bound;

  bool operator==(const TraceRecord&) const = default;
};

inline constexpr const char* kTraceHeader =
    "k,wall_time_s,upper_value,fw_gap_practical,fw_gap_exact,suboptimality,"
    "lower_grad_norm,normalized_error,lemma2_measured,lemma2_bound";

namespace detail {

inline std::string cell(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", *v);
  return buf;
}

inline std::optional<double> parse_cell(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

}  // namespace detail

inline std::string to_csv_row(const TraceRecord& r) {
  std::ostringstream out;
  out << r.k << ',' << detail::cell(r.wall_time_s) << ',' << detail::cell(r.upper_value)
      << ',' << detail::cell(r.fw_gap_practical) << ',' << detail::cell(r.fw_gap_exact) << ','
      << detail::cell(r.suboptimality) << ',' << detail::cell(r.lower_grad_norm) << ','
      << detail::cell(r.normalized_error) << ',' << detail::cell(r.lemma2_measured) << ','
      << detail::cell(r.lemma2_bound);
  return out.str();
}

inline void write_trace_csv(const std::string& path, const std::vector<TraceRecord>& records) {
  std::ofstream out(path, std::ios::binary);  // binary: byte-identical across runs
  if (!out) throw std::runtime_error("write_trace_csv: cannot open " + path);
  out << kTraceHeader << '\n';
  for (const TraceRecord& r : records) out << to_csv_row(r) << '\n';
  if (!out) throw std::runtime_error("write_trace_csv: write failure on " + path);
}

inline std::vector<TraceRecord> read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_trace_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != kTraceHeader)
    throw std::runtime_error("read_trace_csv: unexpected header in " + path);

  std::vector<TraceRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cur;
    for (const char c : line) {
      if (c == ',') {
        cells.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    cells.push_back(cur);
    if (cells.size() != 10)
      throw std::runtime_error("read_trace_csv: malformed row '" + line + "'");
    TraceRecord r;
    r.k = static_cast<std::size_t>(std::stoull(cells[0]));
    r.wall_time_s = detail::parse_cell(cells[1]);
    r.upper_value = detail::parse_cell(cells[2]);
    r.fw_gap_practical = detail::parse_cell(cells[3]);
    r.fw_gap_exact = detail::parse_cell(cells[4]);
    r.suboptimality = detail::parse_cell(cells[5]);
    r.lower_grad_norm = detail::parse_cell(cells[6]);
    r.normalized_error = detail::parse_cell(cells[7]);
    r.lemma2_measured = detail::parse_cell(cells[8]);
    r.lemma2_bound = detail::parse_cell(cells[9]);
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace bilevel
