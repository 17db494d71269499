#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace snp {

/// Append-only tab-separated metrics log: one header row, then
/// (iteration, split, metric, value, seed) rows.
class MetricsLog {
 public:
  MetricsLog() = default;

  void open(const std::string& path, bool append);
  void row(int64_t iteration, const std::string& split, const std::string& metric, double value,
           uint64_t seed);
  void flush();
  const std::string& path() const { return path_; }

 private:
  std::ofstream out_;
  std::string path_;
  int64_t last_iteration_ = -1;
};

struct MetricRow {
  int64_t iteration;
  std::string split, metric;
  double value;
  uint64_t seed;
};

/// Parses a metrics file; throws on missing file or malformed header.
std::vector<MetricRow> read_metrics(const std::string& path);

/// Values of one metric ordered by iteration.
std::vector<double> metric_series(const std::vector<MetricRow>& rows, const std::string& metric,
                                  const std::string& split = "");

}  // namespace snp
