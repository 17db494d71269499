#include "snp/metrics_log.hpp"

#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace snp {

void MetricsLog::open(const std::string& path, bool append) {
  path_ = path;
  const bool existed = append && static_cast<bool>(std::ifstream(path));
  out_.open(path, append ? std::ios::app : std::ios::trunc);
  if (!out_) throw std::runtime_error("metrics: cannot open " + path);
  if (!existed) out_ << "iteration\tsplit\tmetric\tvalue\tseed\n";
}

void MetricsLog::row(int64_t iteration, const std::string& split, const std::string& metric,
                     double value, uint64_t seed) {
  if (!out_.is_open()) throw std::runtime_error("metrics: log not open");
  if (iteration < last_iteration_)
    throw std::runtime_error("metrics: non-monotone iteration " + std::to_string(iteration));
  last_iteration_ = iteration;
  char buf[64];
  snprintf(buf, sizeof(buf), "%.17g", value);
  out_ << iteration << '\t' << split << '\t' << metric << '\t' << buf << '\t' << seed << '\n';
}

void MetricsLog::flush() { out_.flush(); }

std::vector<MetricRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("metrics: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "iteration\tsplit\tmetric\tvalue\tseed")
    throw std::runtime_error("metrics: bad header in " + path);
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    MetricRow r;
    std::string value;
    if (!std::getline(ss, line, '\t')) throw std::runtime_error("metrics: bad row");
    r.iteration = std::stoll(line);
    if (!std::getline(ss, r.split, '\t')) throw std::runtime_error("metrics: bad row");
    if (!std::getline(ss, r.metric, '\t')) throw std::runtime_error("metrics: bad row");
    if (!std::getline(ss, value, '\t')) throw std::runtime_error("metrics: bad row");
    r.value = std::stod(value);
    if (!std::getline(ss, value, '\t')) throw std::runtime_error("metrics: bad row");
    r.seed = std::stoull(value);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<double> metric_series(const std::vector<MetricRow>& rows, const std::string& metric,
                                  const std::string& split) {
  std::vector<double> out;
  for (const auto& r : rows)
    if (r.metric == metric && (split.empty() || r.split == split)) out.push_back(r.value);
  return out;
}

}  // namespace snp
