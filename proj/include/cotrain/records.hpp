#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cotrain/errors.hpp"
#include "cotrain/schedule.hpp"
#include "cotrain/trainer.hpp"

namespace cotrain {

namespace csv {

inline std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

inline std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace csv

inline std::string records_header(int num_fg_classes) {
  std::ostringstream os;
  os << "epoch,method,seed";
  for (int c = 1; c <= num_fg_classes; ++c) os << ",dsc_avg_c" << c;
  os << ",dsc_avg_mean";
  for (int c = 1; c <= num_fg_classes; ++c) os << ",dsc_vote_c" << c;
  os << ",dsc_vote_mean,hd_vote_mean,l_sup,l_cot,l_div,l_total,lambda_cot,lambda_div,lr";
  return os.str();
}

// Deterministic metric CSV. Wall-clock timing deliberately lives elsewhere so
// identical reruns produce byte-identical files.
inline void write_records_csv(const std::string& path, const std::vector<EpochRecord>& records) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  const int k = records.empty() ? 0 : static_cast<int>(records[0].dsc_avg.size());
  os << records_header(k) << '\n';
  for (const auto& r : records) {
    os << r.epoch << ',' << r.method << ',' << r.seed;
    for (double v : r.dsc_avg) os << ',' << csv::fmt(v);
    os << ',' << csv::fmt(r.dsc_avg_mean);
    for (double v : r.dsc_vote) os << ',' << csv::fmt(v);
    os << ',' << csv::fmt(r.dsc_vote_mean) << ',' << csv::fmt(r.hd_vote_mean) << ','
       << csv::fmt(r.l_sup) << ',' << csv::fmt(r.l_cot) << ',' << csv::fmt(r.l_div) << ','
       << csv::fmt(r.l_total) << ',' << csv::fmt(r.lambda_cot) << ',' << csv::fmt(r.lambda_div)
       << ',' << csv::fmt(r.lr) << '\n';
  }
  if (!os) throw IoError("write failed for " + path);
}

inline std::vector<EpochRecord> read_records_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string header;
  if (!std::getline(is, header)) throw IoError("empty records file " + path);
  int num_fg = 0;
  for (const auto& col : csv::split_row(header))
    if (col.rfind("dsc_avg_c", 0) == 0) ++num_fg;
  const std::string expected = records_header(num_fg);
  if (header != expected)
    throw ConfigError("records schema mismatch in " + path + ": got '" + header +
                      "', expected '" + expected + "'");
  std::vector<EpochRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = csv::split_row(line);
    if (cells.size() != static_cast<std::size_t>(3 + 2 * num_fg + 10))
      throw IoError("bad record row in " + path);
    EpochRecord r;
    std::size_t i = 0;
    r.epoch = std::stoi(cells[i++]);
    r.method = cells[i++];
    r.seed = static_cast<std::uint64_t>(std::stoull(cells[i++]));
    for (int c = 0; c < num_fg; ++c) r.dsc_avg.push_back(std::stod(cells[i++]));
    r.dsc_avg_mean = std::stod(cells[i++]);
    for (int c = 0; c < num_fg; ++c) r.dsc_vote.push_back(std::stod(cells[i++]));
    r.dsc_vote_mean = std::stod(cells[i++]);
    r.hd_vote_mean = std::stod(cells[i++]);
    r.l_sup = std::stod(cells[i++]);
    r.l_cot = std::stod(cells[i++]);
    r.l_div = std::stod(cells[i++]);
    r.l_total = std::stod(cells[i++]);
    r.lambda_cot = std::stod(cells[i++]);
    r.lambda_div = std::stod(cells[i++]);
    r.lr = std::stod(cells[i++]);
    out.push_back(std::move(r));
  }
  return out;
}

struct SummaryRow {
  std::string method;
  int runs = 0;
  double dsc_vote_mean = 0, dsc_vote_std = 0;
  double dsc_avg_mean = 0, dsc_avg_std = 0;
  double hd_mean = 0, hd_std = 0;
};

namespace detail {
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}
}  // namespace detail

// Final-epoch mean and sample standard deviation per method over a set of run
// record files, plus per-method DSC-vs-epoch curves averaged over runs.
struct Summary {
  std::vector<SummaryRow> rows;
  // method -> per-epoch mean of soft-vote DSC across runs
  std::map<std::string, std::vector<double>> curves;
};

inline Summary summarize(const std::vector<std::string>& record_files) {
  if (record_files.empty()) throw ContractError("summarize: needs at least one record file");
  std::map<std::string, std::vector<std::vector<EpochRecord>>> by_method;
  for (const auto& f : record_files) {
    auto recs = read_records_csv(f);
    if (recs.empty()) throw ContractError("summarize: empty record file " + f);
    by_method[recs[0].method].push_back(std::move(recs));
  }
  Summary out;
  for (auto& [method, runs] : by_method) {
    SummaryRow row;
    row.method = method;
    row.runs = static_cast<int>(runs.size());
    std::vector<double> vote, avg, hd;
    std::size_t max_epochs = 0;
    for (const auto& recs : runs) {
      vote.push_back(recs.back().dsc_vote_mean);
      avg.push_back(recs.back().dsc_avg_mean);
      hd.push_back(recs.back().hd_vote_mean);
      max_epochs = std::max(max_epochs, recs.size());
    }
    std::tie(row.dsc_vote_mean, row.dsc_vote_std) = detail::mean_std(vote);
    std::tie(row.dsc_avg_mean, row.dsc_avg_std) = detail::mean_std(avg);
    std::tie(row.hd_mean, row.hd_std) = detail::mean_std(hd);
    out.rows.push_back(row);
    std::vector<double> curve(max_epochs, 0.0);
    std::vector<int> counts(max_epochs, 0);
    for (const auto& recs : runs)
      for (std::size_t e = 0; e < recs.size(); ++e) {
        curve[e] += recs[e].dsc_vote_mean;
        ++counts[e];
      }
    for (std::size_t e = 0; e < max_epochs; ++e) curve[e] /= counts[e];
    out.curves[method] = std::move(curve);
  }
  return out;
}

inline void write_summary_csv(const std::string& path, const Summary& s) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "method,runs,dsc_vote_mean,dsc_vote_std,dsc_avg_mean,dsc_avg_std,hd_mean,hd_std\n";
  for (const auto& r : s.rows)
    os << r.method << ',' << r.runs << ',' << csv::fmt(r.dsc_vote_mean) << ','
       << csv::fmt(r.dsc_vote_std) << ',' << csv::fmt(r.dsc_avg_mean) << ','
       << csv::fmt(r.dsc_avg_std) << ',' << csv::fmt(r.hd_mean) << ',' << csv::fmt(r.hd_std)
       << '\n';
}

// Two-column plot data: epoch index and value.
inline void write_series(const std::string& path, const std::vector<double>& values) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  for (std::size_t i = 0; i < values.size(); ++i) os << i << ' ' << csv::fmt(values[i]) << '\n';
}

inline void write_ramp_curve(const std::string& path, const RampConfig& cfg, int t_max) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  for (int t = 0; t <= t_max; ++t) os << t << ' ' << csv::fmt(ramp(t, cfg)) << '\n';
}

}  // namespace cotrain
