#pragma once

#include <string>
#include <vector>

#include "flowharm/data.hpp"
#include "flowharm/scm.hpp"

namespace flowharm::harmonize {

struct Options {
  std::size_t reference_site = 0;
  std::size_t mc_samples = 32;
  std::size_t threads = 1;  // 0: all hardware threads
  std::size_t bins = 50;
};

struct SkippedRow {
  std::size_t row = 0;
  std::string id;
  std::string error;
};

// Per-site, per-feature moments; rows grouped by acquisition site.
struct Moments {
  std::vector<std::size_t> count;          // [K]
  std::vector<std::vector<double>> mean;   // [K][d]
  std::vector<std::vector<double>> var;    // [K][d], population variance
};

struct Histogram {
  double lo = 0.0, hi = 0.0;
  std::vector<std::vector<std::size_t>> pre, post;  // [K][bins]
};

struct Report {
  std::size_t reference_site = 0;
  std::size_t mc_samples = 0;
  std::size_t rows_in = 0, rows_out = 0;
  std::vector<std::size_t> site_counts;
  std::vector<SkippedRow> skipped;
  Moments pre, post;
  std::vector<Histogram> histograms;  // [d], 50 bins over the pooled pre/post range
  double max_sample_spread = 0.0;
};

struct Result {
  data::DataTable table;  // site = reference, origin = acquisition site
  Report report;
};

// Counterfactual of every row under do(t := reference_site). Schema problems
// throw DataError before any row is processed; rows that fail abduction are
// dropped and listed in the report.
Result run(const scm::ScmModel& model, const data::DataTable& input, const Options& opt);

Moments moments(const data::DataTable& t, std::size_t sites);
std::string report_json(const Report& r);

}  // namespace flowharm::harmonize
