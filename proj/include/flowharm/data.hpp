#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowharm::data {

/// Malformed input: bad header, wrong column count, unparsable or
/// out-of-range values, schema mismatch against a model.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rows of (subject id, sex, age, site, features). Features are row-major.
struct DataTable {
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<int> sex;
  std::vector<double> age;
  std::vector<std::size_t> site;
  std::vector<double> x;
  // Site the row was acquired at, when it differs from `site` (harmonized
  // tables). Empty when absent; written as a trailing origin_site column.
  std::vector<std::size_t> origin;

  std::size_t rows() const { return ids.size(); }
  std::span<const double> features(std::size_t i) const { return {x.data() + i * dim, dim}; }
  std::span<double> features(std::size_t i) { return {x.data() + i * dim, dim}; }

  void reserve(std::size_t n);
  void push_row(std::string id, int s, double a, std::size_t t, std::span<const double> f);

  // Largest site id + 1 (0 for an empty table).
  std::size_t site_count() const;
  std::vector<std::size_t> rows_per_site(std::size_t sites) const;
  DataTable subset(std::span<const std::size_t> rows) const;
  std::size_t acquisition_site(std::size_t i) const { return origin.empty() ? site[i] : origin[i]; }
};

std::string feature_name(std::size_t j);
std::string header_line(std::size_t dim, bool with_origin = false);

// Canonical CSV: subject_id,sex,age,site,f000..f{d-1}[,origin_site]; LF line endings.
DataTable read_csv(const std::string& path);
void write_csv(const std::string& path, const DataTable& t);

// Shortest text that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view s, const std::string& where);

// Two-column sidecar (subject_id,<name>) for integer labels.
void write_labels(const std::string& path, const std::string& name, std::span<const std::string> ids,
                  std::span<const int> labels);
std::vector<int> read_labels(const std::string& path, const std::string& name, std::span<const std::string> ids);

}  // namespace flowharm::data
