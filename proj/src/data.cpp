#include "flowharm/data.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace flowharm::data {

void DataTable::reserve(std::size_t n) {
  ids.reserve(n);
  sex.reserve(n);
  age.reserve(n);
  site.reserve(n);
  x.reserve(n * dim);
}

void DataTable::push_row(std::string id, int s, double a, std::size_t t, std::span<const double> f) {
  if (f.size() != dim) throw DataError("push_row: expected " + std::to_string(dim) + " features");
  ids.push_back(std::move(id));
  sex.push_back(s);
  age.push_back(a);
  site.push_back(t);
  x.insert(x.end(), f.begin(), f.end());
}

std::size_t DataTable::site_count() const {
  std::size_t k = 0;
  for (auto t : site) k = std::max(k, t + 1);
  return k;
}

std::vector<std::size_t> DataTable::rows_per_site(std::size_t sites) const {
  std::vector<std::size_t> c(sites, 0);
  for (auto t : site) {
    if (t < sites) ++c[t];
  }
  return c;
}

DataTable DataTable::subset(std::span<const std::size_t> rows) const {
  DataTable out;
  out.dim = dim;
  out.reserve(rows.size());
  for (auto r : rows) {
    out.push_row(ids[r], sex[r], age[r], site[r], features(r));
    if (!origin.empty()) out.origin.push_back(origin[r]);
  }
  return out;
}

std::string feature_name(std::size_t j) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "f%03zu", j);
  return buf;
}

std::string header_line(std::size_t dim, bool with_origin) {
  std::string h = "subject_id,sex,age,site";
  for (std::size_t j = 0; j < dim; ++j) h += "," + feature_name(j);
  if (with_origin) h += ",origin_site";
  return h;
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw DataError(where + ": cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

namespace {

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto p = line.find(',', start);
    if (p == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, p - start));
    start = p + 1;
  }
}

std::size_t parse_index(std::string_view s, const std::string& where) {
  std::size_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw DataError(where + ": expected a non-negative integer, got '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

DataTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') throw DataError(path + ": CRLF line endings are not accepted");
  const auto head = split(line);
  if (head.size() < 5 || head[0] != "subject_id" || head[1] != "sex" || head[2] != "age" || head[3] != "site") {
    throw DataError(path + ": header must start with subject_id,sex,age,site followed by features");
  }
  DataTable t;
  const bool with_origin = head.back() == "origin_site";
  t.dim = head.size() - 4 - (with_origin ? 1 : 0);
  if (t.dim == 0) throw DataError(path + ": no feature columns");
  for (std::size_t j = 0; j < t.dim; ++j) {
    if (head[4 + j] != feature_name(j)) {
      throw DataError(path + ": feature column " + std::to_string(j) + " must be named " + feature_name(j));
    }
  }
  std::vector<double> f(t.dim);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(lineno);
    const auto cols = split(line);
    if (cols.size() != head.size()) {
      throw DataError(where + ": expected " + std::to_string(head.size()) + " columns, got " +
                      std::to_string(cols.size()));
    }
    if (cols[0].empty()) throw DataError(where + ": empty subject_id");
    const std::size_t s = parse_index(cols[1], where);
    if (s > 1) throw DataError(where + ": sex must be 0 or 1");
    const double a = parse_double(cols[2], where);
    if (!std::isfinite(a)) throw DataError(where + ": non-finite age");
    const std::size_t site = parse_index(cols[3], where);
    for (std::size_t j = 0; j < t.dim; ++j) {
      f[j] = parse_double(cols[4 + j], where);
      if (!std::isfinite(f[j])) throw DataError(where + ": non-finite feature " + feature_name(j));
    }
    t.push_row(std::string(cols[0]), static_cast<int>(s), a, site, f);
    if (with_origin) t.origin.push_back(parse_index(cols.back(), where));
  }
  return t;
}

void write_csv(const std::string& path, const DataTable& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  const bool with_origin = !t.origin.empty();
  if (with_origin && t.origin.size() != t.rows()) throw DataError("write_csv: origin column has the wrong length");
  std::string buf = header_line(t.dim, with_origin) + "\n";
  for (std::size_t i = 0; i < t.rows(); ++i) {
    buf += t.ids[i];
    buf += ',' + std::to_string(t.sex[i]) + ',' + format_double(t.age[i]) + ',' + std::to_string(t.site[i]);
    for (double v : t.features(i)) buf += ',' + format_double(v);
    if (with_origin) buf += ',' + std::to_string(t.origin[i]);
    buf += '\n';
    if (buf.size() > (1u << 20)) {
      out << buf;
      buf.clear();
    }
  }
  out << buf;
  if (!out) throw DataError("write failed: " + path);
}

void write_labels(const std::string& path, const std::string& name, std::span<const std::string> ids,
                  std::span<const int> labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "subject_id," << name << "\n";
  for (std::size_t i = 0; i < ids.size(); ++i) out << ids[i] << ',' << labels[i] << '\n';
}

std::vector<int> read_labels(const std::string& path, const std::string& name, std::span<const std::string> ids) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "subject_id," + name) {
    throw DataError(path + ": header must be subject_id," + name);
  }
  std::unordered_map<std::string, int> by_id;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cols = split(line);
    if (cols.size() != 2) throw DataError(path + ":" + std::to_string(lineno) + ": expected 2 columns");
    by_id[std::string(cols[0])] = static_cast<int>(parse_double(cols[1], path + ":" + std::to_string(lineno)));
  }
  std::vector<int> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError(path + ": no " + name + " label for subject " + id);
    out.push_back(it->second);
  }
  return out;
}

}  // namespace flowharm::data
