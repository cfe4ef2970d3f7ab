#include "flowharm/harmonize.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

#include "json.hpp"

namespace flowharm::harmonize {

namespace {

std::size_t resolve_threads(std::size_t requested, std::size_t rows) {
  std::size_t n = requested == 0 ? std::max(1u, std::thread::hardware_concurrency()) : requested;
  return std::max<std::size_t>(1, std::min(n, rows));
}

std::size_t bin_of(double v, double lo, double hi, std::size_t bins) {
  if (!(hi > lo)) return 0;
  const double u = (v - lo) / (hi - lo) * static_cast<double>(bins);
  if (u <= 0.0) return 0;
  return std::min(bins - 1, static_cast<std::size_t>(u));
}

}  // namespace

Moments moments(const data::DataTable& t, std::size_t sites) {
  const std::size_t d = t.dim;
  Moments m;
  m.count.assign(sites, 0);
  m.mean.assign(sites, std::vector<double>(d, 0.0));
  m.var.assign(sites, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const std::size_t k = t.acquisition_site(i);
    if (k >= sites) continue;
    ++m.count[k];
    const auto f = t.features(i);
    for (std::size_t j = 0; j < d; ++j) m.mean[k][j] += f[j];
  }
  for (std::size_t k = 0; k < sites; ++k) {
    if (m.count[k] == 0) continue;
    for (auto& v : m.mean[k]) v /= static_cast<double>(m.count[k]);
  }
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const std::size_t k = t.acquisition_site(i);
    if (k >= sites) continue;
    const auto f = t.features(i);
    for (std::size_t j = 0; j < d; ++j) {
      const double r = f[j] - m.mean[k][j];
      m.var[k][j] += r * r;
    }
  }
  for (std::size_t k = 0; k < sites; ++k) {
    if (m.count[k] == 0) continue;
    for (auto& v : m.var[k]) v /= static_cast<double>(m.count[k]);
  }
  return m;
}

Result run(const scm::ScmModel& model, const data::DataTable& input, const Options& opt) {
  const std::size_t K = model.spec().sites, d = model.spec().dim;
  model.check_table(input);
  if (!input.origin.empty()) {
    for (std::size_t i = 0; i < input.rows(); ++i) {
      if (input.origin[i] >= K) {
        throw data::DataError("row " + std::to_string(i) + " (" + input.ids[i] + "): unknown origin site " +
                              std::to_string(input.origin[i]));
      }
    }
  }
  if (opt.reference_site >= K) {
    throw data::DataError("reference site " + std::to_string(opt.reference_site) + " is not a site of this model (K=" +
                          std::to_string(K) + ")");
  }
  if (opt.mc_samples == 0) throw std::invalid_argument("mc_samples must be positive");
  if (opt.bins == 0) throw std::invalid_argument("histogram bins must be positive");

  const scm::Intervention iv{.target = "t", .value = opt.reference_site};
  const std::size_t n = input.rows();
  const std::size_t nt = resolve_threads(opt.threads, n);
  std::vector<scm::BatchCounterfactual> parts(nt);
  std::vector<std::exception_ptr> errors(nt);
  std::vector<std::size_t> bounds(nt + 1);
  for (std::size_t p = 0; p <= nt; ++p) bounds[p] = n * p / nt;
  const auto work = [&](std::size_t p) {
    try {
      std::vector<std::size_t> rows;
      for (std::size_t i = bounds[p]; i < bounds[p + 1]; ++i) rows.push_back(i);
      parts[p] = model.counterfactual_batch(input.subset(rows), iv, opt.mc_samples);
      for (auto& r : parts[p].kept_rows) r += bounds[p];
      for (auto& r : parts[p].failed_rows) r += bounds[p];
    } catch (...) {
      errors[p] = std::current_exception();
    }
  };
  if (nt == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t p = 0; p < nt; ++p) pool.emplace_back(work, p);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  Result res;
  auto& out = res.table;
  auto& rep = res.report;
  out.dim = d;
  out.reserve(n);
  for (std::size_t p = 0; p < nt; ++p) {
    const auto& part = parts[p];
    for (std::size_t i = 0; i < part.kept_rows.size(); ++i) {
      const std::size_t r = part.kept_rows[i];
      // Rows already acquired at the reference site are passed through untouched.
      const bool at_ref = input.site[r] == opt.reference_site;
      out.push_row(input.ids[r], input.sex[r], input.age[r], opt.reference_site,
                   at_ref ? input.features(r) : part.table.features(i));
      out.origin.push_back(input.acquisition_site(r));
    }
    for (std::size_t i = 0; i < part.failed_rows.size(); ++i) {
      const std::size_t r = part.failed_rows[i];
      rep.skipped.push_back({r, input.ids[r], part.errors[i]});
    }
    rep.max_sample_spread = std::max(rep.max_sample_spread, part.max_sample_spread);
  }

  rep.reference_site = opt.reference_site;
  rep.mc_samples = opt.mc_samples;
  rep.rows_in = n;
  rep.rows_out = out.rows();
  rep.site_counts.assign(K, 0);
  for (std::size_t i = 0; i < n; ++i) ++rep.site_counts[input.acquisition_site(i)];
  rep.pre = moments(input, K);
  rep.post = moments(out, K);

  rep.histograms.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    auto& h = rep.histograms[j];
    double lo = INFINITY, hi = -INFINITY;
    for (const data::DataTable* t : {&input, static_cast<const data::DataTable*>(&out)}) {
      for (std::size_t i = 0; i < t->rows(); ++i) {
        lo = std::min(lo, t->features(i)[j]);
        hi = std::max(hi, t->features(i)[j]);
      }
    }
    h.lo = std::isfinite(lo) ? lo : 0.0;
    h.hi = std::isfinite(hi) ? hi : 0.0;
    h.pre.assign(K, std::vector<std::size_t>(opt.bins, 0));
    h.post.assign(K, std::vector<std::size_t>(opt.bins, 0));
    for (std::size_t i = 0; i < input.rows(); ++i) {
      ++h.pre[input.acquisition_site(i)][bin_of(input.features(i)[j], h.lo, h.hi, opt.bins)];
    }
    for (std::size_t i = 0; i < out.rows(); ++i) {
      ++h.post[out.origin[i]][bin_of(out.features(i)[j], h.lo, h.hi, opt.bins)];
    }
  }
  return res;
}

std::string report_json(const Report& r) {
  using nlohmann::json;
  json j;
  j["reference_site"] = r.reference_site;
  j["mc_samples"] = r.mc_samples;
  j["max_sample_spread"] = r.max_sample_spread;
  j["rows_in"] = r.rows_in;
  j["rows_out"] = r.rows_out;
  j["site_counts"] = r.site_counts;
  json skipped = json::array();
  for (const auto& s : r.skipped) skipped.push_back({{"row", s.row}, {"subject_id", s.id}, {"error", s.error}});
  j["skipped"] = skipped;
  const auto mom = [](const Moments& m) {
    return json{{"count", m.count}, {"mean", m.mean}, {"variance", m.var}};
  };
  j["pre"] = mom(r.pre);
  j["post"] = mom(r.post);
  json hs = json::array();
  for (std::size_t f = 0; f < r.histograms.size(); ++f) {
    const auto& h = r.histograms[f];
    hs.push_back({{"feature", data::feature_name(f)}, {"lo", h.lo}, {"hi", h.hi}, {"pre", h.pre}, {"post", h.post}});
  }
  j["histograms"] = hs;
  return j.dump(1);
}

}  // namespace flowharm::harmonize
