#include "flowharm/synth.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <stdexcept>

#include "flowharm/binio.hpp"
#include "json.hpp"

namespace flowharm::synth {

using nlohmann::json;

namespace {

constexpr char kNoiseMagic[5] = {'C', 'F', 'N', 'O', 'I'};
constexpr std::uint32_t kNoiseVersion = 1;
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("generator spec: " + msg);
}

std::vector<double> filled(std::size_t n, double v) { return std::vector<double>(n, v); }

std::vector<double> linspace(double a, double b, std::size_t n) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = n == 1 ? a : a + (b - a) * static_cast<double>(i) / (n - 1);
  return v;
}

// Smooth per-feature pattern in [lo, hi].
std::vector<double> wave(std::size_t d, double lo, double hi, double phase) {
  std::vector<double> v(d);
  for (std::size_t j = 0; j < d; ++j) v[j] = lo + (hi - lo) * 0.5 * (1.0 + std::cos(0.7 * j + phase));
  return v;
}

GeneratorSpec base(const std::string& name, std::size_t k, std::size_t d) {
  GeneratorSpec s;
  s.name = name;
  s.sites = k;
  s.dim = d;
  s.site_probs = filled(k, 1.0 / k);
  s.mu = filled(k * d, 0.0);
  s.log_scale = filled(k * d, 0.0);
  s.beta_s = filled(d, 0.0);
  s.beta_a = filled(d, 0.0);
  s.beta_y = filled(d, 0.0);
  return s;
}

void set_site_row(GeneratorSpec& s, std::vector<double>& field, std::size_t t, const std::vector<double>& row) {
  std::copy(row.begin(), row.end(), field.begin() + static_cast<std::ptrdiff_t>(t * s.dim));
}

std::vector<double> normalized(std::vector<double> w) {
  double sum = 0.0;
  for (double v : w) sum += v;
  for (double& v : w) v /= sum;
  return w;
}

}  // namespace

void GeneratorSpec::validate() const {
  require(sites >= 1, "sites must be positive");
  require(dim >= 1, "dim must be positive");
  require(site_probs.size() == sites, "site_probs must have K entries");
  double sum = 0.0;
  for (double p : site_probs) {
    require(p > 0.0, "site probabilities must be positive");
    sum += p;
  }
  require(std::abs(sum - 1.0) < 1e-9, "site probabilities must sum to 1");
  require(mu.size() == sites * dim && log_scale.size() == sites * dim, "mu/log_scale must be K x d");
  require(beta_s.size() == dim && beta_a.size() == dim && beta_y.size() == dim, "loadings must have d entries");
  require(prevalence >= 0.0 && prevalence < 1.0, "prevalence must be in [0, 1)");
  require(!warp || warp_scale > 0.0, "warp scale must be positive");
  require(age_std > 0.0 && age_min < age_max, "invalid age distribution");
  require(norm_cdf((age_max - age_mean) / age_std) - norm_cdf((age_min - age_mean) / age_std) > 1e-6,
          "age truncation window has negligible mass");
  require(sex_prob > 0.0 && sex_prob < 1.0, "sex probability must be in (0, 1)");
}

double GeneratorSpec::scale_at(std::size_t t, std::size_t j) const { return std::exp(log_scale[t * dim + j]); }

std::vector<std::string> preset_names() {
  return {"null", "two-site-shift", "conditional-gaussian", "location-scale", "heteroskedastic", "combat-hostile",
          "istaging", "adni"};
}

GeneratorSpec preset(const std::string& name, std::uint64_t seed) {
  GeneratorSpec s;
  if (name == "null") {
    s = base(name, 2, 16);
  } else if (name == "two-site-shift") {
    s = base(name, 2, 16);
    set_site_row(s, s.mu, 1, filled(16, 1.5));
    s.beta_s = filled(16, 0.3);
    s.beta_a = linspace(0.2, 0.8, 16);
  } else if (name == "conditional-gaussian") {
    s = base(name, 2, 16);
    set_site_row(s, s.mu, 1, filled(16, 2.0));
    s.log_scale = filled(2 * 16, std::log(0.5));
    s.beta_s = filled(16, 0.3);
    s.beta_a = filled(16, 0.5);
  } else if (name == "location-scale") {
    s = base(name, 3, 16);
    s.site_probs = {0.3, 0.3, 0.4};
    set_site_row(s, s.mu, 1, wave(16, 0.4, 1.2, 0.0));
    set_site_row(s, s.mu, 2, wave(16, -1.0, -0.3, 1.3));
    set_site_row(s, s.log_scale, 1, filled(16, std::log(1.5)));
    set_site_row(s, s.log_scale, 2, filled(16, std::log(0.7)));
    s.beta_s = filled(16, 0.5);
    s.beta_a = filled(16, 0.4);
  } else if (name == "heteroskedastic") {
    s = base(name, 3, 16);
    s.site_probs = {0.3, 0.3, 0.4};
    set_site_row(s, s.mu, 1, wave(16, 0.3, 1.0, 0.5));
    set_site_row(s, s.mu, 2, wave(16, -0.9, -0.2, 2.0));
    set_site_row(s, s.log_scale, 0, wave(16, std::log(0.35), std::log(0.6), 0.0));
    set_site_row(s, s.log_scale, 1, wave(16, std::log(0.6), std::log(0.9), 1.0));
    set_site_row(s, s.log_scale, 2, wave(16, std::log(0.25), std::log(0.45), 2.0));
    s.beta_s = filled(16, 0.3);
    s.beta_a = filled(16, 0.4);
    s.beta_y = filled(16, 1.6);
    s.prevalence = 0.5;
    s.warp = true;
    s.warp_scale = 1.5;
  } else if (name == "combat-hostile") {
    s = base(name, 2, 16);
    set_site_row(s, s.mu, 1, filled(16, 2.0));
    s.beta_s = filled(16, 0.3);
    s.beta_a = filled(16, 0.3);
    for (std::size_t j = 0; j < 8; ++j) s.beta_y[j] = 1.5;
    s.prevalence = 0.4;
    s.warp = true;
    s.warp_scale = 1.5;
  } else if (name == "istaging") {
    const std::size_t d = 145;
    s = base(name, 4, d);
    s.site_probs = normalized({157, 960, 2202, 2739});
    set_site_row(s, s.mu, 1, wave(d, 0.5, 1.5, 0.0));
    set_site_row(s, s.mu, 2, wave(d, -1.2, -0.2, 1.0));
    set_site_row(s, s.mu, 3, wave(d, -0.4, 0.8, 2.5));
    set_site_row(s, s.log_scale, 1, filled(d, std::log(1.3)));
    set_site_row(s, s.log_scale, 3, filled(d, std::log(0.8)));
    s.beta_s = wave(d, 0.1, 0.5, 0.3);
    s.beta_a = wave(d, -0.8, -0.2, 0.9);
    s.age_mean = 62.0;
    s.age_std = 14.0;
    s.age_min = 22.0;
    s.age_max = 95.0;
  } else if (name == "adni") {
    const std::size_t d = 145;
    s = base(name, 2, d);
    s.site_probs = normalized({229 + 193, 294 + 147});
    set_site_row(s, s.mu, 1, wave(d, 0.8, 1.6, 0.7));
    set_site_row(s, s.log_scale, 1, filled(d, std::log(1.2)));
    s.beta_s = wave(d, 0.1, 0.4, 0.0);
    s.beta_a = wave(d, -0.6, -0.1, 1.1);
    for (std::size_t j = 0; j < d; j += 2) s.beta_y[j] = -0.8;
    s.prevalence = (193.0 + 147.0) / (229.0 + 193.0 + 294.0 + 147.0);
    s.age_mean = 75.0;
    s.age_std = 7.0;
    s.age_min = 55.0;
    s.age_max = 92.0;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown preset '" + name + "' (known: " + known + ")");
  }
  s.seed = seed;
  s.validate();
  return s;
}

double standardized_age(const GeneratorSpec& spec, double age) { return (age - spec.age_mean) / spec.age_std; }

std::vector<double> structural_features(const GeneratorSpec& spec, int sex, double age, std::size_t site, int disease,
                                        std::span<const double> eps) {
  if (site >= spec.sites) throw std::invalid_argument("site " + std::to_string(site) + " out of range");
  const double at = standardized_age(spec, age);
  std::vector<double> x(spec.dim);
  for (std::size_t j = 0; j < spec.dim; ++j) {
    const double u = spec.mu_at(site, j) + spec.beta_s[j] * sex + spec.beta_a[j] * at + spec.beta_y[j] * disease +
                     spec.scale_at(site, j) * eps[j];
    x[j] = spec.warp ? spec.warp_scale * std::tanh(u / spec.warp_scale) : u;
  }
  return x;
}

Generated generate(const GeneratorSpec& spec, std::size_t n) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution sex(spec.sex_prob), dis(spec.prevalence);
  std::discrete_distribution<std::size_t> site(spec.site_probs.begin(), spec.site_probs.end());
  std::normal_distribution<double> age(spec.age_mean, spec.age_std), gauss(0.0, 1.0);

  Generated g;
  g.spec = spec;
  g.table.dim = spec.dim;
  g.table.reserve(n);
  g.disease.reserve(n);
  g.noise.reserve(n * spec.dim);
  std::vector<double> eps(spec.dim);
  char id[32];
  for (std::size_t i = 0; i < n; ++i) {
    const int s = sex(rng) ? 1 : 0;
    const std::size_t t = site(rng);
    double a;
    do {
      a = age(rng);
    } while (a < spec.age_min || a > spec.age_max);
    const int y = spec.prevalence > 0.0 && dis(rng) ? 1 : 0;
    for (auto& e : eps) e = gauss(rng);
    std::snprintf(id, sizeof id, "sub-%06zu", i + 1);
    g.table.push_row(id, s, a, t, structural_features(spec, s, a, t, y, eps));
    g.disease.push_back(y);
    g.noise.insert(g.noise.end(), eps.begin(), eps.end());
  }
  return g;
}

std::vector<double> oracle_counterfactual(const Generated& g, std::size_t row, std::size_t tau) {
  if (tau >= g.spec.sites) {
    throw std::invalid_argument("oracle: site " + std::to_string(tau) + " >= K=" + std::to_string(g.spec.sites));
  }
  const std::span<const double> eps(g.noise.data() + row * g.spec.dim, g.spec.dim);
  return structural_features(g.spec, g.table.sex[row], g.table.age[row], tau, g.disease[row], eps);
}

data::DataTable oracle_table(const Generated& g, std::size_t tau) {
  data::DataTable out = g.table;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const auto x = oracle_counterfactual(g, i, tau);
    std::copy(x.begin(), x.end(), out.features(i).begin());
  }
  return out;
}

std::vector<double> analytic_log_likelihood(const GeneratorSpec& spec, const data::DataTable& t) {
  spec.validate();
  const double age_mass = norm_cdf((spec.age_max - spec.age_mean) / spec.age_std) -
                          norm_cdf((spec.age_min - spec.age_mean) / spec.age_std);
  std::vector<double> out(t.rows());
  const std::size_t d = spec.dim;
  std::vector<double> u(d);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const std::size_t site = t.site[i];
    if (site >= spec.sites) throw std::invalid_argument("row " + std::to_string(i) + ": unknown site");
    double lp = t.sex[i] ? std::log(spec.sex_prob) : std::log1p(-spec.sex_prob);
    lp += std::log(spec.site_probs[site]);
    const double z = (t.age[i] - spec.age_mean) / spec.age_std;
    lp += -0.5 * z * z - 0.5 * kLog2Pi - std::log(spec.age_std) - std::log(age_mass);

    const auto x = t.features(i);
    double jac = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (spec.warp) {
        const double r = x[j] / spec.warp_scale;
        if (std::abs(r) >= 1.0) throw std::domain_error("row " + std::to_string(i) + ": feature outside warp range");
        u[j] = spec.warp_scale * std::atanh(r);
        jac -= std::log1p(-r * r);
      } else {
        u[j] = x[j];
      }
    }
    const double at = standardized_age(spec, t.age[i]);
    double terms[2];
    const int ny = spec.prevalence > 0.0 ? 2 : 1;
    for (int y = 0; y < ny; ++y) {
      double l = ny == 1 ? 0.0 : std::log(y ? spec.prevalence : 1.0 - spec.prevalence);
      for (std::size_t j = 0; j < d; ++j) {
        const double m = spec.mu_at(site, j) + spec.beta_s[j] * t.sex[i] + spec.beta_a[j] * at + spec.beta_y[j] * y;
        const double ls = spec.log_scale[site * d + j];
        const double e = (u[j] - m) / std::exp(ls);
        l += -0.5 * e * e - 0.5 * kLog2Pi - ls;
      }
      terms[y] = l;
    }
    const double mx = ny == 1 ? terms[0] : std::max(terms[0], terms[1]);
    double mix = 0.0;
    for (int y = 0; y < ny; ++y) mix += std::exp(terms[y] - mx);
    out[i] = lp + mx + std::log(mix) + jac;
  }
  return out;
}

std::vector<double> conditional_mean(const GeneratorSpec& spec, int sex, double age, std::size_t site) {
  if (spec.warp) throw std::invalid_argument("conditional_mean: only defined in closed form without warp");
  const double at = standardized_age(spec, age);
  std::vector<double> m(spec.dim);
  for (std::size_t j = 0; j < spec.dim; ++j) {
    m[j] = spec.mu_at(site, j) + spec.beta_s[j] * sex + spec.beta_a[j] * at + spec.beta_y[j] * spec.prevalence;
  }
  return m;
}

std::string spec_to_json(const GeneratorSpec& s) {
  json j;
  j["name"] = s.name;
  j["sites"] = s.sites;
  j["dim"] = s.dim;
  j["site_probs"] = s.site_probs;
  j["mu"] = s.mu;
  j["log_scale"] = s.log_scale;
  j["beta_s"] = s.beta_s;
  j["beta_a"] = s.beta_a;
  j["beta_y"] = s.beta_y;
  j["prevalence"] = s.prevalence;
  j["warp"] = s.warp;
  j["warp_scale"] = s.warp_scale;
  j["age"] = {{"mean", s.age_mean}, {"std", s.age_std}, {"min", s.age_min}, {"max", s.age_max}};
  j["sex_prob"] = s.sex_prob;
  j["seed"] = s.seed;
  return j.dump();
}

GeneratorSpec spec_from_json(const std::string& text) {
  const json j = json::parse(text);
  GeneratorSpec s;
  s.name = j.at("name").get<std::string>();
  s.sites = j.at("sites").get<std::size_t>();
  s.dim = j.at("dim").get<std::size_t>();
  s.site_probs = j.at("site_probs").get<std::vector<double>>();
  s.mu = j.at("mu").get<std::vector<double>>();
  s.log_scale = j.at("log_scale").get<std::vector<double>>();
  s.beta_s = j.at("beta_s").get<std::vector<double>>();
  s.beta_a = j.at("beta_a").get<std::vector<double>>();
  s.beta_y = j.at("beta_y").get<std::vector<double>>();
  s.prevalence = j.at("prevalence").get<double>();
  s.warp = j.at("warp").get<bool>();
  s.warp_scale = j.at("warp_scale").get<double>();
  s.age_mean = j.at("age").at("mean").get<double>();
  s.age_std = j.at("age").at("std").get<double>();
  s.age_min = j.at("age").at("min").get<double>();
  s.age_max = j.at("age").at("max").get<double>();
  s.sex_prob = j.at("sex_prob").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.validate();
  return s;
}

void write_noise(const std::string& path, const Generated& g) {
  binio::Writer w;
  w.bytes(kNoiseMagic, sizeof kNoiseMagic);
  w.put<std::uint32_t>(kNoiseVersion);
  w.str(spec_to_json(g.spec));
  w.put<std::uint64_t>(g.table.rows());
  for (std::size_t i = 0; i < g.table.rows(); ++i) {
    w.str(g.table.ids[i]);
    w.put<std::int32_t>(g.disease[i]);
    w.bytes(g.noise.data() + i * g.spec.dim, g.spec.dim * sizeof(double));
  }
  w.seal();
  binio::write_file(path, w.buffer());
}

Generated read_noise(const std::string& path, const data::DataTable& table) {
  const auto buf = binio::read_file(path);
  char magic[sizeof kNoiseMagic];
  if (buf.size() < sizeof magic + 4 || std::memcmp(buf.data(), kNoiseMagic, sizeof magic) != 0) {
    throw data::DataError(path + ": not a noise sidecar (bad magic)");
  }
  binio::Reader r(buf.data(), buf.size(), path);
  r.bytes(magic, sizeof magic);
  const auto version = r.get<std::uint32_t>();
  if (version != kNoiseVersion) {
    throw data::DataError(path + ": unsupported noise sidecar version " + std::to_string(version));
  }
  const std::size_t body = binio::verify_sealed(buf, path);
  binio::Reader b(buf.data(), body, path);
  b.bytes(magic, sizeof magic);
  (void)b.get<std::uint32_t>();
  Generated g;
  g.spec = spec_from_json(b.str());
  const auto n = b.get<std::uint64_t>();
  if (n != table.rows() || table.dim != g.spec.dim) {
    throw data::DataError(path + ": sidecar does not match the table (" + std::to_string(n) + " rows vs " +
                          std::to_string(table.rows()) + ")");
  }
  g.table = table;
  g.disease.resize(n);
  g.noise.resize(n * g.spec.dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = b.str();
    if (id != table.ids[i]) throw data::DataError(path + ": row " + std::to_string(i) + " id mismatch (" + id + ")");
    g.disease[i] = b.get<std::int32_t>();
    b.bytes(g.noise.data() + i * g.spec.dim, g.spec.dim * sizeof(double));
  }
  if (b.remaining() != 0) throw data::DataError(path + ": trailing bytes in sidecar");
  return g;
}

}  // namespace flowharm::synth
