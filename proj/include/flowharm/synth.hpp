#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowharm/data.hpp"

namespace flowharm::synth {

/// Ground-truth generator:
///   s ~ Ber(sex_prob), t ~ Cat(site_probs), a ~ TruncNormal, y ~ Ber(prevalence)
///   u = mu_t + beta_s s + beta_a a~ + beta_y y + exp(lambda_t) * eps,  eps ~ N(0, I)
///   x = warp ? c tanh(u / c) : u
/// with a~ = (a - age_mean) / age_std. y is independent of t.
struct GeneratorSpec {
  std::string name = "custom";
  std::size_t sites = 2;
  std::size_t dim = 16;
  std::vector<double> site_probs;  // [K]
  std::vector<double> mu;          // [K * d]
  std::vector<double> log_scale;   // [K * d]
  std::vector<double> beta_s, beta_a, beta_y;  // [d]
  double prevalence = 0.0;
  bool warp = false;
  double warp_scale = 1.5;
  double age_mean = 65.0, age_std = 10.0, age_min = 40.0, age_max = 90.0;
  double sex_prob = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  double mu_at(std::size_t t, std::size_t j) const { return mu[t * dim + j]; }
  double scale_at(std::size_t t, std::size_t j) const;
};

std::vector<std::string> preset_names();
// Named preset with its default dimension (16, or 145 for the cohort-shaped ones).
GeneratorSpec preset(const std::string& name, std::uint64_t seed);

struct Generated {
  GeneratorSpec spec;
  data::DataTable table;
  std::vector<int> disease;    // [n]
  std::vector<double> noise;   // [n * d]
};

Generated generate(const GeneratorSpec& spec, std::size_t n);

double standardized_age(const GeneratorSpec& spec, double age);

// Feature vector of one row from its exogenous values.
std::vector<double> structural_features(const GeneratorSpec& spec, int sex, double age, std::size_t site, int disease,
                                        std::span<const double> eps);

// Features of row i recomputed with site := tau, holding (s, a, y, eps) fixed.
std::vector<double> oracle_counterfactual(const Generated& g, std::size_t row, std::size_t tau);
// Whole table under do(t := tau); ids, sex, age and the site column are kept.
data::DataTable oracle_table(const Generated& g, std::size_t tau);

// Per-row analytic log p(s) + log p(a) + log p(t) + log p(x | s, a, t).
std::vector<double> analytic_log_likelihood(const GeneratorSpec& spec, const data::DataTable& t);

// E[x | s, a, t] for specs without warp (mixture over y included).
std::vector<double> conditional_mean(const GeneratorSpec& spec, int sex, double age, std::size_t site);

// Noise sidecar: "CFNOI", u32 version, JSON spec header, rows of (y, eps[d]),
// trailing checksum.
void write_noise(const std::string& path, const Generated& g);
Generated read_noise(const std::string& path, const data::DataTable& table);

std::string spec_to_json(const GeneratorSpec& spec);
GeneratorSpec spec_from_json(const std::string& text);

}  // namespace flowharm::synth
