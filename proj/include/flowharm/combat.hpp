#pragma once

#include <string>
#include <vector>

#include "flowharm/data.hpp"

namespace flowharm::combat {

/// Parametric empirical-Bayes location/scale adjustment with sex and age as
/// preserved covariates. Matrices are stored row-major as [site][feature].
struct Params {
  std::size_t sites = 0, dim = 0;
  std::vector<std::size_t> site_rows;         // [K]
  std::vector<std::vector<double>> beta;      // [K + 2][d]: site intercepts, sex, age
  std::vector<double> grand_mean;             // [d]
  std::vector<double> var_pooled;             // [d]
  std::vector<std::vector<double>> gamma_hat, delta_hat;    // [K][d]
  std::vector<std::vector<double>> gamma_star, delta_star;  // [K][d], delta is a variance
  std::vector<double> gamma_bar, tau2, a_prior, b_prior;    // [K]
  std::vector<std::size_t> iterations;        // [K]
  bool shrinkage = true;                      // false when d < 2 (no priors can be estimated)

  double sex_effect(std::size_t j) const { return beta[sites][j]; }
  double age_effect(std::size_t j) const { return beta[sites + 1][j]; }
};

struct FitOptions {
  double tolerance = 1e-6;
  std::size_t max_iterations = 100;
};

Params fit(const data::DataTable& t, const FitOptions& opt = {});

struct Applied {
  data::DataTable table;  // adjusted rows in input order; the site column is kept
  std::vector<std::size_t> rejected_rows;
  std::vector<std::string> errors;
};

// Rows from sites unknown to the params are left out and reported.
Applied apply(const Params& p, const data::DataTable& t);

std::string to_json(const Params& p);
Params from_json(const std::string& text);

}  // namespace flowharm::combat
