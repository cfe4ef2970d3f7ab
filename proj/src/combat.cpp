#include "flowharm/combat.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "json.hpp"

namespace flowharm::combat {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

const char* column_name(std::size_t c, std::size_t sites) {
  if (c < sites) return "site";
  return c == sites ? "sex" : "age";
}

std::vector<std::vector<double>> rows_of(const Mat& m) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  }
  return out;
}

double sample_var(const Vec& v) {
  const double m = v.mean();
  return (v.array() - m).square().sum() / static_cast<double>(v.size() - 1);
}

}  // namespace

Params fit(const data::DataTable& t, const FitOptions& opt) {
  const std::size_t n = t.rows(), d = t.dim;
  const std::size_t K = t.site_count();
  if (n == 0) throw data::DataError("combat: empty table");
  const auto counts = t.rows_per_site(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (counts[k] < 2) {
      throw data::DataError("combat: site " + std::to_string(k) + " has " + std::to_string(counts[k]) +
                            " rows, at least 2 are required");
    }
  }
  const std::size_t p = K + 2;
  Mat D = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  Mat Y(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    D(r, static_cast<Eigen::Index>(t.site[i])) = 1.0;
    D(r, static_cast<Eigen::Index>(K)) = t.sex[i];
    D(r, static_cast<Eigen::Index>(K + 1)) = t.age[i];
    for (std::size_t j = 0; j < d; ++j) Y(r, static_cast<Eigen::Index>(j)) = t.features(i)[j];
  }
  for (std::size_t c = K; c < p; ++c) {
    const auto col = D.col(static_cast<Eigen::Index>(c));
    if (col.maxCoeff() == col.minCoeff()) {
      throw data::DataError(std::string("combat: covariate column '") + column_name(c, K) +
                            "' is constant, the design matrix is singular");
    }
  }
  // Column-wise rank growth pinpoints the first collinear covariate.
  for (std::size_t c = K; c < p; ++c) {
    Eigen::ColPivHouseholderQR<Mat> qr(D.leftCols(static_cast<Eigen::Index>(c + 1)));
    if (static_cast<std::size_t>(qr.rank()) < c + 1) {
      throw data::DataError(std::string("combat: covariate column '") + column_name(c, K) +
                            "' is collinear with the site indicators and earlier covariates");
    }
  }

  Params P;
  P.sites = K;
  P.dim = d;
  P.site_rows = counts;
  const Mat B = D.colPivHouseholderQr().solve(Y);  // [p][d]
  P.beta = rows_of(B);

  Vec grand = Vec::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t k = 0; k < K; ++k) {
    grand += (static_cast<double>(counts[k]) / static_cast<double>(n)) * B.row(static_cast<Eigen::Index>(k)).transpose();
  }
  const Mat resid = Y - D * B;
  const Vec var_pooled = resid.array().square().colwise().sum().transpose() / static_cast<double>(n);
  for (Eigen::Index j = 0; j < var_pooled.size(); ++j) {
    if (!(var_pooled(j) > 0.0)) {
      throw data::DataError("combat: feature " + data::feature_name(static_cast<std::size_t>(j)) +
                            " has zero residual variance");
    }
  }
  Mat stand_mean = D.rightCols(2) * B.bottomRows(2);
  stand_mean.rowwise() += grand.transpose();
  Mat S = (Y - stand_mean).array().rowwise() / var_pooled.transpose().array().sqrt();

  Mat gamma_hat = Mat::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(d));
  Mat delta_hat = Mat::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < n; ++i) gamma_hat.row(static_cast<Eigen::Index>(t.site[i])) += S.row(static_cast<Eigen::Index>(i));
  for (std::size_t k = 0; k < K; ++k) gamma_hat.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(counts[k]);
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<Eigen::Index>(t.site[i]);
    delta_hat.row(k) += (S.row(static_cast<Eigen::Index>(i)) - gamma_hat.row(k)).array().square().matrix();
  }
  for (std::size_t k = 0; k < K; ++k) delta_hat.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(counts[k] - 1);

  Mat gamma_star = gamma_hat, delta_star = delta_hat;
  P.gamma_bar.assign(K, 0.0);
  P.tau2.assign(K, 0.0);
  P.a_prior.assign(K, 0.0);
  P.b_prior.assign(K, 0.0);
  P.iterations.assign(K, 0);
  P.shrinkage = d >= 2;
  if (P.shrinkage) {
    for (std::size_t k = 0; k < K; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      const Vec gh = gamma_hat.row(kk).transpose(), dh = delta_hat.row(kk).transpose();
      const double gbar = gh.mean(), t2 = sample_var(gh);
      const double m = dh.mean(), s2 = sample_var(dh);
      const double a = (2.0 * s2 + m * m) / s2, b = (m * s2 + m * m * m) / s2;
      P.gamma_bar[k] = gbar;
      P.tau2[k] = t2;
      P.a_prior[k] = a;
      P.b_prior[k] = b;
      const double nk = static_cast<double>(counts[k]);
      Vec g_old = gh, d_old = dh;
      std::size_t it = 0;
      while (it < opt.max_iterations) {
        ++it;
        const Vec g_new = ((nk * t2) * gh.array() + d_old.array() * gbar) / (nk * t2 + d_old.array());
        Vec sum2 = Vec::Zero(static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < n; ++i) {
          if (t.site[i] != k) continue;
          sum2 += (S.row(static_cast<Eigen::Index>(i)).transpose() - g_new).array().square().matrix();
        }
        const Vec d_new = (0.5 * sum2.array() + b) / (nk / 2.0 + a - 1.0);
        double change = 0.0;
        for (Eigen::Index j = 0; j < g_new.size(); ++j) {
          change = std::max(change, std::abs(g_new(j) - g_old(j)) / std::max(std::abs(g_old(j)), 1e-12));
          change = std::max(change, std::abs(d_new(j) - d_old(j)) / std::max(std::abs(d_old(j)), 1e-12));
        }
        g_old = g_new;
        d_old = d_new;
        if (change < opt.tolerance) break;
      }
      P.iterations[k] = it;
      gamma_star.row(kk) = g_old.transpose();
      delta_star.row(kk) = d_old.transpose();
    }
  }
  for (Eigen::Index k = 0; k < delta_star.rows(); ++k) {
    for (Eigen::Index j = 0; j < delta_star.cols(); ++j) {
      if (!(delta_star(k, j) > 0.0) || !std::isfinite(delta_star(k, j))) {
        throw data::DataError("combat: non-positive scale estimate for site " + std::to_string(k) + ", feature " +
                              data::feature_name(static_cast<std::size_t>(j)));
      }
    }
  }
  P.grand_mean.assign(grand.data(), grand.data() + grand.size());
  P.var_pooled.assign(var_pooled.data(), var_pooled.data() + var_pooled.size());
  P.gamma_hat = rows_of(gamma_hat);
  P.delta_hat = rows_of(delta_hat);
  P.gamma_star = rows_of(gamma_star);
  P.delta_star = rows_of(delta_star);
  return P;
}

Applied apply(const Params& p, const data::DataTable& t) {
  if (t.dim != p.dim) {
    throw data::DataError("combat: table has " + std::to_string(t.dim) + " features, params expect " +
                          std::to_string(p.dim));
  }
  Applied out;
  out.table.dim = t.dim;
  out.table.reserve(t.rows());
  std::vector<double> f(t.dim);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const std::size_t k = t.site[i];
    if (k >= p.sites) {
      out.rejected_rows.push_back(i);
      out.errors.push_back("row " + std::to_string(i) + " (" + t.ids[i] + "): site " + std::to_string(k) +
                           " was not present when the parameters were fitted");
      continue;
    }
    const auto x = t.features(i);
    for (std::size_t j = 0; j < t.dim; ++j) {
      const double cov = p.grand_mean[j] + p.sex_effect(j) * t.sex[i] + p.age_effect(j) * t.age[i];
      const double sd = std::sqrt(p.var_pooled[j]);
      const double z = (x[j] - cov) / sd;
      f[j] = (z - p.gamma_star[k][j]) / std::sqrt(p.delta_star[k][j]) * sd + cov;
    }
    out.table.push_row(t.ids[i], t.sex[i], t.age[i], k, f);
    if (!t.origin.empty()) out.table.origin.push_back(t.origin[i]);
  }
  return out;
}

std::string to_json(const Params& p) {
  nlohmann::json j;
  j["format"] = "combat-params";
  j["version"] = 1;
  j["sites"] = p.sites;
  j["dim"] = p.dim;
  j["site_rows"] = p.site_rows;
  j["covariates"] = {"site indicators", "sex", "age"};
  j["beta"] = p.beta;
  j["grand_mean"] = p.grand_mean;
  j["var_pooled"] = p.var_pooled;
  j["gamma_hat"] = p.gamma_hat;
  j["delta_hat"] = p.delta_hat;
  j["gamma_star"] = p.gamma_star;
  j["delta_star"] = p.delta_star;
  j["gamma_bar"] = p.gamma_bar;
  j["tau2"] = p.tau2;
  j["a_prior"] = p.a_prior;
  j["b_prior"] = p.b_prior;
  j["iterations"] = p.iterations;
  j["shrinkage"] = p.shrinkage;
  return j.dump(1);
}

Params from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw data::DataError(std::string("combat params: ") + e.what());
  }
  if (j.value("format", "") != "combat-params") throw data::DataError("combat params: not a ComBat parameter file");
  if (j.value("version", 0) != 1) throw data::DataError("combat params: unsupported version");
  Params p;
  try {
    j.at("sites").get_to(p.sites);
    j.at("dim").get_to(p.dim);
    j.at("site_rows").get_to(p.site_rows);
    j.at("beta").get_to(p.beta);
    j.at("grand_mean").get_to(p.grand_mean);
    j.at("var_pooled").get_to(p.var_pooled);
    j.at("gamma_hat").get_to(p.gamma_hat);
    j.at("delta_hat").get_to(p.delta_hat);
    j.at("gamma_star").get_to(p.gamma_star);
    j.at("delta_star").get_to(p.delta_star);
    j.at("gamma_bar").get_to(p.gamma_bar);
    j.at("tau2").get_to(p.tau2);
    j.at("a_prior").get_to(p.a_prior);
    j.at("b_prior").get_to(p.b_prior);
    j.at("iterations").get_to(p.iterations);
    j.at("shrinkage").get_to(p.shrinkage);
  } catch (const nlohmann::json::exception& e) {
    throw data::DataError(std::string("combat params: ") + e.what());
  }
  const auto check = [&](const std::vector<std::vector<double>>& m, std::size_t r, const char* name) {
    if (m.size() != r) throw data::DataError(std::string("combat params: ") + name + " has the wrong shape");
    for (const auto& row : m) {
      if (row.size() != p.dim) throw data::DataError(std::string("combat params: ") + name + " has the wrong shape");
    }
  };
  check(p.beta, p.sites + 2, "beta");
  check(p.gamma_star, p.sites, "gamma_star");
  check(p.delta_star, p.sites, "delta_star");
  if (p.grand_mean.size() != p.dim || p.var_pooled.size() != p.dim) {
    throw data::DataError("combat params: grand_mean/var_pooled have the wrong length");
  }
  return p;
}

}  // namespace flowharm::combat
