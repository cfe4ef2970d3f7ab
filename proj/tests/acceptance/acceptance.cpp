// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status is nonzero if any criterion fails.
//
//   flowharm_acceptance --cli <path to flowharm> --work <scratch dir>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flow_cases.hpp"
#include "flowharm/binio.hpp"
#include "flowharm/combat.hpp"
#include "flowharm/data.hpp"
#include "flowharm/probe.hpp"
#include "flowharm/scm.hpp"
#include "flowharm/synth.hpp"
#include "gradcheck.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace flowharm;
using nlohmann::json;

namespace {

// Tolerances and limits.
constexpr double kRoundTrip = 1e-6;
constexpr double kAntisymmetry = 1e-9;
constexpr double kJacobianRel = 1e-4;
constexpr double kGradRel = 1e-4;
constexpr double kSiteMeanTol = 0.05;
constexpr double kLikelihoodGap = 0.1;
constexpr double kNullIntervention = 1e-5;
constexpr double kCounterfactualMad = 0.1;
constexpr double kSplineAffineGap = 0.5;
constexpr double kMaeImprovement = 0.20;
constexpr double kTarOnlyBand = 0.15;
constexpr double kAccuracyMargin = 0.03;
constexpr std::size_t kSignFolds = 4;
constexpr double kCombatMeanTol = 0.05;
constexpr double kCombatVarRatio = 0.10;
constexpr double kCovariateTol = 0.1;

// Experiment sizes. Flow models in criteria 5 and 6 are fitted with a larger
// initial learning rate than the library default (see README).
constexpr std::size_t kMleRows = 5000, kHeldRows = 5000;
constexpr std::size_t kDensityRows = 5000;
constexpr std::size_t kTaskRows = 4000;
constexpr std::size_t kCombatRows = 6000;
constexpr double kFlowLr = 3e-3;

struct Outcome {
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
  double limit = 0.0;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  return out + "'";
}

struct Env {
  std::string cli;
  fs::path work;
  std::vector<std::string> model_files;  // every model fitted during the run
};

int run_cli(const Env& env, const std::vector<std::string>& args, const std::string& log) {
  std::string cmd = shell_quote(env.cli);
  for (const auto& a : args) cmd += " " + shell_quote(a);
  cmd += " >> " + shell_quote((env.work / log).string()) + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

void require_cli(const Env& env, const std::vector<std::string>& args, const std::string& log) {
  const int rc = run_cli(env, args, log);
  if (rc != 0) {
    std::string cmd;
    for (const auto& a : args) cmd += a + " ";
    throw std::runtime_error("flowharm " + cmd + "exited with " + std::to_string(rc) + " (see " +
                             (env.work / log).string() + ")");
  }
}

std::string p(const Env& env, const std::string& name) { return (env.work / name).string(); }

// ---- criterion 1 ------------------------------------------------------------------

Outcome flow_suite() {
  Outcome o;
  std::mt19937_64 rng(101);
  double worst_rt = 0.0, worst_anti = 0.0, worst_fd = 0.0, worst_upper = 0.0;
  bool probes = true;
  std::string where;
  const std::size_t c = 4, n = 1000;
  for (std::size_t d : {2u, 4u, 8u, 16u}) {
    for (auto& k : flowcases::all_kinds(d, c, rng)) {
      const auto eps = flowcases::randn(n, d, rng, 2.0);
      const auto ctx = flowcases::randn(n, c, rng);
      const auto ctx_used = k.flow->context_dim() ? ctx : flows::no_context(n);
      const auto fwd = k.flow->forward(eps, ctx_used);
      const auto inv = k.flow->inverse(fwd.value, ctx_used);
      const double rt = flowcases::max_abs_diff(inv.value, eps);
      double anti = 0.0;
      for (std::size_t i = 0; i < n; ++i) anti = std::max(anti, std::abs(fwd.logdet[i] + inv.logdet[i]));
      if (rt > worst_rt || anti > worst_anti) where = k.name + " d=" + std::to_string(d);
      worst_rt = std::max(worst_rt, rt);
      worst_anti = std::max(worst_anti, anti);
      for (std::size_t t = 0; t < 5; ++t) {
        const std::vector<double> e(eps.data().begin() + static_cast<std::ptrdiff_t>(t * d),
                                    eps.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
        std::vector<double> cv;
        if (k.flow->context_dim()) cv.assign(ctx.data().begin() + static_cast<std::ptrdiff_t>(t * c),
                                            ctx.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * c));
        const auto rep = flows::jacobian_probe_report(*k.flow, e, cv);
        worst_fd = std::max(worst_fd, rep.logdet_error);
        worst_upper = std::max(worst_upper, rep.max_upper);
        if (!rep.passed) {
          probes = false;
          where = k.name + " d=" + std::to_string(d) + " probe";
        }
      }
    }
  }
  o.pass = worst_rt < kRoundTrip && worst_anti < kAntisymmetry && worst_fd < kJacobianRel && probes;
  o.detail = "round-trip " + fmt(worst_rt) + " (< 1e-6), antisymmetry " + fmt(worst_anti) +
             " (< 1e-9), FD logdet rel " + fmt(worst_fd) + " (< 1e-4), max upper-triangle " + fmt(worst_upper) +
             ", probes " + (probes ? "pass" : "fail") + "; worst case " + where;
  return o;
}

// ---- criterion 2 ------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  const auto r = gradcheck::run_suite(987654321, 100);
  o.pass = r.passed && r.worst_rel < kGradRel;
  o.detail = "100 random graphs, " + std::to_string(r.entries) + " gradient entries, worst |analytic - FD| " +
             fmt(r.worst_abs) + ", worst relative " + fmt(r.worst_rel_any) +
             "; every entry within 1e-4 relative or 1e-6 absolute";
  if (!r.passed) o.detail += "; " + r.detail;
  return o;
}

// ---- criterion 3 ------------------------------------------------------------------

struct MleState {
  synth::Generated train, held;
  std::optional<scm::ScmModel> model;
};

Outcome mle_recovery(MleState& st) {
  Outcome o;
  const auto spec = synth::preset("conditional-gaussian", 31);
  st.train = synth::generate(spec, kMleRows);
  auto hspec = spec;
  hspec.seed = 32;
  st.held = synth::generate(hspec, kHeldRows);
  scm::ScmSpec ss{.sites = spec.sites, .dim = spec.dim, .flow = scm::XFlowKind::Affine};
  scm::TrainConfig cfg;
  cfg.seed = 33;
  st.model = scm::ScmModel::fit(st.train.table, ss, cfg);
  const auto& m = *st.model;

  double worst = 0.0;
  const auto& t = st.train.table;
  for (std::size_t k = 0; k < spec.sites; ++k) {
    std::vector<double> fitted(spec.dim, 0.0), truth(spec.dim, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < t.rows(); ++i) {
      if (t.site[i] != k) continue;
      ++count;
      const auto a = m.affine_conditional_mean(t.sex[i], t.age[i], k);
      const auto b = synth::conditional_mean(spec, t.sex[i], t.age[i], k);
      for (std::size_t j = 0; j < spec.dim; ++j) {
        fitted[j] += a[j];
        truth[j] += b[j];
      }
    }
    for (std::size_t j = 0; j < spec.dim; ++j) worst = std::max(worst, std::abs(fitted[j] - truth[j]) / count);
  }
  const double model_ll = m.log_likelihood(st.held.table).mean;
  const auto an = synth::analytic_log_likelihood(spec, st.held.table);
  double analytic = 0.0;
  for (double v : an) analytic += v;
  analytic /= static_cast<double>(an.size());
  const double gap = std::abs(analytic - model_ll);
  o.pass = worst < kSiteMeanTol && gap < kLikelihoodGap;
  o.detail = "worst per-site mean error " + fmt(worst) + " (< 0.05); held-out log-likelihood " + fmt(model_ll, 6) +
             " vs analytic " + fmt(analytic, 6) + ", gap " + fmt(gap) + " nats/row (< 0.1)";
  return o;
}

// ---- criterion 4 ------------------------------------------------------------------

double null_intervention_error(const scm::ScmModel& m, const data::DataTable& t) {
  double worst = 0.0;
  for (std::size_t k = 0; k < m.spec().sites; ++k) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < t.rows(); ++i) {
      if (t.site[i] == k) rows.push_back(i);
    }
    if (rows.empty()) continue;
    const auto sub = t.subset(rows);
    const auto cf = m.counterfactual_batch(sub, {.target = "t", .value = k});
    if (!cf.failed_rows.empty()) return INFINITY;
    for (std::size_t i = 0; i < sub.x.size(); ++i) worst = std::max(worst, std::abs(cf.table.x[i] - sub.x[i]));
  }
  return worst;
}

Outcome counterfactual_soundness(const MleState& st, const Env& env) {
  Outcome o;
  double worst_null = 0.0;
  std::size_t models = 0;
  worst_null = std::max(worst_null, null_intervention_error(*st.model, st.held.table));
  ++models;
  for (const auto& f : env.model_files) {
    const auto m = scm::ScmModel::load(f);
    const auto data = m.spec().dim == st.held.table.dim && m.spec().sites == st.held.table.site_count()
                          ? m.sample_observational(2000, 5)
                          : m.sample_observational(2000, 5);
    worst_null = std::max(worst_null, null_intervention_error(m, data));
    ++models;
  }
  // Analytic oracle on held-out rows, every row sent to every other site.
  double mad = 0.0;
  std::size_t cnt = 0;
  const auto& h = st.held;
  for (std::size_t tau = 0; tau < h.spec.sites; ++tau) {
    const auto cf = st.model->counterfactual_batch(h.table, {.target = "t", .value = tau});
    const auto orc = synth::oracle_table(h, tau);
    for (std::size_t i = 0; i < cf.table.rows(); ++i) {
      if (h.table.site[cf.kept_rows[i]] == tau) continue;
      const auto a = cf.table.features(i);
      const auto b = orc.features(cf.kept_rows[i]);
      for (std::size_t j = 0; j < a.size(); ++j) mad += std::abs(a[j] - b[j]);
      cnt += a.size();
    }
  }
  mad /= static_cast<double>(std::max<std::size_t>(cnt, 1));
  o.pass = worst_null < kNullIntervention && mad < kCounterfactualMad && cnt > 0;
  o.detail = "null intervention max error " + fmt(worst_null) + " over " + std::to_string(models) +
             " fitted models (< 1e-5); counterfactual MAD vs analytic oracle " + fmt(mad) + " (< 0.1)";
  return o;
}

// ---- criterion 5 ------------------------------------------------------------------

Outcome density_ordering(Env& env) {
  Outcome o;
  require_cli(env, {"synth", "--preset", "heteroskedastic", "--n", std::to_string(kDensityRows), "--seed", "51",
                    "--out", p(env, "c5_train.csv")},
              "c5.log");
  require_cli(env, {"synth", "--preset", "heteroskedastic", "--n", std::to_string(kHeldRows), "--seed", "52", "--out",
                    p(env, "c5_held.csv")},
              "c5.log");
  std::vector<std::string> models;
  for (const char* kind : {"affine", "lspline", "qspline"}) {
    const std::string out = p(env, std::string("c5_") + kind + ".cfscm");
    require_cli(env, {"fit-scm", "--flow", kind, "--data", p(env, "c5_train.csv"), "--out", out, "--seed", "53",
                      "--lr", fmt(kFlowLr), "--threads", "1"},
                "c5.log");
    models.push_back(out);
    env.model_files.push_back(out);
  }
  require_cli(env, {"density-report", "--models", models[0] + "," + models[1] + "," + models[2], "--data",
                    p(env, "c5_held.csv"), "--out", p(env, "c5_density.json"), "--threads", "1"},
              "c5.log");
  const auto j = json::parse(std::ifstream(p(env, "c5_density.json")));
  const double a = j["models"][0]["mean_log_likelihood"], l = j["models"][1]["mean_log_likelihood"],
               q = j["models"][2]["mean_log_likelihood"];
  const double gap = std::min(l, q) - a;
  o.pass = q >= l && l >= a && gap > kSplineAffineGap;
  o.detail = "held-out mean log-likelihood affine " + fmt(a, 6) + ", lspline " + fmt(l, 6) + ", qspline " + fmt(q, 6) +
             "; need qspline >= lspline >= affine and spline - affine > 0.5 (gap " + fmt(gap) + ")";
  return o;
}

// ---- criterion 6 ------------------------------------------------------------------

struct Summary {
  double mean = 0.0;
  std::vector<double> folds;
};

Summary pick(const json& rep, const std::string& variant, const std::string& mode, const std::string& role) {
  Summary s;
  for (const auto& c : rep["cells"]) {
    if (c["variant"] == variant && c["mode"] == mode && c["role"] == role) s.folds.push_back(c["metric"]);
  }
  for (double v : s.folds) s.mean += v;
  if (!s.folds.empty()) s.mean /= static_cast<double>(s.folds.size());
  return s;
}

Outcome harmonization_benefit(Env& env) {
  Outcome o;
  // Age regression on the strong two-site shift.
  const std::string reg = p(env, "c6_reg.csv"), reg_model = p(env, "c6_reg_qspline.cfscm");
  require_cli(env, {"synth", "--preset", "two-site-shift", "--n", std::to_string(kTaskRows), "--seed", "61", "--out", reg},
              "c6.log");
  require_cli(env, {"fit-scm", "--flow", "qspline", "--data", reg, "--out", reg_model, "--seed", "62", "--lr",
                    fmt(kFlowLr), "--threads", "1"},
              "c6.log");
  env.model_files.push_back(reg_model);
  require_cli(env, {"harmonize", "--model", reg_model, "--data", reg, "--ref-site", "0", "--out",
                    p(env, "c6_reg_harm.csv"), "--threads", "1"},
              "c6.log");
  require_cli(env, {"eval", "--task", "age-regression", "--data", reg, "--variant", "raw=" + reg, "--variant",
                    "scm-qspline=" + p(env, "c6_reg_harm.csv"), "--source", "0", "--target", "1", "--seed", "63",
                    "--out", p(env, "c6_reg_eval.csv"), "--threads", "1"},
              "c6.log");
  const auto rj = json::parse(std::ifstream(p(env, "c6_reg_eval.json")));
  const auto raw = pick(rj, "raw", "SrcOnly", "Target"), q = pick(rj, "scm-qspline", "SrcOnly", "Target"),
             tar = pick(rj, "raw", "TarOnly", "Target");
  const double improvement = 1.0 - q.mean / raw.mean;
  const double band = q.mean / tar.mean - 1.0;
  std::size_t reg_sign = 0;
  for (std::size_t f = 0; f < q.folds.size() && f < raw.folds.size(); ++f) reg_sign += q.folds[f] < raw.folds[f];

  // Disease classification on the ComBat-hostile preset.
  const std::string cls = p(env, "c6_cls.csv"), cls_model = p(env, "c6_cls_qspline.cfscm");
  require_cli(env, {"synth", "--preset", "combat-hostile", "--n", std::to_string(kTaskRows), "--seed", "64", "--out", cls},
              "c6.log");
  require_cli(env, {"fit-scm", "--flow", "qspline", "--data", cls, "--out", cls_model, "--seed", "65", "--lr",
                    fmt(kFlowLr), "--threads", "1"},
              "c6.log");
  env.model_files.push_back(cls_model);
  require_cli(env, {"harmonize", "--model", cls_model, "--data", cls, "--ref-site", "0", "--out",
                    p(env, "c6_cls_harm.csv"), "--threads", "1"},
              "c6.log");
  require_cli(env, {"combat", "--data", cls, "--out", p(env, "c6_cls_combat.csv"), "--threads", "1"}, "c6.log");
  require_cli(env, {"eval", "--task", "binary-classification", "--data", cls, "--labels", p(env, "c6_cls.labels.csv"),
                    "--variant", "raw=" + cls, "--variant", "combat=" + p(env, "c6_cls_combat.csv"), "--variant",
                    "scm-qspline=" + p(env, "c6_cls_harm.csv"), "--source", "0", "--target", "1", "--seed", "66",
                    "--out", p(env, "c6_cls_eval.csv"), "--threads", "1"},
              "c6.log");
  const auto cj = json::parse(std::ifstream(p(env, "c6_cls_eval.json")));
  const auto qa = pick(cj, "scm-qspline", "SrcOnly", "Target"), ca = pick(cj, "combat", "SrcOnly", "Target");
  std::size_t cls_sign = 0;
  for (std::size_t f = 0; f < qa.folds.size() && f < ca.folds.size(); ++f) cls_sign += qa.folds[f] > ca.folds[f];
  const double margin = qa.mean - ca.mean;

  const bool reg_ok = improvement > kMaeImprovement && band <= kTarOnlyBand && reg_sign >= kSignFolds;
  const bool cls_ok = margin >= kAccuracyMargin && cls_sign >= kSignFolds;
  o.pass = reg_ok && cls_ok;
  o.detail = "target MAE qspline " + fmt(q.mean) + " vs SrcOnly raw " + fmt(raw.mean) + " (" +
             fmt(100 * improvement, 3) + "% lower, need > 20%; better in " + std::to_string(reg_sign) +
             "/5 folds) and TarOnly " + fmt(tar.mean) + " (" + fmt(100 * band, 3) +
             "% above, need <= 15%); target accuracy qspline " + fmt(qa.mean) + " vs combat " + fmt(ca.mean) + " (+" +
             fmt(100 * margin, 3) + " points, need >= 3; better in " + std::to_string(cls_sign) + "/5 folds)";
  return o;
}

// ---- criterion 7 ------------------------------------------------------------------

Outcome combat_validity() {
  Outcome o;
  const auto spec = synth::preset("location-scale", 71);
  const auto g = synth::generate(spec, kCombatRows);
  const auto params = combat::fit(g.table);
  const auto adj = combat::apply(params, g.table).table;
  const std::size_t K = spec.sites, d = spec.dim, n = adj.rows();

  // Per-site means and residual variances after adjustment, residuals taken
  // against the fitted covariate part.
  double mean_spread = 0.0, var_ratio = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> mean(K, 0.0), var(K, 0.0), resid_mean(K, 0.0);
    std::vector<std::size_t> cnt(K, 0);
    std::vector<double> resid(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = adj.site[i];
      mean[k] += adj.features(i)[j];
      resid[i] = adj.features(i)[j] - params.grand_mean[j] - params.sex_effect(j) * adj.sex[i] -
                 params.age_effect(j) * adj.age[i];
      resid_mean[k] += resid[i];
      ++cnt[k];
    }
    for (std::size_t k = 0; k < K; ++k) {
      mean[k] /= static_cast<double>(cnt[k]);
      resid_mean[k] /= static_cast<double>(cnt[k]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = adj.site[i];
      var[k] += (resid[i] - resid_mean[k]) * (resid[i] - resid_mean[k]);
    }
    for (std::size_t k = 0; k < K; ++k) var[k] /= static_cast<double>(cnt[k] - 1);
    mean_spread = std::max(mean_spread, *std::max_element(mean.begin(), mean.end()) -
                                            *std::min_element(mean.begin(), mean.end()));
    var_ratio = std::max(var_ratio, *std::max_element(var.begin(), var.end()) /
                                        *std::min_element(var.begin(), var.end()) - 1.0);
  }

  // Covariate effects: the fitted coefficients, and a refit on the adjusted data
  // (site indicators plus sex and age) to check the signal survives the adjustment.
  const auto refit = combat::fit(adj);
  double worst_cov = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    for (const auto* prm : {&params, &refit}) {
      worst_cov = std::max(worst_cov, std::abs(prm->sex_effect(j) - spec.beta_s[j]));
      worst_cov = std::max(worst_cov, std::abs(prm->age_effect(j) * spec.age_std - spec.beta_a[j]));
    }
  }
  o.pass = mean_spread < kCombatMeanTol && var_ratio < kCombatVarRatio && worst_cov < kCovariateTol;
  o.detail = "largest per-site mean spread " + fmt(mean_spread) + " (< 0.05); largest residual variance ratio - 1 " +
             fmt(var_ratio) + " (< 0.10); worst sex/age coefficient error " + fmt(worst_cov) + " (< 0.1)";
  return o;
}

// ---- criterion 8 ------------------------------------------------------------------

std::map<std::string, std::uint64_t> hash_outputs(const fs::path& manifest) {
  const auto j = json::parse(std::ifstream(manifest));
  std::map<std::string, std::uint64_t> out;
  for (const auto& f : j["outputs"]) {
    const std::string path = f;
    const auto bytes = binio::read_file(path);
    out[path] = binio::fnv1a(bytes.data(), bytes.size());
  }
  const auto self = binio::read_file(manifest.string());
  out[manifest.string()] = binio::fnv1a(self.data(), self.size());
  return out;
}

Outcome reproducibility(const Env& env) {
  Outcome o;
  const auto w = [&](const std::string& s) { return p(env, "c8_" + s); };
  const std::vector<std::vector<std::string>> pipeline = {
      {"synth", "--preset", "location-scale", "--n", "900", "--seed", "81", "--out", w("data.csv"), "--threads", "1"},
      {"fit-scm", "--flow", "qspline", "--data", w("data.csv"), "--out", w("model.cfscm"), "--seed", "82", "--epochs",
       "4", "--log", w("train_log.csv"), "--threads", "1"},
      {"harmonize", "--model", w("model.cfscm"), "--data", w("data.csv"), "--ref-site", "1", "--out", w("harm.csv"),
       "--threads", "1"},
      {"combat", "--data", w("data.csv"), "--out", w("combat.csv"), "--threads", "1"},
      {"eval", "--task", "age-regression", "--data", w("data.csv"), "--variant", "raw=" + w("data.csv"), "--variant",
       "combat=" + w("combat.csv"), "--variant", "scm-qspline=" + w("harm.csv"), "--source", "0", "--target", "1,2",
       "--epochs", "5", "--seed", "83", "--out", w("eval.csv"), "--threads", "1"},
      {"density-report", "--models", w("model.cfscm"), "--data", w("data.csv"), "--out", w("density.json"),
       "--threads", "1"},
  };
  const std::vector<std::string> manifests = {w("data.manifest.json"),    w("model.cfscm.manifest.json"),
                                              w("harm.manifest.json"),    w("combat.manifest.json"),
                                              w("eval.manifest.json"),    w("density.json.manifest.json")};
  for (const auto& args : pipeline) require_cli(env, args, "c8.log");
  std::size_t files = 0, identical = 0;
  std::string first_diff;
  for (const auto& m : manifests) {
    const auto before = hash_outputs(m);
    // Replay with the intermediate inputs still in place, from the manifest only.
    require_cli(env, {"replay", "--manifest", m}, "c8.log");
    const auto after = hash_outputs(m);
    for (const auto& [path, h] : before) {
      ++files;
      const auto it = after.find(path);
      if (it != after.end() && it->second == h) {
        ++identical;
      } else if (first_diff.empty()) {
        first_diff = path;
      }
    }
  }
  o.pass = files > 0 && identical == files;
  o.detail = std::to_string(identical) + "/" + std::to_string(files) +
             " output files byte-identical after replaying 6 manifests with --threads 1";
  if (!first_diff.empty()) o.detail += "; first difference " + first_diff;
  return o;
}

Outcome timed(double limit, const std::function<Outcome()>& f) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = f();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("error: ") + e.what();
  }
  o.seconds = since(t0);
  o.limit = limit;
  if (limit > 0 && o.seconds > limit) {
    o.pass = false;
    o.detail += "; runtime " + fmt(o.seconds, 4) + " s exceeds " + fmt(limit, 4) + " s";
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  Env env;
  std::set<int> only;  // development aid: run a subset of criteria
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string k = argv[i];
    if (k == "--cli") env.cli = argv[i + 1];
    if (k == "--work") env.work = argv[i + 1];
    if (k == "--only") {
      std::stringstream ss(argv[i + 1]);
      for (std::string c; std::getline(ss, c, ',');) only.insert(std::stoi(c));
    }
  }
  if (env.cli.empty() || env.work.empty()) {
    std::cerr << "usage: flowharm_acceptance --cli <flowharm> --work <dir>\n";
    return 1;
  }
  env.cli = fs::absolute(env.cli).string();
  env.work = fs::absolute(env.work);
  fs::remove_all(env.work);
  fs::create_directories(env.work);

  const char* names[] = {"",
                         "flow correctness suite",
                         "gradient suite",
                         "MLE recovery",
                         "counterfactual soundness",
                         "density ordering",
                         "harmonization benefit",
                         "ComBat baseline validity",
                         "reproducibility"};
  std::map<int, Outcome> results;
  MleState mle;
  const auto want = [&](int c) { return only.empty() || only.count(c) > 0; };
  const auto note = [&](int c) {
    std::cerr << "criterion " << c << " finished in " << fmt(results[c].seconds, 4) << " s\n";
  };
  if (want(1)) {
    results[1] = timed(60, flow_suite);
    note(1);
  }
  if (want(2)) {
    results[2] = timed(60, gradient_suite);
    note(2);
  }
  if (want(3)) {
    results[3] = timed(300, [&] { return mle_recovery(mle); });
    note(3);
  }
  if (want(5)) {
    results[5] = timed(600, [&] { return density_ordering(env); });
    note(5);
  }
  if (want(6)) {
    results[6] = timed(900, [&] { return harmonization_benefit(env); });
    note(6);
  }
  // Criterion 4 checks the criterion-3 model and every model fitted above.
  if (want(4)) {
    results[4] = timed(300, [&] {
    if (!mle.model) throw std::runtime_error("criterion 3 did not produce a model");
    return counterfactual_soundness(mle, env);
  });
    note(4);
  }
  if (want(7)) {
    results[7] = timed(120, combat_validity);
    note(7);
  }
  if (want(8)) {
    results[8] = timed(0, [&] { return reproducibility(env); });
    note(8);
  }

  bool all = true;
  for (int c = 1; c <= 8; ++c) {
    if (!want(c)) continue;
    const auto& r = results[c];
    all = all && r.pass;
    std::printf("criterion %d %s: %s: %s [%.1f s%s]\n", c, r.pass ? "PASS" : "FAIL", names[c], r.detail.c_str(),
                r.seconds, r.limit > 0 ? (" of " + fmt(r.limit, 4) + " s").c_str() : "");
  }
  std::fflush(stdout);
  return all ? 0 : 1;
}
