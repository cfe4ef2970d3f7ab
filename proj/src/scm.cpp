#include "flowharm/scm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>

#include "flowharm/binio.hpp"
#include "flowharm/optim.hpp"
#include "flowharm/spline.hpp"
#include "json.hpp"

namespace flowharm::scm {

using num::Tensor;
using nlohmann::json;

namespace {

constexpr char kMagic[5] = {'C', 'F', 'S', 'C', 'M'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kChunk = 4096;

}  // namespace

std::string to_string(XFlowKind k) {
  switch (k) {
    case XFlowKind::Affine: return "conditional-affine";
    case XFlowKind::LinearSpline: return "linear-rational-spline";
    case XFlowKind::QuadraticSpline: return "quadratic-rational-spline";
  }
  return "unknown";
}

XFlowKind parse_flow_kind(const std::string& s) {
  if (s == "affine" || s == "conditional-affine") return XFlowKind::Affine;
  if (s == "lspline" || s == "linear-rational-spline") return XFlowKind::LinearSpline;
  if (s == "qspline" || s == "quadratic-rational-spline") return XFlowKind::QuadraticSpline;
  throw std::invalid_argument("unknown flow kind '" + s + "' (expected affine, lspline or qspline)");
}

std::size_t ScmSpec::hidden_width() const { return hidden > 0 ? hidden : flows::default_hidden_width(dim); }

ScmModel::ScmModel(ScmSpec spec, Standardization stats, std::uint64_t init_seed)
    : spec_(spec), stats_(std::move(stats)) {
  if (spec_.sites < 1 || spec_.dim < 1) throw std::invalid_argument("ScmModel: sites and dim must be positive");
  if (stats_.x_mean.size() != spec_.dim || stats_.x_std.size() != spec_.dim) {
    throw std::invalid_argument("ScmModel: standardization stats do not match dim");
  }
  std::mt19937_64 rng(init_seed);
  sex_ = std::make_shared<flows::Categorical>(2);
  site_ = std::make_shared<flows::Categorical>(spec_.sites);
  age_spline_ = std::make_shared<flows::ElementwiseSpline>(
      1, flows::SplineSpec{.order = flows::SplineOrder::Linear, .bins = spec_.bins, .tail_bound = spec_.tail_bound});
  age_flow_ = flows::compose({age_spline_,
                              std::make_shared<flows::FixedAffine>(std::vector<double>{stats_.log_age_mean},
                                                                   std::vector<double>{stats_.log_age_std}),
                              std::make_shared<flows::ExpTransform>(1)});
  const std::size_t c = spec_.context_dim();
  if (spec_.flow == XFlowKind::Affine) {
    x_flow_ = std::make_shared<flows::ConditionalAffine>(spec_.dim, c, spec_.hidden_width(), rng);
  } else {
    const flows::SplineSpec ss{.order = spec_.flow == XFlowKind::LinearSpline ? flows::SplineOrder::Linear
                                                                                : flows::SplineOrder::Quadratic,
                               .bins = spec_.bins,
                               .tail_bound = spec_.tail_bound};
    x_flow_ = std::make_shared<flows::AutoregressiveSpline>(spec_.dim, c, ss, spec_.hidden_width(), rng);
  }
}

std::vector<nn::NamedParam> ScmModel::named_parameters() const {
  std::vector<nn::NamedParam> out{{"sex.logits", sex_->logits()}, {"site.logits", site_->logits()}};
  for (auto& p : age_flow_->named_parameters("age")) out.push_back(p);
  for (auto& p : x_flow_->named_parameters("x")) out.push_back(p);
  return out;
}

double ScmModel::sex_probability() const { return sex_->probabilities()[1]; }

std::vector<double> ScmModel::site_probabilities() const { return site_->probabilities(); }

void ScmModel::check_table(const data::DataTable& data) const {
  if (data.dim != spec_.dim) {
    throw data::DataError("table has " + std::to_string(data.dim) + " features, model expects " +
                          std::to_string(spec_.dim));
  }
  for (std::size_t i = 0; i < data.rows(); ++i) {
    if (data.site[i] >= spec_.sites) {
      throw data::DataError("row " + std::to_string(i) + " (" + data.ids[i] + "): unknown site " +
                            std::to_string(data.site[i]) + " for a model with " + std::to_string(spec_.sites) +
                            " sites");
    }
  }
}

Tensor ScmModel::context(std::span<const int> sex, std::span<const double> age,
                         std::span<const std::size_t> site) const {
  const std::size_t n = sex.size(), c = spec_.context_dim();
  std::vector<double> v(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    v[i * c] = sex[i];
    v[i * c + 1] = (age[i] - stats_.age_mean) / stats_.age_std;
    v[i * c + 2 + site[i]] = 1.0;
  }
  return Tensor({n, c}, std::move(v));
}

Tensor ScmModel::standardize(const data::DataTable& data, std::span<const std::size_t> rows) const {
  const std::size_t d = spec_.dim;
  std::vector<double> v(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto f = data.features(rows[i]);
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = (f[j] - stats_.x_mean[j]) / stats_.x_std[j];
  }
  return Tensor({rows.size(), d}, std::move(v));
}

ScmModel::Terms ScmModel::terms(const data::DataTable& data, std::span<const std::size_t> rows) const {
  const std::size_t n = rows.size();
  std::vector<std::size_t> s(n), t(n);
  std::vector<int> si(n);
  std::vector<double> a(n);
  for (std::size_t i = 0; i < n; ++i) {
    si[i] = data.sex[rows[i]];
    s[i] = static_cast<std::size_t>(si[i]);
    t[i] = data.site[rows[i]];
    a[i] = data.age[rows[i]];
  }
  double log_std = 0.0;
  for (double v : stats_.x_std) log_std += std::log(v);
  Terms out;
  out.sex = sex_->log_prob(s);
  out.site = site_->log_prob(t);
  out.age = flows::log_prob(*age_flow_, Tensor({n, 1}, a), flows::no_context(n));
  out.x = flows::log_prob(*x_flow_, standardize(data, rows), context(si, a, t)) - log_std;
  return out;
}

ScmModel ScmModel::fit(const data::DataTable& data, const ScmSpec& spec, const TrainConfig& cfg) {
  if (data.dim != spec.dim) {
    throw data::DataError("table has " + std::to_string(data.dim) + " features, spec expects " +
                          std::to_string(spec.dim));
  }
  if (cfg.epochs == 0 || cfg.batch_size == 0) throw std::invalid_argument("fit: epochs and batch size must be positive");
  std::vector<std::vector<std::size_t>> by_site(spec.sites);
  for (std::size_t i = 0; i < data.rows(); ++i) {
    if (data.site[i] >= spec.sites) {
      throw data::DataError("row " + std::to_string(i) + ": site " + std::to_string(data.site[i]) + " >= K=" +
                            std::to_string(spec.sites));
    }
    if (!(data.age[i] > 0.0)) throw data::DataError("row " + std::to_string(i) + ": age must be positive");
    by_site[data.site[i]].push_back(i);
  }
  for (std::size_t k = 0; k < spec.sites; ++k) {
    if (by_site[k].size() < 2) {
      throw data::DataError("site " + std::to_string(k) + " has " + std::to_string(by_site[k].size()) +
                            " rows (need at least 2)");
    }
  }

  // Site-stratified train/validation split.
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> train, val;
  for (auto& rows : by_site) {
    std::shuffle(rows.begin(), rows.end(), rng);
    auto nv = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(rows.size()) + 0.5));
    nv = std::min(nv, rows.size() - 1);
    val.insert(val.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(nv));
    train.insert(train.end(), rows.begin() + static_cast<std::ptrdiff_t>(nv), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());

  Standardization st;
  const std::size_t d = spec.dim;
  st.x_mean.assign(d, 0.0);
  st.x_std.assign(d, 0.0);
  const double nt = static_cast<double>(train.size());
  double la = 0.0, la2 = 0.0, a1 = 0.0, a2 = 0.0;
  for (auto r : train) {
    const auto f = data.features(r);
    for (std::size_t j = 0; j < d; ++j) st.x_mean[j] += f[j];
    a1 += data.age[r];
    la += std::log(data.age[r]);
  }
  for (std::size_t j = 0; j < d; ++j) st.x_mean[j] /= nt;
  st.age_mean = a1 / nt;
  st.log_age_mean = la / nt;
  for (auto r : train) {
    const auto f = data.features(r);
    for (std::size_t j = 0; j < d; ++j) st.x_std[j] += (f[j] - st.x_mean[j]) * (f[j] - st.x_mean[j]);
    a2 += (data.age[r] - st.age_mean) * (data.age[r] - st.age_mean);
    la2 += (std::log(data.age[r]) - st.log_age_mean) * (std::log(data.age[r]) - st.log_age_mean);
  }
  for (std::size_t j = 0; j < d; ++j) {
    st.x_std[j] = std::sqrt(st.x_std[j] / nt);
    if (!(st.x_std[j] > 0.0)) throw data::DataError("feature " + data::feature_name(j) + " is constant on the training split");
  }
  st.age_std = std::sqrt(a2 / nt);
  st.log_age_std = std::sqrt(la2 / nt);
  if (!(st.age_std > 0.0)) throw data::DataError("age is constant on the training split");

  ScmModel model(spec, st, cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto named = model.named_parameters();
  const auto params = nn::tensors_of(named);
  num::Adam opt(params, {.learning_rate = cfg.learning_rate, .weight_decay = cfg.weight_decay});
  const num::StepSchedule schedule(cfg.learning_rate, cfg.epochs);

  const data::DataTable val_table = data.subset(val.empty() ? std::span<const std::size_t>(train) : val);
  std::vector<std::vector<double>> best;
  double best_ll = -std::numeric_limits<double>::infinity();
  TrainingMetadata meta;
  meta.train_rows = train.size();
  meta.val_rows = val.size();

  std::vector<std::size_t> order = train;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_learning_rate(schedule.rate(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0, start = 0; start < order.size(); ++b, start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      num::Tape::current().clear();
      opt.zero_grad();
      const Terms tm = model.terms(data, rows);
      const Tensor loss = num::neg(num::mean(tm.sex + tm.age + tm.site + tm.x));
      if (!std::isfinite(loss.item())) {
        num::Tape::current().clear();
        throw num::DomainError("non-finite training loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                               std::to_string(b + 1));
      }
      num::backward(loss);
      opt.step();
      loss_sum += loss.item() * static_cast<double>(rows.size());
    }
    const double val_ll = model.log_likelihood(val_table).mean;
    meta.epoch_loss.push_back(loss_sum / nt);
    meta.epoch_val_ll.push_back(val_ll);
    if (val_ll > best_ll || best.empty()) {
      best_ll = val_ll;
      meta.best_epoch = epoch + 1;
      best.clear();
      for (const auto& p : params) best.emplace_back(p.data().begin(), p.data().end());
    }
    if (cfg.on_epoch) cfg.on_epoch(epoch + 1, meta.epoch_loss.back(), val_ll);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    std::copy(best[i].begin(), best[i].end(), p.mutable_data().begin());
    p.zero_grad();
  }
  meta.epochs_run = cfg.epochs;
  meta.best_val_log_likelihood = best_ll;
  meta.missing_grad_warnings = opt.missing_grad_warnings();
  model.meta_ = std::move(meta);
  return model;
}

LikelihoodReport ScmModel::log_likelihood(const data::DataTable& data) const {
  check_table(data);
  num::NoGradGuard guard;
  LikelihoodReport rep;
  rep.per_row.assign(data.rows(), std::numeric_limits<double>::quiet_NaN());
  std::vector<std::size_t> ok;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    if (data.age[i] > 0.0) {
      ok.push_back(i);
    } else {
      rep.flagged.push_back(i);
    }
  }
  double ss = 0.0, sa = 0.0, st = 0.0, sx = 0.0;
  for (std::size_t start = 0; start < ok.size(); start += kChunk) {
    const std::span<const std::size_t> rows(ok.data() + start, std::min(kChunk, ok.size() - start));
    const Terms tm = terms(data, rows);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      rep.per_row[rows[i]] = tm.sex[i] + tm.age[i] + tm.site[i] + tm.x[i];
      ss += tm.sex[i];
      sa += tm.age[i];
      st += tm.site[i];
      sx += tm.x[i];
    }
  }
  rep.used = ok.size();
  if (rep.used > 0) {
    const double n = static_cast<double>(rep.used);
    rep.mean_sex = ss / n;
    rep.mean_age = sa / n;
    rep.mean_site = st / n;
    rep.mean_x = sx / n;
    double total = 0.0;
    for (auto r : ok) total += rep.per_row[r];
    rep.mean = total / n;
  }
  return rep;
}

std::vector<NoiseVector> ScmModel::abduct_all(const data::DataTable& data) const {
  check_table(data);
  num::NoGradGuard guard;
  const std::size_t n = data.rows(), d = spec_.dim;
  std::vector<NoiseVector> out(n);
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t m = std::min(kChunk, n - start);
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = start + i;
    const std::span<const int> s(data.sex.data() + start, m);
    const std::span<const double> a(data.age.data() + start, m);
    const std::span<const std::size_t> t(data.site.data() + start, m);
    const auto ea = age_flow_->inverse(Tensor({m, 1}, {a.begin(), a.end()}), flows::no_context(m));
    const auto ex = x_flow_->inverse(standardize(data, idx), context(s, a, t));
    for (std::size_t i = 0; i < m; ++i) {
      auto& nv = out[start + i];
      nv.eps_s = s[i];
      nv.eps_t = t[i];
      nv.eps_a = ea.value[i];
      nv.eps_x.assign(ex.value.data().begin() + static_cast<std::ptrdiff_t>(i * d),
                      ex.value.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    }
  }
  return out;
}

NoiseVector ScmModel::abduct(const data::DataTable& data, std::size_t row) const {
  if (row >= data.rows()) throw std::out_of_range("abduct: row out of range");
  const std::size_t r[1] = {row};
  try {
    return abduct_all(data.subset(r)).front();
  } catch (const num::DomainError& e) {
    throw num::DomainError("row " + std::to_string(row) + " (" + data.ids[row] + "): " + e.what());
  }
}

void ScmModel::validate_intervention(const Intervention& iv) const {
  if (iv.target != "t") throw std::invalid_argument("only interventions on the site variable t are supported");
  if (iv.value >= spec_.sites) {
    throw std::invalid_argument("intervention site " + std::to_string(iv.value) + " >= K=" +
                                std::to_string(spec_.sites));
  }
}

std::vector<double> ScmModel::predict(const NoiseVector& noise, const Intervention* iv) const {
  if (iv) validate_intervention(*iv);
  if (noise.eps_x.size() != spec_.dim) throw std::invalid_argument("predict: noise has the wrong dimension");
  num::NoGradGuard guard;
  const std::size_t t = iv ? iv->value : noise.eps_t;
  const double a = age_flow_->forward(Tensor({1, 1}, {noise.eps_a}), flows::no_context(1)).value[0];
  const int s[1] = {noise.eps_s};
  const double ages[1] = {a};
  const std::size_t sites[1] = {t};
  const auto x = x_flow_->forward(Tensor({1, spec_.dim}, noise.eps_x), context(s, ages, sites));
  std::vector<double> out(spec_.dim);
  for (std::size_t j = 0; j < spec_.dim; ++j) out[j] = x.value[j] * stats_.x_std[j] + stats_.x_mean[j];
  return out;
}

std::vector<double> ScmModel::counterfactual(const data::DataTable& data, std::size_t row, const Intervention& iv,
                                             std::size_t mc_samples) const {
  validate_intervention(iv);
  if (mc_samples == 0) throw std::invalid_argument("mc_samples must be positive");
  // The abduction posterior is a point mass, so every Monte Carlo draw is the
  // same prediction and their mean is that prediction.
  return predict(abduct(data, row), &iv);
}

BatchCounterfactual ScmModel::counterfactual_batch(const data::DataTable& data, const Intervention& iv,
                                                   std::size_t mc_samples) const {
  validate_intervention(iv);
  if (mc_samples == 0) throw std::invalid_argument("mc_samples must be positive");
  check_table(data);
  num::NoGradGuard guard;
  BatchCounterfactual out;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    if (data.age[i] > 0.0) {
      out.kept_rows.push_back(i);
    } else {
      out.failed_rows.push_back(i);
      out.errors.push_back("row " + std::to_string(i) + " (" + data.ids[i] + "): age " +
                           data::format_double(data.age[i]) + " outside the support of the age mechanism");
    }
  }
  out.table = data.subset(out.kept_rows);
  const std::size_t n = out.table.rows(), d = spec_.dim;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const std::size_t m = std::min(kChunk, n - start);
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = start + i;
    const std::span<const int> s(out.table.sex.data() + start, m);
    const std::span<const double> a(out.table.age.data() + start, m);
    const std::span<const std::size_t> t(out.table.site.data() + start, m);
    const std::vector<std::size_t> tau(m, iv.value);
    const auto eps = x_flow_->inverse(standardize(out.table, idx), context(s, a, t));
    const auto x = x_flow_->forward(eps.value, context(s, a, tau));
    for (std::size_t i = 0; i < m; ++i) {
      auto f = out.table.features(start + i);
      for (std::size_t j = 0; j < d; ++j) f[j] = x.value[i * d + j] * stats_.x_std[j] + stats_.x_mean[j];
    }
  }
  out.max_sample_spread = 0.0;
  return out;
}

data::DataTable ScmModel::sample_observational(std::size_t n, std::uint64_t seed) const {
  num::NoGradGuard guard;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t d = spec_.dim;
  std::vector<int> s(n);
  std::vector<std::size_t> t(n);
  std::vector<double> ea(n), ex(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = static_cast<int>(sex_->sample(rng));
    t[i] = site_->sample(rng);
    ea[i] = gauss(rng);
    for (std::size_t j = 0; j < d; ++j) ex[i * d + j] = gauss(rng);
  }
  const auto a = age_flow_->forward(Tensor({n, 1}, ea), flows::no_context(n));
  const std::vector<double> ages(a.value.data().begin(), a.value.data().end());
  const auto x = x_flow_->forward(Tensor({n, d}, ex), context(s, ages, t));
  data::DataTable out;
  out.dim = d;
  out.reserve(n);
  std::vector<double> f(d);
  char id[32];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) f[j] = x.value[i * d + j] * stats_.x_std[j] + stats_.x_mean[j];
    std::snprintf(id, sizeof id, "sim-%06zu", i + 1);
    out.push_row(id, s[i], ages[i], t[i], f);
  }
  return out;
}

std::vector<double> ScmModel::affine_conditional_mean(int sex, double age, std::size_t site) const {
  if (spec_.flow != XFlowKind::Affine) throw std::logic_error("affine_conditional_mean: model is not affine");
  if (site >= spec_.sites) throw std::invalid_argument("site out of range");
  num::NoGradGuard guard;
  const int s[1] = {sex};
  const double a[1] = {age};
  const std::size_t t[1] = {site};
  const auto x = x_flow_->forward(Tensor::zeros({1, spec_.dim}), context(s, a, t));
  std::vector<double> out(spec_.dim);
  for (std::size_t j = 0; j < spec_.dim; ++j) out[j] = x.value[j] * stats_.x_std[j] + stats_.x_mean[j];
  return out;
}

// ---- model file ----------------------------------------------------------------

void ScmModel::save(const std::string& path) const {
  json h;
  h["spec"] = {{"sites", spec_.sites},
               {"dim", spec_.dim},
               {"flow", to_string(spec_.flow)},
               {"bins", spec_.bins},
               {"tail_bound", spec_.tail_bound},
               {"hidden", spec_.hidden_width()}};
  h["stats"] = {{"x_mean", stats_.x_mean},       {"x_std", stats_.x_std},
                {"age_mean", stats_.age_mean},   {"age_std", stats_.age_std},
                {"log_age_mean", stats_.log_age_mean}, {"log_age_std", stats_.log_age_std}};
  h["training"] = {{"epochs_run", meta_.epochs_run},
                   {"best_epoch", meta_.best_epoch},
                   {"best_val_log_likelihood", meta_.best_val_log_likelihood},
                   {"train_rows", meta_.train_rows},
                   {"val_rows", meta_.val_rows},
                   {"epoch_loss", meta_.epoch_loss},
                   {"epoch_val_ll", meta_.epoch_val_ll},
                   {"missing_grad_warnings", meta_.missing_grad_warnings}};

  binio::Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kVersion);
  w.str(h.dump());
  const auto params = named_parameters();
  w.put<std::uint64_t>(params.size());
  for (const auto& p : params) {
    w.str(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) w.put<std::uint64_t>(e);
    w.bytes(p.tensor.data().data(), p.tensor.size() * sizeof(double));
  }
  w.seal();
  binio::write_file(path, w.buffer());
}

ScmModel ScmModel::load(const std::string& path) {
  const auto buf = binio::read_file(path);
  if (buf.size() < sizeof kMagic + sizeof(std::uint32_t) || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw data::DataError(path + ": not a model file (bad magic)");
  }
  std::uint32_t version;
  std::memcpy(&version, buf.data() + sizeof kMagic, sizeof version);
  if (version != kVersion) {
    throw data::DataError(path + ": unsupported model format version " + std::to_string(version) +
                          " (this build reads version " + std::to_string(kVersion) + ")");
  }
  const std::size_t body = binio::verify_sealed(buf, path);
  binio::Reader r(buf.data(), body, path);
  char magic[sizeof kMagic];
  r.bytes(magic, sizeof magic);
  (void)r.get<std::uint32_t>();

  json h;
  try {
    h = json::parse(r.str());
  } catch (const json::exception& e) {
    throw data::DataError(path + ": malformed header: " + e.what());
  }
  ScmSpec spec;
  Standardization st;
  TrainingMetadata meta;
  try {
    const auto& s = h.at("spec");
    spec.sites = s.at("sites").get<std::size_t>();
    spec.dim = s.at("dim").get<std::size_t>();
    spec.flow = parse_flow_kind(s.at("flow").get<std::string>());
    spec.bins = s.at("bins").get<std::size_t>();
    spec.tail_bound = s.at("tail_bound").get<double>();
    spec.hidden = s.at("hidden").get<std::size_t>();
    const auto& z = h.at("stats");
    st.x_mean = z.at("x_mean").get<std::vector<double>>();
    st.x_std = z.at("x_std").get<std::vector<double>>();
    st.age_mean = z.at("age_mean").get<double>();
    st.age_std = z.at("age_std").get<double>();
    st.log_age_mean = z.at("log_age_mean").get<double>();
    st.log_age_std = z.at("log_age_std").get<double>();
    const auto& m = h.at("training");
    meta.epochs_run = m.at("epochs_run").get<std::size_t>();
    meta.best_epoch = m.at("best_epoch").get<std::size_t>();
    meta.best_val_log_likelihood = m.at("best_val_log_likelihood").get<double>();
    meta.train_rows = m.at("train_rows").get<std::size_t>();
    meta.val_rows = m.at("val_rows").get<std::size_t>();
    meta.epoch_loss = m.at("epoch_loss").get<std::vector<double>>();
    meta.epoch_val_ll = m.at("epoch_val_ll").get<std::vector<double>>();
    meta.missing_grad_warnings = m.at("missing_grad_warnings").get<std::size_t>();
  } catch (const json::exception& e) {
    throw data::DataError(path + ": malformed header: " + e.what());
  }

  ScmModel model(spec, st);
  model.meta_ = std::move(meta);
  auto params = model.named_parameters();
  const auto count = r.get<std::uint64_t>();
  if (count != params.size()) {
    throw data::DataError(path + ": expected " + std::to_string(params.size()) + " parameter blobs, found " +
                          std::to_string(count));
  }
  for (auto& p : params) {
    const auto name = r.str();
    if (name != p.name) throw data::DataError(path + ": expected parameter " + p.name + ", found " + name);
    const auto rank = r.get<std::uint32_t>();
    num::Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint64_t>();
    if (shape != p.tensor.shape()) {
      throw data::DataError(path + ": parameter " + name + " has shape " + num::shape_str(shape) + ", expected " +
                            num::shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    r.bytes(dst.data(), dst.size() * sizeof(double));
  }
  if (r.remaining() != 0) throw data::DataError(path + ": trailing bytes after parameters");
  return model;
}

}  // namespace flowharm::scm
