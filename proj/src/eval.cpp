#include "flowharm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <map>
#include <numeric>
#include <thread>
#include <unordered_map>

#include "flowharm/loss.hpp"
#include "flowharm/optim.hpp"
#include "json.hpp"

namespace flowharm::eval {

using num::Tensor;

std::string to_string(Task t) { return t == Task::AgeRegression ? "age-regression" : "binary-classification"; }

Task parse_task(const std::string& s) {
  if (s == "age-regression" || s == "regression") return Task::AgeRegression;
  if (s == "binary-classification" || s == "classification") return Task::BinaryClassification;
  throw std::invalid_argument("unknown task '" + s + "' (expected age-regression or binary-classification)");
}

std::vector<std::size_t> mlp_widths(std::size_t d) {
  return {d, std::max<std::size_t>(1, d / 2), std::max<std::size_t>(1, d / 4), 1};
}

Mlp::Mlp(std::size_t d, Task task, std::mt19937_64& rng) : dim_(d), task_(task) {
  const auto w = mlp_widths(d);
  for (std::size_t i = 0; i + 1 < w.size(); ++i) layers_.emplace_back(w[i], w[i + 1], rng);
  x_mean.assign(d, 0.0);
  x_std.assign(d, 1.0);
}

Tensor Mlp::forward(const Tensor& z) const {
  Tensor h = z;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(h);
    if (i + 1 < layers_.size()) h = num::leaky_relu(h, 0.1);
  }
  return h;
}

namespace {

Tensor standardized(const Mlp& m, std::span<const double> x, std::span<const std::size_t> rows) {
  const std::size_t d = m.dim();
  std::vector<double> v(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] = (x[rows[i] * d + j] - m.x_mean[j]) / m.x_std[j];
  }
  return Tensor({rows.size(), d}, std::move(v));
}

Tensor batch_loss(const Mlp& m, const Tensor& out, const Tensor& target) {
  return m.task() == Task::AgeRegression ? num::huber_loss(out, target) : num::bce_with_logits(out, target);
}

Tensor targets(std::span<const double> labels, std::span<const std::size_t> rows) {
  std::vector<double> v(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) v[i] = labels[rows[i]];
  return Tensor({rows.size(), 1}, std::move(v));
}

}  // namespace

std::vector<double> Mlp::predict(std::span<const double> x, std::size_t rows) const {
  if (x.size() != rows * dim_) throw num::ShapeError("Mlp::predict: feature buffer does not match rows x dim");
  num::NoGradGuard guard;
  std::vector<std::size_t> idx(rows);
  std::iota(idx.begin(), idx.end(), 0);
  const Tensor out = forward(standardized(*this, x, idx));
  std::vector<double> p(out.data().begin(), out.data().end());
  if (task_ == Task::BinaryClassification) {
    for (auto& v : p) v = 1.0 / (1.0 + std::exp(-v));
  }
  return p;
}

std::vector<nn::NamedParam> Mlp::named_parameters() const {
  std::vector<nn::NamedParam> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect("mlp.layer" + std::to_string(i), out);
  return out;
}

Mlp train_mlp(std::span<const double> x, std::size_t d, std::span<const double> labels, Task task,
              const MlpConfig& cfg) {
  const std::size_t n = labels.size();
  if (d == 0 || x.size() != n * d) throw num::ShapeError("train_mlp: features do not match labels x dim");
  if (n < 2) throw data::DataError("train_mlp: at least 2 training rows are required");
  for (double v : x) {
    if (!std::isfinite(v)) throw data::DataError("train_mlp: non-finite feature value");
  }
  if (task == Task::BinaryClassification) {
    std::size_t ones = 0;
    for (double v : labels) {
      if (v != 0.0 && v != 1.0) throw data::DataError("train_mlp: classification labels must be 0 or 1");
      ones += v == 1.0;
    }
    if (ones == 0 || ones == n) throw data::DataError("train_mlp: classification labels contain a single class");
  } else {
    for (double v : labels) {
      if (!std::isfinite(v)) throw data::DataError("train_mlp: non-finite regression label");
    }
  }

  std::mt19937_64 rng(cfg.seed);
  Mlp m(d, task, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t nv = std::min(n - 1, std::max<std::size_t>(1, static_cast<std::size_t>(cfg.val_fraction * n)));
  const std::vector<std::size_t> val(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(nv));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(nv), perm.end());

  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0, ss = 0.0;
    for (auto r : train) s += x[r * d + j];
    const double mean = s / static_cast<double>(train.size());
    for (auto r : train) ss += (x[r * d + j] - mean) * (x[r * d + j] - mean);
    const double sd = std::sqrt(ss / static_cast<double>(train.size()));
    m.x_mean[j] = mean;
    m.x_std[j] = sd > 0.0 ? sd : 1.0;
  }

  const auto params = m.named_parameters();
  num::SgdMomentum opt(nn::tensors_of(params), {.learning_rate = cfg.learning_rate, .momentum = cfg.momentum});
  const Tensor zval = standardized(m, x, val);
  const Tensor yval = targets(labels, val);
  std::vector<std::vector<double>> best;
  double best_loss = INFINITY;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
      const std::span<const std::size_t> rows(train.data() + start, std::min(cfg.batch_size, train.size() - start));
      opt.zero_grad();
      const Tensor loss = batch_loss(m, m.forward(standardized(m, x, rows)), targets(labels, rows));
      if (!std::isfinite(loss.item())) {
        num::Tape::current().clear();
        throw num::DomainError("train_mlp: non-finite loss at epoch " + std::to_string(epoch + 1));
      }
      num::backward(loss);
      opt.step();
    }
    double vl;
    {
      num::NoGradGuard guard;
      vl = batch_loss(m, m.forward(zval), yval).item();
    }
    if (vl < best_loss || best.empty()) {
      best_loss = vl;
      m.best_epoch = epoch + 1;
      best.clear();
      for (const auto& p : params) best.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    std::copy(best[i].begin(), best[i].end(), t.mutable_data().begin());
  }
  m.best_val_loss = best_loss;
  return m;
}

double mean_absolute_error(std::span<const double> pred, std::span<const double> labels) {
  if (pred.size() != labels.size() || pred.empty()) throw std::invalid_argument("mean_absolute_error: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - labels[i]);
  return s / static_cast<double>(pred.size());
}

double accuracy(std::span<const double> prob, std::span<const double> labels) {
  if (prob.size() != labels.size() || prob.empty()) throw std::invalid_argument("accuracy: size mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < prob.size(); ++i) hit += ((prob[i] >= 0.5) ? 1.0 : 0.0) == labels[i];
  return static_cast<double>(hit) / static_cast<double>(prob.size());
}

double evaluate(const Mlp& m, std::span<const double> x, std::span<const double> labels) {
  const auto p = m.predict(x, labels.size());
  return m.task() == Task::AgeRegression ? mean_absolute_error(p, labels) : accuracy(p, labels);
}

// ---- experiment plan -----------------------------------------------------------

std::string site_label(const std::vector<std::size_t>& sites) {
  std::string s = "site";
  for (std::size_t i = 0; i < sites.size(); ++i) s += (i ? "+" : "-") + std::to_string(sites[i]);
  return s;
}

const Summary* Report::find(const std::string& variant, const std::string& mode, const std::string& role,
                            const std::string& study) const {
  for (const auto& s : summary) {
    if (s.variant == variant && s.mode == mode && s.role == role && s.study == study) return &s;
  }
  return nullptr;
}

std::vector<double> Report::fold_metrics(const std::string& variant, const std::string& mode,
                                         const std::string& role, const std::string& study) const {
  std::vector<double> out;
  for (const auto& c : cells) {
    if (c.variant == variant && c.mode == mode && c.role == role && c.study == study) out.push_back(c.metric);
  }
  return out;
}

namespace {

struct Group {
  std::string study;
  std::vector<std::size_t> rows;   // raw-table row indices, shuffled
  std::vector<std::size_t> fold;   // fold of rows[i]
};

struct Job {
  std::size_t variant;  // index into variants, or npos for TarOnly
  std::size_t fold;
  std::size_t target_group;  // TarOnly only
};

// Gathers features and labels of `rows` (raw-table indices) from a variant.
void gather(const data::DataTable& table, const std::vector<std::size_t>& map, std::span<const double> labels,
            const std::vector<std::size_t>& rows, std::vector<double>& x, std::vector<double>& y) {
  const std::size_t d = table.dim;
  x.resize(rows.size() * d);
  y.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto f = table.features(map[rows[i]]);
    std::copy(f.begin(), f.end(), x.begin() + static_cast<std::ptrdiff_t>(i * d));
    y[i] = labels[rows[i]];
  }
}

std::vector<std::size_t> select(const Group& g, std::size_t fold, bool in_fold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < g.rows.size(); ++i) {
    if ((g.fold[i] == fold) == in_fold) out.push_back(g.rows[i]);
  }
  return out;
}

// groups[0] = pooled source, then one per target site. Each group is shuffled
// with the plan seed and dealt into folds round-robin.
std::vector<Group> make_groups(const Plan& plan, const data::DataTable& raw) {
  if (plan.folds < 2) throw data::DataError("run_plan: at least 2 folds are required");
  std::mt19937_64 rng(plan.seed);
  std::vector<Group> groups;
  const auto make_group = [&](const std::vector<std::size_t>& sites) {
    Group g;
    g.study = site_label(sites);
    for (std::size_t i = 0; i < raw.rows(); ++i) {
      if (std::find(sites.begin(), sites.end(), raw.acquisition_site(i)) != sites.end()) g.rows.push_back(i);
    }
    if (g.rows.size() < plan.folds) throw data::DataError("run_plan: " + g.study + " has fewer rows than folds");
    std::shuffle(g.rows.begin(), g.rows.end(), rng);
    g.fold.resize(g.rows.size());
    for (std::size_t i = 0; i < g.rows.size(); ++i) g.fold[i] = i % plan.folds;
    return g;
  };
  groups.push_back(make_group(plan.source_sites));
  for (auto t : plan.target_sites) groups.push_back(make_group({t}));
  return groups;
}

}  // namespace

std::vector<std::size_t> assign_folds(const Plan& plan, const data::DataTable& raw) {
  std::vector<std::size_t> out(raw.rows(), kNoFold);
  for (const auto& g : make_groups(plan, raw)) {
    for (std::size_t i = 0; i < g.rows.size(); ++i) out[g.rows[i]] = g.fold[i];
  }
  return out;
}

Report run_plan(const Plan& plan, const data::DataTable& raw, std::span<const double> labels,
                const std::vector<Variant>& variants) {
  if (labels.size() != raw.rows()) throw data::DataError("run_plan: labels do not match the raw table");
  if (plan.source_sites.empty() || plan.target_sites.empty()) {
    throw data::DataError("run_plan: source and target sites are required");
  }
  for (auto s : plan.source_sites) {
    if (std::find(plan.target_sites.begin(), plan.target_sites.end(), s) != plan.target_sites.end()) {
      throw data::DataError("run_plan: site " + std::to_string(s) + " is both a source and a target");
    }
  }
  if (plan.folds < 2) throw data::DataError("run_plan: at least 2 folds are required");
  if (variants.empty()) throw data::DataError("run_plan: no feature variants");

  // Join every variant to the raw table by subject id before any training.
  std::unordered_map<std::string, std::size_t> raw_index;
  for (std::size_t i = 0; i < raw.rows(); ++i) {
    if (!raw_index.emplace(raw.ids[i], i).second) throw data::DataError("run_plan: duplicate subject id " + raw.ids[i]);
  }
  std::vector<std::vector<std::size_t>> maps(variants.size());
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const auto& t = variants[v].table;
    if (t.dim != raw.dim) {
      throw data::DataError("run_plan: variant " + variants[v].name + " has " + std::to_string(t.dim) +
                            " features, raw table has " + std::to_string(raw.dim));
    }
    std::unordered_map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < t.rows(); ++i) idx.emplace(t.ids[i], i);
    maps[v].assign(raw.rows(), 0);
    for (std::size_t i = 0; i < raw.rows(); ++i) {
      const bool used = std::find(plan.source_sites.begin(), plan.source_sites.end(), raw.acquisition_site(i)) !=
                            plan.source_sites.end() ||
                        std::find(plan.target_sites.begin(), plan.target_sites.end(), raw.acquisition_site(i)) !=
                            plan.target_sites.end();
      const auto it = idx.find(raw.ids[i]);
      if (it == idx.end()) {
        if (used) throw data::DataError("run_plan: variant " + variants[v].name + " has no row for " + raw.ids[i]);
        continue;
      }
      maps[v][i] = it->second;
    }
  }

  const std::vector<Group> groups = make_groups(plan, raw);

  constexpr std::size_t kTarOnly = static_cast<std::size_t>(-1);
  std::vector<Job> jobs;
  for (std::size_t f = 0; f < plan.folds; ++f) {
    for (std::size_t v = 0; v < variants.size(); ++v) jobs.push_back({v, f, 0});
    for (std::size_t g = 1; g < groups.size(); ++g) jobs.push_back({kTarOnly, f, g});
  }
  std::vector<std::vector<Cell>> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());

  const auto run_job = [&](std::size_t j) {
    try {
      const Job& job = jobs[j];
      MlpConfig cfg = plan.mlp;
      cfg.seed = plan.seed * 1000003ULL + job.fold * 7919ULL + 17;
      std::vector<double> x, y;
      if (job.variant == kTarOnly) {
        const Group& g = groups[job.target_group];
        const std::vector<std::size_t> tr = select(g, job.fold, false), te = select(g, job.fold, true);
        // TarOnly always uses unprocessed target features from the raw table.
        std::vector<std::size_t> identity(raw.rows());
        std::iota(identity.begin(), identity.end(), 0);
        gather(raw, identity, labels, tr, x, y);
        const Mlp m = train_mlp(x, raw.dim, y, plan.task, cfg);
        gather(raw, identity, labels, te, x, y);
        results[j].push_back({"raw", "TarOnly", "Target", g.study, job.fold, evaluate(m, x, y), tr.size(), te.size()});
        return;
      }
      const Variant& var = variants[job.variant];
      const auto& map = maps[job.variant];
      const std::vector<std::size_t> tr = select(groups[0], job.fold, false);
      gather(var.table, map, labels, tr, x, y);
      const Mlp m = train_mlp(x, raw.dim, y, plan.task, cfg);
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const std::vector<std::size_t> te = select(groups[g], job.fold, true);
        gather(var.table, map, labels, te, x, y);
        results[j].push_back({var.name, "SrcOnly", g == 0 ? "Source" : "Target", groups[g].study, job.fold,
                              evaluate(m, x, y), tr.size(), te.size()});
      }
    } catch (...) {
      errors[j] = std::current_exception();
    }
  };

  const std::size_t nt = std::max<std::size_t>(
      1, std::min(jobs.size(), plan.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : plan.threads));
  if (nt == 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run_job(j);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < nt; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t j = w; j < jobs.size(); j += nt) run_job(j);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  Report rep;
  rep.task = plan.task;
  rep.metric = plan.task == Task::AgeRegression ? "mae" : "accuracy";
  rep.source_sites = plan.source_sites;
  rep.target_sites = plan.target_sites;
  for (auto& r : results) {
    for (auto& c : r) rep.cells.push_back(std::move(c));
  }
  // Deterministic order: variant order, TarOnly last; role; study; fold.
  std::map<std::tuple<std::string, std::string, std::string, std::string>, std::vector<double>> by_key;
  std::vector<std::tuple<std::string, std::string, std::string, std::string>> order;
  for (const auto& c : rep.cells) {
    const auto key = std::make_tuple(c.variant, c.mode, c.role, c.study);
    if (!by_key.count(key)) order.push_back(key);
    by_key[key].push_back(c.metric);
  }
  for (const auto& key : order) {
    const auto& v = by_key[key];
    Summary s;
    std::tie(s.variant, s.mode, s.role, s.study) = key;
    s.folds = v.size();
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double m : v) ss += (m - s.mean) * (m - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(v.size()));
    rep.summary.push_back(s);
  }
  const bool lower_is_better = plan.task == Task::AgeRegression;
  for (auto& s : rep.summary) {
    if (s.role != "Target" || s.mode == "TarOnly") continue;
    const Summary* tar = rep.find("raw", "TarOnly", "Target", s.study);
    if (!tar) continue;
    const double margin = 2.0 * std::max(tar->stddev, s.stddev);
    s.suspicious = lower_is_better ? s.mean < tar->mean - margin : s.mean > tar->mean + margin;
  }
  return rep;
}

std::string report_csv(const Report& r) {
  std::string out = "task,source,target,variant,mode,role,fold,metric_name,metric,train_rows,test_rows\n";
  const std::string task = to_string(r.task), src = site_label(r.source_sites);
  for (const auto& c : r.cells) {
    out += task + ',' + src + ',' + (c.role == "Source" ? src : c.study) + ',' + c.variant + ',' + c.mode + ',' +
           c.role + ',' + std::to_string(c.fold) + ',' + r.metric + ',' + data::format_double(c.metric) + ',' +
           std::to_string(c.train_rows) + ',' + std::to_string(c.test_rows) + '\n';
  }
  return out;
}

std::string report_json(const Report& r) {
  using nlohmann::json;
  json j;
  j["task"] = to_string(r.task);
  j["metric"] = r.metric;
  j["source_sites"] = r.source_sites;
  j["target_sites"] = r.target_sites;
  json cells = json::array();
  for (const auto& c : r.cells) {
    cells.push_back({{"variant", c.variant},
                     {"mode", c.mode},
                     {"role", c.role},
                     {"study", c.study},
                     {"fold", c.fold},
                     {"metric", c.metric},
                     {"train_rows", c.train_rows},
                     {"test_rows", c.test_rows}});
  }
  j["cells"] = cells;
  json summary = json::array();
  for (const auto& s : r.summary) {
    summary.push_back({{"variant", s.variant},
                       {"mode", s.mode},
                       {"role", s.role},
                       {"study", s.study},
                       {"mean", s.mean},
                       {"std", s.stddev},
                       {"folds", s.folds},
                       {"suspicious_vs_taronly", s.suspicious}});
  }
  j["summary"] = summary;
  return j.dump(1);
}

}  // namespace flowharm::eval
