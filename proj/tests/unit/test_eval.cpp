#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "flowharm/eval.hpp"

using namespace flowharm;
using eval::Task;

namespace {

struct Toy {
  data::DataTable table;
  std::vector<double> age_labels, class_labels;
};

// Three sites; features carry age and a class signal plus a site offset.
Toy toy(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(20.0, 80.0);
  Toy t;
  t.table.dim = 4;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t site = i % 3;
    const double age = u(rng);
    const int y = static_cast<int>(i / 3 % 2);
    std::vector<double> f(4);
    for (std::size_t j = 0; j < 4; ++j) f[j] = 0.5 * site + 0.3 * g(rng);
    f[0] += (age - 50.0) / 15.0;
    f[1] += 1.5 * y;
    t.table.push_row("s" + std::to_string(i), static_cast<int>(i % 2), age, site, f);
    t.age_labels.push_back(age);
    t.class_labels.push_back(y);
  }
  return t;
}

eval::Plan small_plan(Task task) {
  eval::Plan p;
  p.task = task;
  p.source_sites = {0};
  p.target_sites = {1, 2};
  p.folds = 3;
  p.seed = 4;
  p.mlp.epochs = 15;
  return p;
}

}  // namespace

TEST_CASE("mlp widths halve twice") {
  CHECK(eval::mlp_widths(145) == std::vector<std::size_t>{145, 72, 36, 1});
  CHECK(eval::mlp_widths(16) == std::vector<std::size_t>{16, 8, 4, 1});
  CHECK(eval::mlp_widths(3) == std::vector<std::size_t>{3, 1, 1, 1});
}

TEST_CASE("separable classes are learned") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 0.3);
  std::vector<double> x, y;
  for (int i = 0; i < 600; ++i) {
    const int c = i % 2;
    x.push_back(c ? 2.0 + g(rng) : -2.0 + g(rng));
    x.push_back(g(rng));
    y.push_back(c);
  }
  eval::MlpConfig cfg;
  cfg.epochs = 30;
  cfg.seed = 3;
  const auto m = eval::train_mlp(x, 2, y, Task::BinaryClassification, cfg);
  CHECK(eval::evaluate(m, x, y) >= 0.99);
}

TEST_CASE("constant regression target is fitted") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> x(400 * 3), y(400, 42.0);
  for (auto& v : x) v = g(rng);
  eval::MlpConfig cfg;
  cfg.epochs = 40;
  cfg.seed = 1;
  const auto m = eval::train_mlp(x, 3, y, Task::AgeRegression, cfg);
  CHECK(eval::evaluate(m, x, y) < 0.01 * 42.0);
}

TEST_CASE("permuted labels give chance accuracy on held-out rows") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  const auto draw = [&](std::size_t n, std::vector<double>& x, std::vector<double>& y) {
    for (std::size_t i = 0; i < n; ++i) {
      for (int j = 0; j < 4; ++j) x.push_back(g(rng));
      y.push_back(coin(rng));
    }
  };
  std::vector<double> xtr, ytr, xte, yte;
  draw(1000, xtr, ytr);
  draw(4000, xte, yte);
  eval::MlpConfig cfg;
  cfg.epochs = 20;
  const auto m = eval::train_mlp(xtr, 4, ytr, Task::BinaryClassification, cfg);
  CHECK(std::abs(eval::evaluate(m, xte, yte) - 0.5) < 0.05);
}

TEST_CASE("metric helpers") {
  const std::vector<double> prob = {0.9, 0.2, 0.5, 0.49}, lab = {1, 0, 1, 1};
  CHECK(eval::accuracy(prob, lab) == doctest::Approx(0.75));
  const std::vector<double> ages = {30, 40, 50, 80};
  const double mean = std::accumulate(ages.begin(), ages.end(), 0.0) / 4.0;
  const std::vector<double> flat(4, mean);
  double mad = 0.0;
  for (double a : ages) mad += std::abs(a - mean) / 4.0;
  CHECK(eval::mean_absolute_error(flat, ages) == doctest::Approx(mad));
  CHECK(eval::mean_absolute_error(ages, ages) == 0.0);
  CHECK_THROWS(eval::accuracy(prob, std::span<const double>(ages).first(2)));
}

TEST_CASE("training input is validated") {
  const std::vector<double> x = {0, 1, 2, 3}, one = {1, 1, 1, 1}, bad = {0, 2, 1, 0};
  CHECK_THROWS_AS(eval::train_mlp(x, 1, one, Task::BinaryClassification, {}), data::DataError);
  CHECK_THROWS_AS(eval::train_mlp(x, 1, bad, Task::BinaryClassification, {}), data::DataError);
  CHECK_THROWS_AS(eval::parse_task("segmentation"), std::invalid_argument);
  CHECK(eval::parse_task(eval::to_string(Task::AgeRegression)) == Task::AgeRegression);
}

TEST_CASE("folds partition every group") {
  const auto t = toy(301, 1);
  auto plan = small_plan(Task::AgeRegression);
  plan.source_sites = {0, 1};
  plan.target_sites = {2};
  plan.folds = 4;
  const auto f = eval::assign_folds(plan, t.table);
  REQUIRE(f.size() == t.table.rows());
  for (const std::vector<std::size_t> group_sites : {std::vector<std::size_t>{0, 1}, std::vector<std::size_t>{2}}) {
    std::vector<std::size_t> count(4, 0);
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (std::find(group_sites.begin(), group_sites.end(), t.table.site[i]) == group_sites.end()) continue;
      REQUIRE(f[i] < 4);
      ++count[f[i]];
    }
    const auto [lo, hi] = std::minmax_element(count.begin(), count.end());
    CHECK(*hi - *lo <= 1);
  }
  plan.target_sites = {};
  plan.source_sites = {1};
  const auto g = eval::assign_folds(plan, t.table);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK((g[i] == eval::kNoFold) == (t.table.site[i] != 1));
}

TEST_CASE("train and test rows never overlap") {
  const auto t = toy(240, 2);
  const auto plan = small_plan(Task::AgeRegression);
  const auto rep = eval::run_plan(plan, t.table, t.age_labels, {{"raw", t.table}});
  // Source group has 80 rows in 3 folds; a SrcOnly model trains on the
  // source rows outside the fold.
  for (const auto& c : rep.cells) {
    if (c.mode != "SrcOnly" || c.role != "Source") continue;
    CHECK(c.train_rows + c.test_rows == 80);
  }
  const auto f = eval::assign_folds(plan, t.table);
  for (std::size_t k = 0; k < 3; ++k) {
    std::set<std::size_t> test;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (t.table.site[i] == 0 && f[i] == k) test.insert(i);
    }
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (t.table.site[i] == 0 && f[i] != k) CHECK(test.count(i) == 0);
    }
  }
}

TEST_CASE("report is independent of thread count") {
  const auto t = toy(240, 3);
  auto plan = small_plan(Task::BinaryClassification);
  const std::vector<eval::Variant> v = {{"raw", t.table}};
  plan.threads = 1;
  const auto a = eval::report_json(eval::run_plan(plan, t.table, t.class_labels, v));
  plan.threads = 2;
  const auto b = eval::report_json(eval::run_plan(plan, t.table, t.class_labels, v));
  CHECK(a == b);
}

TEST_CASE("identical variants score identically") {
  const auto t = toy(240, 4);
  const auto plan = small_plan(Task::AgeRegression);
  const auto rep = eval::run_plan(plan, t.table, t.age_labels, {{"raw", t.table}, {"combat", t.table}});
  REQUIRE(rep.fold_metrics("raw", "SrcOnly", "Source", "site-0").size() == 3);
  CHECK(rep.fold_metrics("raw", "SrcOnly", "Source", "site-0") == rep.fold_metrics("combat", "SrcOnly", "Source", "site-0"));
  for (const char* study : {"site-1", "site-2"}) {
    CHECK(rep.fold_metrics("raw", "SrcOnly", "Target", study) == rep.fold_metrics("combat", "SrcOnly", "Target", study));
  }
  const auto* tar = rep.find("raw", "TarOnly", "Target", "site-1");
  REQUIRE(tar != nullptr);
  CHECK(tar->folds == 3);
  const auto m = rep.fold_metrics("raw", "TarOnly", "Target", "site-1");
  double mean = 0.0, ss = 0.0;
  for (double x : m) mean += x / 3.0;
  for (double x : m) ss += (x - mean) * (x - mean) / 3.0;
  CHECK(tar->mean == doctest::Approx(mean));
  CHECK(tar->stddev == doctest::Approx(std::sqrt(ss)));
}

TEST_CASE("a variant that leaks the label is flagged") {
  auto t = toy(600, 5);
  auto leak = t.table;
  for (std::size_t i = 0; i < leak.rows(); ++i) {
    for (std::size_t j = 0; j < 4; ++j) leak.x[i * 4 + j] = (t.age_labels[i] - 50.0) / 15.0;
  }
  // Raw features carry age with noise, so TarOnly cannot reach the leak.
  for (std::size_t i = 0; i < t.table.rows(); ++i) t.table.x[i * 4] += 0.6 * std::sin(7.0 * i);
  auto plan = small_plan(Task::AgeRegression);
  plan.mlp.epochs = 40;
  const auto rep = eval::run_plan(plan, t.table, t.age_labels, {{"raw", t.table}, {"scm-affine", leak}});
  const auto* s = rep.find("scm-affine", "SrcOnly", "Target", "site-1");
  REQUIRE(s != nullptr);
  CHECK_MESSAGE(s->suspicious, "leaky variant MAE " << s->mean << " +- " << s->stddev);
  const auto* r = rep.find("raw", "TarOnly", "Target", "site-1");
  REQUIRE(r != nullptr);
  CHECK_FALSE(r->suspicious);
}

TEST_CASE("plan problems are data errors") {
  const auto t = toy(60, 6);
  auto plan = small_plan(Task::AgeRegression);
  auto missing = t.table.subset(std::vector<std::size_t>{0, 1, 2});
  CHECK_THROWS_AS(eval::run_plan(plan, t.table, t.age_labels, {{"raw", missing}}), data::DataError);
  CHECK_THROWS_AS(eval::run_plan(plan, t.table, std::vector<double>(5, 1.0), {{"raw", t.table}}), data::DataError);
  plan.target_sites = {0};
  CHECK_THROWS_AS(eval::run_plan(plan, t.table, t.age_labels, {{"raw", t.table}}), data::DataError);
  plan = small_plan(Task::AgeRegression);
  plan.folds = 1;
  CHECK_THROWS_AS(eval::assign_folds(plan, t.table), data::DataError);
  CHECK_THROWS_AS(eval::run_plan(plan, t.table, t.age_labels, {}), data::DataError);
}
