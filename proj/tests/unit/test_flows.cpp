#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "flowharm/flow.hpp"
#include "flowharm/probe.hpp"
#include "flowharm/spline.hpp"
#include "flow_cases.hpp"

using flowharm::num::Tensor;
namespace num = flowharm::num;
namespace fl = flowharm::flows;

namespace {

using flowcases::Case;
using flowcases::all_kinds;
using flowcases::max_abs_diff;
using flowcases::perturb;
using flowcases::randn;

// Scalar rational-quadratic spline, written directly from the published
// formula for one bin, as an oracle for spline_forward.
double rq_reference(double u, const std::vector<double>& xk, const std::vector<double>& yk,
                    const std::vector<double>& dk, double& deriv) {
  const std::size_t k = xk.size() - 1;
  std::size_t b = 0;
  while (b + 1 < k && u >= xk[b + 1]) ++b;
  const double w = xk[b + 1] - xk[b], h = yk[b + 1] - yk[b], s = h / w;
  const double xi = (u - xk[b]) / w;
  const double denom = s + (dk[b + 1] + dk[b] - 2 * s) * xi * (1 - xi);
  deriv = s * s * (dk[b + 1] * xi * xi + 2 * s * xi * (1 - xi) + dk[b] * (1 - xi) * (1 - xi)) / (denom * denom);
  return yk[b] + h * (s * xi * xi + dk[b] * xi * (1 - xi)) / denom;
}

}  // namespace

TEST_CASE("learned affine: identity at init and closed forms") {
  fl::LearnedAffine f(1);
  auto r = f.forward(Tensor::matrix(1, 1, {1.7}), fl::no_context(1));
  CHECK(r.value[0] == 1.7);
  CHECK(r.logdet[0] == 0.0);

  f.loc().mutable_data()[0] = 1.0;
  f.log_scale().mutable_data()[0] = std::log(2.0);
  r = f.forward(Tensor::matrix(1, 1, {2.0}), fl::no_context(1));
  CHECK(r.value[0] == doctest::Approx(5.0));
  CHECK(r.logdet[0] == doctest::Approx(0.6931).epsilon(1e-4));
  r = f.inverse(Tensor::matrix(1, 1, {5.0}), fl::no_context(1));
  CHECK(r.value[0] == doctest::Approx(2.0));
  CHECK(r.logdet[0] == doctest::Approx(-std::log(2.0)));
}

TEST_CASE("spline identity init keeps tails and interior") {
  for (auto order : {fl::SplineOrder::Linear, fl::SplineOrder::Quadratic}) {
    fl::ElementwiseSpline f(1, {.order = order});
    const double b = f.spec().tail_bound;
    const auto r = f.forward(Tensor::matrix(4, 1, {b + 1.0, -b - 2.0, 0.3, -2.2}), fl::no_context(4));
    CHECK(r.value[0] == b + 1.0);
    CHECK(r.value[1] == -b - 2.0);
    CHECK(r.logdet[0] == 0.0);
    CHECK(r.value[2] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(r.value[3] == doctest::Approx(-2.2).epsilon(1e-12));
    CHECK(std::abs(r.logdet[2]) < 1e-9);
  }
}

TEST_CASE("exp transform") {
  fl::ExpTransform f(1);
  const auto r = f.inverse(Tensor::matrix(1, 1, {1.0}), fl::no_context(1));
  CHECK(r.value[0] == 0.0);
  CHECK(r.logdet[0] == 0.0);
  try {
    (void)f.inverse(Tensor::matrix(3, 1, {1.0, 2.0, -0.5}), fl::no_context(3));
    FAIL("expected DomainError");
  } catch (const num::DomainError& e) {
    CHECK(std::string(e.what()).find("row 2") != std::string::npos);
  }
}

TEST_CASE("log_prob closed forms") {
  fl::LearnedAffine id(1);
  CHECK(fl::log_prob(id, Tensor::matrix(1, 1, {0.0}), fl::no_context(1))[0] == doctest::Approx(-0.9189).epsilon(1e-4));
  fl::FixedAffine twice({0.0}, {2.0});
  CHECK(fl::log_prob(twice, Tensor::matrix(1, 1, {0.0}), fl::no_context(1))[0] ==
        doctest::Approx(std::log(0.19947)).epsilon(1e-4));
}

TEST_CASE("d=5 affine density integrates to one as a per-dimension product") {
  std::mt19937_64 rng(3);
  fl::LearnedAffine f(5);
  perturb(f, rng, 0.4);
  const auto loc = f.loc().data();
  const auto ls = f.log_scale().data();

  // log p factorizes over dimensions.
  const Tensor x = randn(20, 5, rng);
  const Tensor lp = fl::log_prob(f, x, fl::no_context(20));
  double total_mass = 1.0;
  for (std::size_t j = 0; j < 5; ++j) {
    fl::LearnedAffine g(1);
    g.loc().mutable_data()[0] = loc[j];
    g.log_scale().mutable_data()[0] = ls[j];
    const std::size_t n = 4001;
    std::vector<double> grid(n);
    for (std::size_t i = 0; i < n; ++i) grid[i] = -10.0 + 20.0 * static_cast<double>(i) / (n - 1);
    const Tensor lpg = fl::log_prob(g, Tensor({n, 1}, grid), fl::no_context(n));
    double mass = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) mass += 0.5 * (std::exp(lpg[i]) + std::exp(lpg[i + 1])) * (grid[i + 1] - grid[i]);
    total_mass *= mass;
  }
  CHECK(total_mass == doctest::Approx(1.0).epsilon(1e-2));
  for (std::size_t r = 0; r < 20; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      const double s = std::exp(ls[j]);
      const double e = (x.at(r, j) - loc[j]) / s;
      sum += -0.5 * e * e - 0.5 * std::log(2 * std::numbers::pi) - ls[j];
    }
    CHECK(lp[r] == doctest::Approx(sum).epsilon(1e-12));
  }
}

TEST_CASE("compose") {
  auto twice = std::make_shared<fl::FixedAffine>(std::vector<double>{0.0}, std::vector<double>{2.0});
  auto plus1 = std::make_shared<fl::FixedAffine>(std::vector<double>{1.0}, std::vector<double>{1.0});
  const auto c = fl::compose({twice, plus1});
  const auto r = c->forward(Tensor::matrix(1, 1, {1.0}), fl::no_context(1));
  CHECK(r.value[0] == doctest::Approx(3.0));
  CHECK(r.logdet[0] == doctest::Approx(std::log(2.0)));

  auto id = std::make_shared<fl::LearnedAffine>(1);
  const auto idc = fl::compose({id, id});
  CHECK(idc->forward(Tensor::matrix(1, 1, {0.7}), fl::no_context(1)).value[0] == 0.7);

  CHECK_THROWS_AS(fl::compose({twice, std::make_shared<fl::LearnedAffine>(2)}), std::invalid_argument);

  std::mt19937_64 rng(9);
  auto s = std::make_shared<fl::ElementwiseSpline>(3, fl::SplineSpec{});
  auto a = std::make_shared<fl::LearnedAffine>(3);
  perturb(*s, rng, 0.5);
  perturb(*a, rng, 0.5);
  const auto sa = fl::compose({s, a});
  const Tensor e = randn(50, 3, rng);
  const auto whole = sa->forward(e, fl::no_context(50));
  const auto first = s->forward(e, fl::no_context(50));
  const auto second = a->forward(first.value, fl::no_context(50));
  for (std::size_t i = 0; i < 50; ++i) CHECK(whole.logdet[i] == doctest::Approx(first.logdet[i] + second.logdet[i]));
}

TEST_CASE("knot geometry invariants") {
  std::mt19937_64 rng(21);
  for (auto order : {fl::SplineOrder::Linear, fl::SplineOrder::Quadratic}) {
    fl::SplineSpec spec{.order = order};
    const Tensor raw = randn(30, spec.params_per_dim(), rng, 2.0);
    const auto kn = fl::make_knots(raw, spec);
    for (std::size_t r = 0; r < 30; ++r) {
      double sw = 0.0, sh = 0.0;
      for (std::size_t k = 0; k < spec.bins; ++k) {
        CHECK(kn.widths.at(r, k) > 0.0);
        CHECK(kn.heights.at(r, k) > 0.0);
        sw += kn.widths.at(r, k);
        sh += kn.heights.at(r, k);
      }
      CHECK(sw == doctest::Approx(2 * spec.tail_bound).epsilon(1e-12));
      CHECK(sh == doctest::Approx(2 * spec.tail_bound).epsilon(1e-12));
      CHECK(kn.left_x.at(r, 0) == doctest::Approx(-spec.tail_bound));
      for (std::size_t k = 0; k <= spec.bins; ++k) CHECK(kn.derivatives.at(r, k) > 0.0);
      CHECK(kn.derivatives.at(r, 0) == 1.0);
      CHECK(kn.derivatives.at(r, spec.bins) == 1.0);
    }
  }
}

TEST_CASE("rational quadratic spline matches the scalar reference") {
  std::mt19937_64 rng(5);
  fl::SplineSpec spec{.order = fl::SplineOrder::Quadratic};
  const std::size_t m = 200;
  const Tensor raw = randn(m, spec.params_per_dim(), rng, 1.5);
  const auto kn = fl::make_knots(raw, spec);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::vector<double> us(m);
  for (auto& v : us) v = u(rng);
  const auto r = fl::spline_forward(Tensor({m}, us), kn, spec);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> xk{-3.0}, yk{-3.0}, dk;
    for (std::size_t k = 0; k < spec.bins; ++k) {
      xk.push_back(xk.back() + kn.widths.at(i, k));
      yk.push_back(yk.back() + kn.heights.at(i, k));
    }
    for (std::size_t k = 0; k <= spec.bins; ++k) dk.push_back(kn.derivatives.at(i, k));
    double deriv = 0.0;
    const double y = rq_reference(us[i], xk, yk, dk, deriv);
    CHECK(r.value[i] == doctest::Approx(y).epsilon(1e-10));
    CHECK(r.logdet[i] == doctest::Approx(std::log(deriv)).epsilon(1e-9));
  }
}

TEST_CASE("linear rational spline is monotone, continuous and has a matching derivative") {
  std::mt19937_64 rng(6);
  fl::SplineSpec spec{.order = fl::SplineOrder::Linear};
  const Tensor raw = randn(1, spec.params_per_dim(), rng, 1.5);
  const std::size_t n = 6001;
  std::vector<double> grid(n);
  for (std::size_t i = 0; i < n; ++i) grid[i] = -3.0 + 6.0 * static_cast<double>(i) / (n - 1);
  const Tensor rep = num::matmul(Tensor::full({n, 1}, 1.0), raw);
  const auto kn = fl::make_knots(rep, spec);
  const auto r = fl::spline_forward(Tensor({n}, grid), kn, spec);
  CHECK(r.value[0] == doctest::Approx(-3.0));
  CHECK(r.value[n - 1] == doctest::Approx(3.0));
  for (std::size_t i = 1; i < n; ++i) CHECK(r.value[i] > r.value[i - 1]);
  const auto kn1 = fl::make_knots(raw, spec);
  for (std::size_t i = 1; i + 1 < n; i += 37) {
    const double h = 1e-6;
    const double hi = fl::spline_forward(Tensor::vector({grid[i] + h}), kn1, spec).value[0];
    const double lo = fl::spline_forward(Tensor::vector({grid[i] - h}), kn1, spec).value[0];
    CHECK(std::log((hi - lo) / (2 * h)) == doctest::Approx(r.logdet[i]).epsilon(1e-5));
  }
}

TEST_CASE("round trip and logdet antisymmetry for every learnable kind") {
  std::mt19937_64 rng(42);
  for (std::size_t d : {1u, 3u, 8u}) {
    const std::size_t c = 4;
    for (auto& k : all_kinds(d, c, rng)) {
      const std::size_t n = 1000;
      const Tensor eps = randn(n, d, rng, 1.5);
      const Tensor ctx = randn(n, c, rng);
      const auto f = k.flow->forward(eps, ctx);
      const auto b = k.flow->inverse(f.value, ctx);
      INFO(k.name, " d=", d);
      CHECK(max_abs_diff(b.value, eps) < 1e-6);
      double anti = 0.0;
      for (std::size_t i = 0; i < n; ++i) anti = std::max(anti, std::abs(f.logdet[i] + b.logdet[i]));
      CHECK(anti < 1e-9);
    }
  }
}

TEST_CASE("identity initialization for all learned transforms") {
  std::mt19937_64 rng(1);
  const std::size_t d = 4, c = 3, n = 100;
  std::vector<fl::FlowPtr> fs{
      std::make_shared<fl::LearnedAffine>(d), std::make_shared<fl::ConditionalAffine>(d, c, 8, rng),
      std::make_shared<fl::ElementwiseSpline>(d, fl::SplineSpec{.order = fl::SplineOrder::Linear}),
      std::make_shared<fl::AutoregressiveSpline>(d, c, fl::SplineSpec{}, 8, rng)};
  const Tensor eps = randn(n, d, rng, 2.0);
  const Tensor ctx = randn(n, c, rng);
  for (const auto& f : fs) {
    const auto r = f->forward(eps, ctx);
    CHECK(max_abs_diff(r.value, eps) < 1e-12);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(r.logdet[i]) < 1e-10);
  }
}

TEST_CASE("jacobian probe") {
  std::mt19937_64 rng(77);
  SUBCASE("diagonal affine passes") {
    fl::LearnedAffine f(4);
    perturb(f, rng, 0.5);
    const std::vector<double> e{0.1, -0.4, 1.2, 0.8};
    const auto rep = fl::jacobian_probe_report(f, e, {});
    CHECK(rep.passed);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        if (i != j) CHECK(rep.jacobian[i * 4 + j] == 0.0);
  }
  SUBCASE("masked autoregressive splines pass for d in {2,4,8,16}") {
    for (std::size_t d : {2u, 4u, 8u, 16u}) {
      for (auto order : {fl::SplineOrder::Linear, fl::SplineOrder::Quadratic}) {
        fl::AutoregressiveSpline f(d, 3, {.order = order}, fl::default_hidden_width(d), rng);
        perturb(f, rng, 0.5);
        const Tensor e = randn(1, d, rng);
        const Tensor c = randn(1, 3, rng);
        const auto rep = fl::jacobian_probe_report(f, e.data(), c.data());
        INFO("d=", d, " max_upper=", rep.max_upper, " logdet_err=", rep.logdet_error);
        CHECK(rep.passed);
        bool lower_nonzero = false;
        for (std::size_t i = 1; i < d; ++i) lower_nonzero = lower_nonzero || rep.jacobian[i * d] != 0.0;
        CHECK(lower_nonzero);
      }
    }
  }
  SUBCASE("unmasked conditioner fails (negative control)") {
    fl::AutoregressiveSpline f(8, 2, {}, 16, rng, /*masked=*/false);
    perturb(f, rng, 0.5);
    const Tensor e = randn(1, 8, rng);
    const Tensor c = randn(1, 2, rng);
    const auto rep = fl::jacobian_probe_report(f, e.data(), c.data());
    CHECK_FALSE(rep.passed);
    CHECK(rep.max_upper > 1e-8);
  }
}

TEST_CASE("d=1 densities integrate to one") {
  std::mt19937_64 rng(8);
  std::vector<fl::FlowPtr> fs{std::make_shared<fl::LearnedAffine>(1),
                              std::make_shared<fl::ElementwiseSpline>(1, fl::SplineSpec{.order = fl::SplineOrder::Linear}),
                              std::make_shared<fl::ElementwiseSpline>(1, fl::SplineSpec{})};
  for (const auto& f : fs) {
    perturb(*f, rng, 0.8);
    const std::size_t n = 20001;
    std::vector<double> grid(n);
    for (std::size_t i = 0; i < n; ++i) grid[i] = -12.0 + 24.0 * static_cast<double>(i) / (n - 1);
    const Tensor lp = fl::log_prob(*f, Tensor({n, 1}, grid), fl::no_context(n));
    double mass = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) mass += 0.5 * (std::exp(lp[i]) + std::exp(lp[i + 1])) * (grid[i + 1] - grid[i]);
    CHECK(mass > 0.99);
    CHECK(mass < 1.01);
  }
}

TEST_CASE("non-finite parameter fails fast with its path") {
  fl::LearnedAffine f(2);
  f.log_scale().mutable_data()[1] = std::nan("");
  try {
    (void)f.forward(Tensor::matrix(1, 2, {0.0, 0.0}), fl::no_context(1));
    FAIL("expected DomainError");
  } catch (const num::DomainError& e) {
    CHECK(std::string(e.what()).find("log_scale[1]") != std::string::npos);
  }
}

TEST_CASE("shape checks on forward") {
  std::mt19937_64 rng(2);
  fl::AutoregressiveSpline f(3, 2, {}, 8, rng);
  CHECK_THROWS_AS((void)f.forward(Tensor::zeros({4, 2}), Tensor::zeros({4, 2})), num::ShapeError);
  CHECK_THROWS_AS((void)f.forward(Tensor::zeros({4, 3}), Tensor::zeros({4, 1})), num::ShapeError);
}

TEST_CASE("categorical masses") {
  fl::Categorical c(3);
  c.logits().mutable_data()[0] = 1.0;
  const auto p = c.probabilities();
  double s = 0.0;
  for (double v : p) {
    CHECK(v > 0.0);
    s += v;
  }
  CHECK(s == doctest::Approx(1.0));
  const std::vector<std::size_t> vals{0, 2};
  const Tensor lp = c.log_prob(vals);
  CHECK(lp[0] == doctest::Approx(std::log(p[0])));
  CHECK(lp[1] == doctest::Approx(std::log(p[2])));
}

TEST_CASE("gradients flow through the autoregressive spline density") {
  std::mt19937_64 rng(4);
  fl::AutoregressiveSpline f(3, 2, {}, 8, rng);
  perturb(f, rng, 0.3);
  const Tensor x = randn(10, 3, rng);
  const Tensor c = randn(10, 2, rng);
  const auto params = f.named_parameters("f");
  num::backward(num::mean(fl::log_prob(f, x, c)));
  // Finite-difference check on a handful of parameter entries.
  for (const auto& p : params) {
    Tensor t = p.tensor;
    REQUIRE(t.has_grad());
    for (std::size_t k = 0; k < t.size(); k += std::max<std::size_t>(1, t.size() / 3)) {
      const double g = t.grad()[k];
      num::NoGradGuard guard;
      const double old = t[k];
      t.mutable_data()[k] = old + 1e-5;
      const double hi = num::mean(fl::log_prob(f, x, c)).item();
      t.mutable_data()[k] = old - 1e-5;
      const double lo = num::mean(fl::log_prob(f, x, c)).item();
      t.mutable_data()[k] = old;
      const double fd = (hi - lo) / 2e-5;
      INFO(p.name, "[", k, "]");
      CHECK(std::abs(g - fd) <= std::max(1e-6, 1e-4 * std::max(std::abs(g), std::abs(fd))));
    }
  }
}
