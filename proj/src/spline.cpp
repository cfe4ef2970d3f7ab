#include "flowharm/spline.hpp"

#include <algorithm>
#include <cmath>

namespace flowharm::flows {

using num::Tensor;

std::size_t SplineSpec::params_per_dim() const {
  return order == SplineOrder::Linear ? 4 * bins - 1 : 3 * bins - 1;
}

std::vector<double> SplineSpec::identity_params() const {
  std::vector<double> p(params_per_dim(), 0.0);
  // softplus(r) + min_derivative == 1
  const double r = std::log(std::expm1(1.0 - kMinDerivative));
  for (std::size_t i = 2 * bins; i < 3 * bins - 1; ++i) p[i] = r;
  return p;
}

namespace {

Tensor upper_ones(std::size_t k) {
  std::vector<double> u(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i; j < k; ++j) u[i * k + j] = 1.0;
  }
  return Tensor({k, k}, std::move(u));
}

// Index of the bin containing v in each row, from the left knots.
std::vector<std::size_t> locate(const Tensor& left, const Tensor& v) {
  const std::size_t m = left.rows(), k = left.cols();
  std::vector<std::size_t> idx(m, 0);
  for (std::size_t r = 0; r < m; ++r) {
    std::size_t b = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (left.at(r, j) <= v[r]) b = j;
    }
    idx[r] = b;
  }
  return idx;
}

std::vector<std::uint8_t> inside_mask(const Tensor& v, double bound) {
  std::vector<std::uint8_t> m(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m[i] = (v[i] >= -bound && v[i] <= bound) ? 1 : 0;
  return m;
}

// Per-element view of the active bin.
struct Bin {
  Tensor x, w, y, h, d0, d1, s;
  std::vector<std::size_t> index;
};

Bin gather_bin(const SplineKnots& kn, std::vector<std::size_t> k) {
  std::vector<std::size_t> k1(k.size());
  for (std::size_t i = 0; i < k.size(); ++i) k1[i] = k[i] + 1;
  Bin b;
  b.x = num::index_select(kn.left_x, k);
  b.w = num::index_select(kn.widths, k);
  b.y = num::index_select(kn.left_y, k);
  b.h = num::index_select(kn.heights, k);
  b.d0 = num::index_select(kn.derivatives, k);
  b.d1 = num::index_select(kn.derivatives, k1);
  b.s = b.h / b.w;
  b.index = std::move(k);
  return b;
}

// Linear rational segment between (w_lo, y_lo) and (w_hi, y_hi) on a local
// coordinate phi in [0, 1]; theta = off + span * phi.
struct Segment {
  Tensor w_lo, y_lo, w_hi, y_hi, span, off;
};

// The linear rational spline splits each bin at lambda into two segments
// joined at the intermediate point (w_c, y_c).
struct LinearBin {
  Tensor lam, wb, wc, yb, yc;
};

LinearBin linear_bin(const SplineKnots& kn, const Bin& b) {
  LinearBin lb;
  lb.lam = num::index_select(kn.lambdas, b.index);
  lb.wb = num::sqrt(b.d0 / b.d1);
  lb.wc = (lb.lam * b.d0 + (1.0 - lb.lam) * lb.wb * b.d1) / b.s;
  lb.yb = b.y + b.h;
  lb.yc = ((1.0 - lb.lam) * b.y + lb.lam * lb.wb * lb.yb) / ((1.0 - lb.lam) + lb.lam * lb.wb);
  return lb;
}

Segment select_segment(std::span<const std::uint8_t> first, const Bin& b, const LinearBin& lb) {
  const std::size_t m = first.size();
  const Tensor ones = Tensor::full({m}, 1.0);
  const Tensor zeros = Tensor::zeros({m});
  Segment s;
  s.w_lo = num::where(first, ones, lb.wc);
  s.y_lo = num::where(first, b.y, lb.yc);
  s.w_hi = num::where(first, lb.wc, lb.wb);
  s.y_hi = num::where(first, lb.yc, lb.yb);
  s.span = num::where(first, lb.lam, 1.0 - lb.lam);
  s.off = num::where(first, zeros, lb.lam);
  return s;
}

// log dy/du of the linear rational segment at phi.
Tensor segment_logderiv(const Segment& s, const Tensor& phi, const Tensor& bin_width) {
  const Tensor den = s.w_lo * (1.0 - phi) + s.w_hi * phi;
  return num::log(s.w_lo) + num::log(s.w_hi) + num::log(s.y_hi - s.y_lo) - 2.0 * num::log(den) -
         num::log(s.span) - num::log(bin_width);
}

// log dy/du of the rational quadratic bin at theta.
Tensor rq_logderiv(const Bin& b, const Tensor& theta) {
  const Tensor t1m = theta * (1.0 - theta);
  const Tensor den = b.s + (b.d1 + b.d0 - 2.0 * b.s) * t1m;
  const Tensor dnum = b.d1 * num::square(theta) + 2.0 * b.s * t1m + b.d0 * num::square(1.0 - theta);
  return 2.0 * num::log(b.s) + num::log(dnum) - 2.0 * num::log(den);
}

void check_rows(const char* op, const Tensor& v, const SplineKnots& kn) {
  if (v.rank() != 1 || kn.widths.rows() != v.size()) {
    throw num::ShapeError(std::string(op) + ": input " + num::shape_str(v.shape()) + " does not match knots " +
                          num::shape_str(kn.widths.shape()));
  }
}

}  // namespace

SplineKnots make_knots(const Tensor& raw, const SplineSpec& spec) {
  const std::size_t k = spec.bins;
  if (raw.rank() != 2 || raw.cols() != spec.params_per_dim()) {
    throw num::ShapeError("make_knots: expected [M," + std::to_string(spec.params_per_dim()) + "] parameters, got " +
                          num::shape_str(raw.shape()));
  }
  const std::size_t m = raw.rows();
  const double span = 2.0 * spec.tail_bound;
  const double kd = static_cast<double>(k);
  const Tensor u = upper_ones(k);

  SplineKnots kn;
  kn.widths = (num::softmax(num::slice_cols(raw, 0, k)) * (1.0 - kd * SplineSpec::kMinBinWidth) +
               SplineSpec::kMinBinWidth) *
              span;
  kn.heights = (num::softmax(num::slice_cols(raw, k, 2 * k)) * (1.0 - kd * SplineSpec::kMinBinHeight) +
                SplineSpec::kMinBinHeight) *
               span;
  kn.left_x = num::matmul(kn.widths, u) - kn.widths - spec.tail_bound;
  kn.left_y = num::matmul(kn.heights, u) - kn.heights - spec.tail_bound;
  const Tensor inner = num::softplus(num::slice_cols(raw, 2 * k, 3 * k - 1)) + SplineSpec::kMinDerivative;
  const Tensor edge = Tensor::full({m, 1}, 1.0);
  kn.derivatives = num::concat_cols({edge, inner, edge});
  if (spec.order == SplineOrder::Linear) {
    kn.lambdas = num::sigmoid(num::slice_cols(raw, 3 * k - 1, 4 * k - 1)) * (1.0 - 2.0 * SplineSpec::kMinLambda) +
                 SplineSpec::kMinLambda;
  }
  return kn;
}

ElementwiseResult spline_forward(const Tensor& u, const SplineKnots& kn, const SplineSpec& spec) {
  check_rows("spline_forward", u, kn);
  const std::size_t m = u.size();
  const auto inside = inside_mask(u, spec.tail_bound);
  const Tensor zeros = Tensor::zeros({m});
  const Tensor uin = num::where(inside, u, zeros);
  const Bin b = gather_bin(kn, locate(kn.left_x, uin));
  const Tensor theta = (uin - b.x) / b.w;

  Tensor y, logd;
  if (spec.order == SplineOrder::Quadratic) {
    const Tensor t1m = theta * (1.0 - theta);
    const Tensor num_ = b.h * (b.s * num::square(theta) + b.d0 * t1m);
    const Tensor den = b.s + (b.d1 + b.d0 - 2.0 * b.s) * t1m;
    y = b.y + num_ / den;
    logd = rq_logderiv(b, theta);
  } else {
    const LinearBin lb = linear_bin(kn, b);
    std::vector<std::uint8_t> first(m);
    for (std::size_t i = 0; i < m; ++i) first[i] = theta[i] <= lb.lam[i] ? 1 : 0;
    const Segment s = select_segment(first, b, lb);
    const Tensor phi = (theta - s.off) / s.span;
    const Tensor den = s.w_lo * (1.0 - phi) + s.w_hi * phi;
    y = (s.w_lo * s.y_lo * (1.0 - phi) + s.w_hi * s.y_hi * phi) / den;
    logd = segment_logderiv(s, phi, b.w);
  }
  return {num::where(inside, y, u), num::where(inside, logd, zeros)};
}

ElementwiseResult spline_inverse(const Tensor& y, const SplineKnots& kn, const SplineSpec& spec) {
  check_rows("spline_inverse", y, kn);
  const std::size_t m = y.size();
  const auto inside = inside_mask(y, spec.tail_bound);
  const Tensor zeros = Tensor::zeros({m});
  const Tensor yin = num::where(inside, y, zeros);
  const Bin b = gather_bin(kn, locate(kn.left_y, yin));

  Tensor x, logd;
  if (spec.order == SplineOrder::Quadratic) {
    // Root of a θ² + b θ + c = 0 inside the bin.
    const Tensor dy = yin - b.y;
    const Tensor c0 = b.d1 + b.d0 - 2.0 * b.s;
    const Tensor qa = b.h * (b.s - b.d0) + dy * c0;
    const Tensor qb = b.h * b.d0 - dy * c0;
    const Tensor qc = num::neg(b.s * dy);
    const Tensor disc = num::clamp(num::square(qb) - 4.0 * qa * qc, 0.0, HUGE_VAL);
    const Tensor theta0 = (2.0 * qc) / (num::neg(qb) - num::sqrt(disc));
    // One Newton step on the forward map removes the cancellation error of the
    // closed-form root when bins are very steep or very flat.
    const Tensor t1m = theta0 * (1.0 - theta0);
    const Tensor fit = b.h * (b.s * num::square(theta0) + b.d0 * t1m) / (b.s + c0 * t1m);
    const Tensor theta = theta0 - (fit - dy) / (num::exp(rq_logderiv(b, theta0)) * b.w);
    x = b.x + theta * b.w;
    logd = num::neg(rq_logderiv(b, theta));
  } else {
    const LinearBin lb = linear_bin(kn, b);
    std::vector<std::uint8_t> first(m);
    for (std::size_t i = 0; i < m; ++i) first[i] = yin[i] <= lb.yc[i] ? 1 : 0;
    const Segment s = select_segment(first, b, lb);
    const Tensor a = s.w_lo * (yin - s.y_lo);
    const Tensor phi0 = a / (a + s.w_hi * (s.y_hi - yin));
    const Tensor den0 = s.w_lo * (1.0 - phi0) + s.w_hi * phi0;
    const Tensor fit = (s.w_lo * s.y_lo * (1.0 - phi0) + s.w_hi * s.y_hi * phi0) / den0;
    const Tensor phi = phi0 - (fit - yin) * num::square(den0) / (s.w_lo * s.w_hi * (s.y_hi - s.y_lo));
    const Tensor theta = s.off + s.span * phi;
    x = b.x + theta * b.w;
    logd = num::neg(segment_logderiv(s, phi, b.w));
  }
  return {num::where(inside, x, y), num::where(inside, logd, zeros)};
}

// ---- MADE ------------------------------------------------------------------

std::size_t default_hidden_width(std::size_t dim) { return std::max<std::size_t>(2 * dim, 8); }

MadeConditioner::MadeConditioner(std::size_t dim, std::size_t context_dim, std::size_t hidden,
                                 std::size_t params_per_dim, const std::vector<double>& head_bias,
                                 std::mt19937_64& rng, bool masked)
    : dim_(dim),
      context_dim_(context_dim),
      hidden_(hidden),
      masked_(masked),
      l1_(dim + context_dim, hidden, rng),
      l2_(hidden, hidden, rng),
      head_(hidden, dim * params_per_dim, rng) {
  if (head_bias.size() != params_per_dim) throw std::invalid_argument("MadeConditioner: head bias size mismatch");
  std::vector<double> bias;
  for (std::size_t j = 0; j < dim; ++j) bias.insert(bias.end(), head_bias.begin(), head_bias.end());
  head_.zero_init(bias);
  if (!masked) return;

  // Degrees: x_j -> j + 1, context -> 0, hidden units cycle through 0..d-1.
  std::vector<std::size_t> in_deg(dim + context_dim, 0), hid_deg(hidden);
  for (std::size_t j = 0; j < dim; ++j) in_deg[j] = j + 1;
  for (std::size_t h = 0; h < hidden; ++h) hid_deg[h] = h % dim;

  const std::size_t nin = dim + context_dim, nout = dim * params_per_dim;
  std::vector<double> m1(nin * hidden), m2(hidden * hidden), m3(hidden * nout);
  for (std::size_t i = 0; i < nin; ++i) {
    for (std::size_t h = 0; h < hidden; ++h) m1[i * hidden + h] = in_deg[i] <= hid_deg[h] ? 1.0 : 0.0;
  }
  for (std::size_t a = 0; a < hidden; ++a) {
    for (std::size_t b = 0; b < hidden; ++b) m2[a * hidden + b] = hid_deg[a] <= hid_deg[b] ? 1.0 : 0.0;
  }
  for (std::size_t h = 0; h < hidden; ++h) {
    for (std::size_t o = 0; o < nout; ++o) m3[h * nout + o] = hid_deg[h] <= o / params_per_dim ? 1.0 : 0.0;
  }
  l1_.set_mask(std::move(m1));
  l2_.set_mask(std::move(m2));
  head_.set_mask(std::move(m3));
}

Tensor MadeConditioner::forward(const Tensor& x, const Tensor& context) const {
  constexpr double kSlope = 0.1;
  const Tensor in = context_dim_ > 0 ? num::concat_cols({x, context}) : x;
  Tensor h = num::leaky_relu(l1_.forward(in), kSlope);
  h = num::leaky_relu(l2_.forward(h), kSlope);
  return head_.forward(h);
}

void MadeConditioner::collect(const std::string& prefix, std::vector<nn::NamedParam>& out) const {
  l1_.collect(prefix + ".0", out);
  l2_.collect(prefix + ".1", out);
  head_.collect(prefix + ".2", out);
}

// ---- ElementwiseSpline ---------------------------------------------------------

ElementwiseSpline::ElementwiseSpline(std::size_t dim, SplineSpec spec) : dim_(dim), spec_(spec) {
  const auto id = spec.identity_params();
  std::vector<double> raw;
  for (std::size_t j = 0; j < dim; ++j) raw.insert(raw.end(), id.begin(), id.end());
  raw_ = Tensor::parameter({dim, spec.params_per_dim()}, std::move(raw));
}

FlowKind ElementwiseSpline::kind() const {
  return spec_.order == SplineOrder::Linear ? FlowKind::LinearRationalSpline : FlowKind::QuadraticRationalSpline;
}

FlowResult ElementwiseSpline::apply(const Tensor& v, bool inverse) const {
  const std::size_t n = v.rows();
  // Row i*d + j of the knot table belongs to dimension j.
  std::vector<double> sel(n * dim_ * dim_, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim_; ++j) sel[(i * dim_ + j) * dim_ + j] = 1.0;
  }
  const Tensor raw = num::matmul(Tensor({n * dim_, dim_}, std::move(sel)), raw_);
  const SplineKnots kn = make_knots(raw, spec_);
  const Tensor flat = num::reshape(v, {n * dim_});
  const auto r = inverse ? spline_inverse(flat, kn, spec_) : spline_forward(flat, kn, spec_);
  return {num::reshape(r.value, {n, dim_}), num::sum_rows(num::reshape(r.logdet, {n, dim_}))};
}

FlowResult ElementwiseSpline::forward(const Tensor& eps, const Tensor& context) const {
  check_call("spline forward", eps, context);
  return apply(eps, false);
}

FlowResult ElementwiseSpline::inverse(const Tensor& x, const Tensor& context) const {
  check_call("spline inverse", x, context);
  return apply(x, true);
}

std::vector<nn::NamedParam> ElementwiseSpline::named_parameters(const std::string& prefix) const {
  return {{prefix + ".raw", raw_}};
}

// ---- AutoregressiveSpline -------------------------------------------------------

AutoregressiveSpline::AutoregressiveSpline(std::size_t dim, std::size_t context_dim, SplineSpec spec,
                                           std::size_t hidden, std::mt19937_64& rng, bool masked)
    : dim_(dim),
      context_dim_(context_dim),
      spec_(spec),
      made_(dim, context_dim, hidden, spec.params_per_dim(), spec.identity_params(), rng, masked) {}

FlowKind AutoregressiveSpline::kind() const {
  return spec_.order == SplineOrder::Linear ? FlowKind::LinearRationalSpline : FlowKind::QuadraticRationalSpline;
}

SplineKnots AutoregressiveSpline::knots_for(const Tensor& x, const Tensor& context) const {
  const Tensor raw = made_.forward(x, context);
  return make_knots(num::reshape(raw, {x.rows() * dim_, spec_.params_per_dim()}), spec_);
}

FlowResult AutoregressiveSpline::inverse(const Tensor& x, const Tensor& context) const {
  check_call("autoregressive spline inverse", x, context);
  const std::size_t n = x.rows();
  const SplineKnots kn = knots_for(x, context);
  const auto r = spline_inverse(num::reshape(x, {n * dim_}), kn, spec_);
  return {num::reshape(r.value, {n, dim_}), num::sum_rows(num::reshape(r.logdet, {n, dim_}))};
}

FlowResult AutoregressiveSpline::forward(const Tensor& eps, const Tensor& context) const {
  check_call("autoregressive spline forward", eps, context);
  const std::size_t n = eps.rows();
  const Tensor flat = num::reshape(eps, {n * dim_});
  std::vector<double> xs(n * dim_, 0.0);
  // Pass k fixes column k; parameters of dimension k only read columns < k,
  // so the final pass sees the completed prefix for every dimension.
  for (std::size_t k = 0; k + 1 < dim_; ++k) {
    num::NoGradGuard guard;
    const SplineKnots kn = knots_for(Tensor({n, dim_}, xs), context);
    const auto r = spline_forward(flat, kn, spec_);
    for (std::size_t i = 0; i < n; ++i) xs[i * dim_ + k] = r.value[i * dim_ + k];
  }
  const SplineKnots kn = knots_for(Tensor({n, dim_}, std::move(xs)), context);
  const auto r = spline_forward(flat, kn, spec_);
  return {num::reshape(r.value, {n, dim_}), num::sum_rows(num::reshape(r.logdet, {n, dim_}))};
}

std::vector<nn::NamedParam> AutoregressiveSpline::named_parameters(const std::string& prefix) const {
  std::vector<nn::NamedParam> out;
  made_.collect(prefix + ".made", out);
  return out;
}

}  // namespace flowharm::flows
