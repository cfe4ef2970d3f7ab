#include "flowharm/flow.hpp"

#include <cmath>
#include <numbers>

namespace flowharm::flows {

using num::Tensor;

std::string to_string(FlowKind k) {
  switch (k) {
    case FlowKind::FixedAffine: return "fixed-affine";
    case FlowKind::Exp: return "exp";
    case FlowKind::LearnedAffine: return "learned-affine";
    case FlowKind::ConditionalAffine: return "conditional-affine";
    case FlowKind::LinearRationalSpline: return "linear-rational-spline";
    case FlowKind::QuadraticRationalSpline: return "quadratic-rational-spline";
    case FlowKind::Composition: return "composition";
  }
  return "unknown";
}

std::vector<nn::NamedParam> FlowTransform::named_parameters(const std::string&) const { return {}; }

std::vector<Tensor> FlowTransform::parameters() const { return nn::tensors_of(named_parameters("")); }

void FlowTransform::check_call(const char* op, const Tensor& v, const Tensor& context) const {
  if (v.rank() != 2 || v.shape()[1] != event_dim()) {
    throw num::ShapeError(std::string(op) + ": expected [n," + std::to_string(event_dim()) + "] input, got " +
                          num::shape_str(v.shape()));
  }
  if (context_dim() > 0 &&
      (context.rank() != 2 || context.shape()[0] != v.shape()[0] || context.shape()[1] != context_dim())) {
    throw num::ShapeError(std::string(op) + ": expected [" + std::to_string(v.shape()[0]) + "," +
                          std::to_string(context_dim()) + "] context, got " + num::shape_str(context.shape()));
  }
  nn::check_finite(named_parameters(to_string(kind())));
}

Tensor no_context(std::size_t n) { return Tensor::zeros({n, 0}); }

// ---- FixedAffine -------------------------------------------------------------

FixedAffine::FixedAffine(std::vector<double> loc, std::vector<double> scale)
    : loc_(std::move(loc)), scale_(std::move(scale)) {
  if (loc_.size() != scale_.size() || loc_.empty()) {
    throw std::invalid_argument("FixedAffine: loc and scale must be non-empty and equally sized");
  }
  for (double s : scale_) {
    if (!(s > 0.0)) throw std::invalid_argument("FixedAffine: scale must be positive");
    log_scale_sum_ += std::log(s);
  }
}

FlowResult FixedAffine::forward(const Tensor& eps, const Tensor& context) const {
  check_call("fixed-affine forward", eps, context);
  const Tensor x = eps * Tensor::vector(scale_) + Tensor::vector(loc_);
  return {x, Tensor::full({eps.rows()}, log_scale_sum_)};
}

FlowResult FixedAffine::inverse(const Tensor& x, const Tensor& context) const {
  check_call("fixed-affine inverse", x, context);
  const Tensor eps = (x - Tensor::vector(loc_)) / Tensor::vector(scale_);
  return {eps, Tensor::full({x.rows()}, -log_scale_sum_)};
}

// ---- Exp -------------------------------------------------------------------

FlowResult ExpTransform::forward(const Tensor& eps, const Tensor& context) const {
  check_call("exp forward", eps, context);
  return {num::exp(eps), num::sum_rows(eps)};
}

FlowResult ExpTransform::inverse(const Tensor& x, const Tensor& context) const {
  check_call("exp inverse", x, context);
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw num::DomainError("exp inverse: non-positive value " + std::to_string(x[i]) + " in row " +
                             std::to_string(i / d));
    }
  }
  const Tensor eps = num::log(x);
  return {eps, num::neg(num::sum_rows(eps))};
}

// ---- LearnedAffine -------------------------------------------------------------

LearnedAffine::LearnedAffine(std::size_t dim)
    : dim_(dim),
      loc_(Tensor::parameter({dim}, std::vector<double>(dim, 0.0))),
      log_scale_(Tensor::parameter({dim}, std::vector<double>(dim, 0.0))) {}

FlowResult LearnedAffine::forward(const Tensor& eps, const Tensor& context) const {
  check_call("learned-affine forward", eps, context);
  const Tensor x = eps * num::exp(log_scale_) + loc_;
  const Tensor ld = num::sum(log_scale_) * Tensor::full({eps.rows()}, 1.0);
  return {x, ld};
}

FlowResult LearnedAffine::inverse(const Tensor& x, const Tensor& context) const {
  check_call("learned-affine inverse", x, context);
  const Tensor eps = (x - loc_) * num::exp(num::neg(log_scale_));
  const Tensor ld = num::neg(num::sum(log_scale_)) * Tensor::full({x.rows()}, 1.0);
  return {eps, ld};
}

std::vector<nn::NamedParam> LearnedAffine::named_parameters(const std::string& prefix) const {
  return {{prefix + ".loc", loc_}, {prefix + ".log_scale", log_scale_}};
}

// ---- ConditionalAffine -----------------------------------------------------------

ConditionalAffine::ConditionalAffine(std::size_t dim, std::size_t context_dim, std::size_t hidden,
                                     std::mt19937_64& rng)
    : dim_(dim),
      context_dim_(context_dim),
      l1_(context_dim, hidden, rng),
      l2_(hidden, hidden, rng),
      head_(hidden, 2 * dim, rng) {
  head_.zero_init(std::vector<double>(2 * dim, 0.0));
}

Tensor ConditionalAffine::loc_scale(const Tensor& context) const {
  constexpr double kSlope = 0.1;
  Tensor h = num::leaky_relu(l1_.forward(context), kSlope);
  h = num::leaky_relu(l2_.forward(h), kSlope);
  return head_.forward(h);
}

FlowResult ConditionalAffine::forward(const Tensor& eps, const Tensor& context) const {
  check_call("conditional-affine forward", eps, context);
  const Tensor ctx = context_dim_ > 0 ? context : no_context(eps.rows());
  const Tensor p = loc_scale(ctx);
  const Tensor loc = num::slice_cols(p, 0, dim_);
  const Tensor ls = num::slice_cols(p, dim_, 2 * dim_);
  return {eps * num::exp(ls) + loc, num::sum_rows(ls)};
}

FlowResult ConditionalAffine::inverse(const Tensor& x, const Tensor& context) const {
  check_call("conditional-affine inverse", x, context);
  const Tensor ctx = context_dim_ > 0 ? context : no_context(x.rows());
  const Tensor p = loc_scale(ctx);
  const Tensor loc = num::slice_cols(p, 0, dim_);
  const Tensor ls = num::slice_cols(p, dim_, 2 * dim_);
  return {(x - loc) * num::exp(num::neg(ls)), num::neg(num::sum_rows(ls))};
}

std::vector<nn::NamedParam> ConditionalAffine::named_parameters(const std::string& prefix) const {
  std::vector<nn::NamedParam> out;
  l1_.collect(prefix + ".net.0", out);
  l2_.collect(prefix + ".net.1", out);
  head_.collect(prefix + ".net.2", out);
  return out;
}

// ---- Compose -----------------------------------------------------------------

Compose::Compose(std::vector<FlowPtr> parts) : parts_(std::move(parts)) {
  if (parts_.empty()) throw std::invalid_argument("compose: no transforms given");
  dim_ = parts_.front()->event_dim();
  for (const auto& p : parts_) {
    if (p->event_dim() != dim_) {
      throw std::invalid_argument("compose: event_dim mismatch (" + std::to_string(dim_) + " vs " +
                                  std::to_string(p->event_dim()) + ")");
    }
    if (p->context_dim() > 0) {
      if (context_dim_ > 0 && p->context_dim() != context_dim_) {
        throw std::invalid_argument("compose: context_dim mismatch");
      }
      context_dim_ = p->context_dim();
    }
  }
}

FlowResult Compose::forward(const Tensor& eps, const Tensor& context) const {
  check_call("compose forward", eps, context);
  Tensor v = eps;
  Tensor ld = Tensor::zeros({eps.rows()});
  for (const auto& p : parts_) {
    auto r = p->forward(v, context);
    v = r.value;
    ld = ld + r.logdet;
  }
  return {v, ld};
}

FlowResult Compose::inverse(const Tensor& x, const Tensor& context) const {
  check_call("compose inverse", x, context);
  Tensor v = x;
  Tensor ld = Tensor::zeros({x.rows()});
  for (auto it = parts_.rbegin(); it != parts_.rend(); ++it) {
    auto r = (*it)->inverse(v, context);
    v = r.value;
    ld = ld + r.logdet;
  }
  return {v, ld};
}

std::vector<nn::NamedParam> Compose::named_parameters(const std::string& prefix) const {
  std::vector<nn::NamedParam> out;
  for (std::size_t i = 0; i < parts_.size(); ++i) {
    auto sub = parts_[i]->named_parameters(prefix + "." + std::to_string(i));
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

FlowPtr compose(std::vector<FlowPtr> parts) { return std::make_shared<Compose>(std::move(parts)); }

// ---- densities ---------------------------------------------------------------

Tensor standard_normal_log_prob(const Tensor& eps) {
  const double c = -0.5 * std::log(2.0 * std::numbers::pi) * static_cast<double>(eps.cols());
  return num::sum_rows(-0.5 * num::square(eps)) + c;
}

Categorical::Categorical(std::size_t categories)
    : logits_(Tensor::parameter({categories}, std::vector<double>(categories, 0.0))) {
  if (categories == 0) throw std::invalid_argument("Categorical: need at least one category");
}

Tensor Categorical::log_prob(std::span<const std::size_t> values) const {
  const std::size_t k = categories();
  const Tensor ls = num::reshape(num::log_softmax(logits_), {1, k});
  const Tensor rows = num::matmul(Tensor::full({values.size(), 1}, 1.0), ls);
  return num::index_select(rows, values);
}

std::vector<double> Categorical::probabilities() const {
  num::NoGradGuard g;
  const Tensor p = num::softmax(logits_);
  return {p.data().begin(), p.data().end()};
}

std::size_t Categorical::sample(std::mt19937_64& rng) const {
  const auto p = probabilities();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng), acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (r < acc) return i;
  }
  return p.size() - 1;
}

Tensor log_prob(const FlowTransform& f, const Tensor& x, const Tensor& context) {
  const auto r = f.inverse(x, context);
  return standard_normal_log_prob(r.value) + r.logdet;
}

}  // namespace flowharm::flows
