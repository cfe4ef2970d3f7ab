#pragma once

#include <random>
#include <vector>

#include "flowharm/flow.hpp"

namespace flowharm::flows {

enum class SplineOrder { Linear, Quadratic };

struct SplineSpec {
  SplineOrder order = SplineOrder::Quadratic;
  std::size_t bins = 8;
  double tail_bound = 3.0;  // identity outside [-B, B]

  static constexpr double kMinBinWidth = 1e-3;
  static constexpr double kMinBinHeight = 1e-3;
  static constexpr double kMinDerivative = 1e-3;
  static constexpr double kMinLambda = 0.025;

  // Unnormalized parameters per scalar dimension:
  // widths[K] | heights[K] | derivatives[K-1] | lambdas[K] (linear only).
  std::size_t params_per_dim() const;
  // Raw parameter vector that makes the spline the identity map.
  std::vector<double> identity_params() const;
};

/// Normalized knot geometry for M independent scalar splines.
struct SplineKnots {
  num::Tensor widths, heights;   // [M, K], each row sums to 2B
  num::Tensor left_x, left_y;    // [M, K], left knot of every bin
  num::Tensor derivatives;       // [M, K+1], boundary derivatives fixed at 1
  num::Tensor lambdas;           // [M, K], linear order only
};

SplineKnots make_knots(const num::Tensor& raw, const SplineSpec& spec);

struct ElementwiseResult {
  num::Tensor value;   // [M]
  num::Tensor logdet;  // [M], log|dy/du|
};

// Monotone rational spline applied elementwise: u[i] uses row i of the knots.
ElementwiseResult spline_forward(const num::Tensor& u, const SplineKnots& knots, const SplineSpec& spec);
// Closed-form inverse; logdet is log|du/dy| = -forward logdet.
ElementwiseResult spline_inverse(const num::Tensor& y, const SplineKnots& knots, const SplineSpec& spec);

/// Masked autoregressive conditioner: maps [x | context] to d * P outputs in
/// dimension-major order, where outputs of dimension k only see x_{<k} and the
/// context. Two hidden layers with LeakyReLU, zero-initialized head.
class MadeConditioner {
 public:
  MadeConditioner(std::size_t dim, std::size_t context_dim, std::size_t hidden, std::size_t params_per_dim,
                  const std::vector<double>& head_bias, std::mt19937_64& rng, bool masked = true);

  num::Tensor forward(const num::Tensor& x, const num::Tensor& context) const;
  void collect(const std::string& prefix, std::vector<nn::NamedParam>& out) const;

  std::size_t hidden() const { return hidden_; }
  bool masked() const { return masked_; }

 private:
  std::size_t dim_, context_dim_, hidden_;
  bool masked_;
  nn::Linear l1_, l2_, head_;
};

/// Elementwise spline with free (unconditioned) parameters per dimension.
class ElementwiseSpline final : public FlowTransform {
 public:
  ElementwiseSpline(std::size_t dim, SplineSpec spec);

  FlowKind kind() const override;
  std::size_t event_dim() const override { return dim_; }
  FlowResult forward(const num::Tensor& eps, const num::Tensor& context) const override;
  FlowResult inverse(const num::Tensor& x, const num::Tensor& context) const override;
  std::vector<nn::NamedParam> named_parameters(const std::string& prefix) const override;

  const SplineSpec& spec() const { return spec_; }
  num::Tensor& raw() { return raw_; }

 private:
  FlowResult apply(const num::Tensor& v, bool inverse) const;
  std::size_t dim_;
  SplineSpec spec_;
  num::Tensor raw_;  // [dim, P]
};

/// Autoregressive spline flow. Density evaluation (inverse) is a single
/// conditioner pass; sampling (forward) needs one pass per dimension.
class AutoregressiveSpline final : public FlowTransform {
 public:
  AutoregressiveSpline(std::size_t dim, std::size_t context_dim, SplineSpec spec, std::size_t hidden,
                       std::mt19937_64& rng, bool masked = true);

  FlowKind kind() const override;
  std::size_t event_dim() const override { return dim_; }
  std::size_t context_dim() const override { return context_dim_; }
  FlowResult forward(const num::Tensor& eps, const num::Tensor& context) const override;
  FlowResult inverse(const num::Tensor& x, const num::Tensor& context) const override;
  std::vector<nn::NamedParam> named_parameters(const std::string& prefix) const override;

  const SplineSpec& spec() const { return spec_; }
  const MadeConditioner& conditioner() const { return made_; }

 private:
  SplineKnots knots_for(const num::Tensor& x, const num::Tensor& context) const;
  std::size_t dim_, context_dim_;
  SplineSpec spec_;
  MadeConditioner made_;
};

// Conditioner width: 2 * d with a floor of 8 units.
std::size_t default_hidden_width(std::size_t dim);

}  // namespace flowharm::flows
