#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "flowharm/nn.hpp"
#include "flowharm/tensor.hpp"

namespace flowharm::flows {

enum class FlowKind {
  FixedAffine,
  Exp,
  LearnedAffine,
  ConditionalAffine,
  LinearRationalSpline,
  QuadraticRationalSpline,
  Composition,
};

std::string to_string(FlowKind k);

/// Output of a batched transform: value has shape [n, d], logdet has shape [n].
struct FlowResult {
  num::Tensor value;
  num::Tensor logdet;
};

/// Invertible map x = f(eps; context) applied row-wise to [n, event_dim]
/// batches. Contexts are [n, context_dim] and ignored when context_dim is 0.
class FlowTransform {
 public:
  virtual ~FlowTransform() = default;

  virtual FlowKind kind() const = 0;
  virtual std::size_t event_dim() const = 0;
  virtual std::size_t context_dim() const { return 0; }

  // logdet = log|det d f / d eps|
  virtual FlowResult forward(const num::Tensor& eps, const num::Tensor& context) const = 0;
  // logdet = log|det d f^{-1} / d x|
  virtual FlowResult inverse(const num::Tensor& x, const num::Tensor& context) const = 0;

  virtual std::vector<nn::NamedParam> named_parameters(const std::string& prefix) const;
  std::vector<num::Tensor> parameters() const;

 protected:
  void check_call(const char* op, const num::Tensor& v, const num::Tensor& context) const;
};

using FlowPtr = std::shared_ptr<FlowTransform>;

// An [n, 0] context for unconditional transforms.
num::Tensor no_context(std::size_t n);

/// x = loc + scale * eps with constant per-dimension loc and scale > 0.
class FixedAffine final : public FlowTransform {
 public:
  FixedAffine(std::vector<double> loc, std::vector<double> scale);

  FlowKind kind() const override { return FlowKind::FixedAffine; }
  std::size_t event_dim() const override { return loc_.size(); }
  FlowResult forward(const num::Tensor& eps, const num::Tensor& context) const override;
  FlowResult inverse(const num::Tensor& x, const num::Tensor& context) const override;

  const std::vector<double>& loc() const { return loc_; }
  const std::vector<double>& scale() const { return scale_; }

 private:
  std::vector<double> loc_, scale_;
  double log_scale_sum_ = 0.0;
};

/// x = exp(eps); the inverse requires x > 0.
class ExpTransform final : public FlowTransform {
 public:
  explicit ExpTransform(std::size_t dim) : dim_(dim) {}

  FlowKind kind() const override { return FlowKind::Exp; }
  std::size_t event_dim() const override { return dim_; }
  FlowResult forward(const num::Tensor& eps, const num::Tensor& context) const override;
  FlowResult inverse(const num::Tensor& x, const num::Tensor& context) const override;

 private:
  std::size_t dim_;
};

/// x = loc + exp(log_scale) * eps with learned per-dimension loc and log_scale,
/// both initialized to zero.
class LearnedAffine final : public FlowTransform {
 public:
  explicit LearnedAffine(std::size_t dim);

  FlowKind kind() const override { return FlowKind::LearnedAffine; }
  std::size_t event_dim() const override { return dim_; }
  FlowResult forward(const num::Tensor& eps, const num::Tensor& context) const override;
  FlowResult inverse(const num::Tensor& x, const num::Tensor& context) const override;
  std::vector<nn::NamedParam> named_parameters(const std::string& prefix) const override;

  num::Tensor& loc() { return loc_; }
  num::Tensor& log_scale() { return log_scale_; }

 private:
  std::size_t dim_;
  num::Tensor loc_, log_scale_;
};

/// Diagonal affine map whose loc and log_scale come from a fully connected
/// network of the context only. The network head starts at zero.
class ConditionalAffine final : public FlowTransform {
 public:
  ConditionalAffine(std::size_t dim, std::size_t context_dim, std::size_t hidden, std::mt19937_64& rng);

  FlowKind kind() const override { return FlowKind::ConditionalAffine; }
  std::size_t event_dim() const override { return dim_; }
  std::size_t context_dim() const override { return context_dim_; }
  FlowResult forward(const num::Tensor& eps, const num::Tensor& context) const override;
  FlowResult inverse(const num::Tensor& x, const num::Tensor& context) const override;
  std::vector<nn::NamedParam> named_parameters(const std::string& prefix) const override;

  // [n, 2d]: loc in columns [0, d), log_scale in [d, 2d).
  num::Tensor loc_scale(const num::Tensor& context) const;

 private:
  std::size_t dim_, context_dim_;
  nn::Linear l1_, l2_, head_;
};

/// Parts applied left to right on forward, right to left on inverse.
class Compose final : public FlowTransform {
 public:
  explicit Compose(std::vector<FlowPtr> parts);

  FlowKind kind() const override { return FlowKind::Composition; }
  std::size_t event_dim() const override { return dim_; }
  std::size_t context_dim() const override { return context_dim_; }
  FlowResult forward(const num::Tensor& eps, const num::Tensor& context) const override;
  FlowResult inverse(const num::Tensor& x, const num::Tensor& context) const override;
  std::vector<nn::NamedParam> named_parameters(const std::string& prefix) const override;

  const std::vector<FlowPtr>& parts() const { return parts_; }

 private:
  std::vector<FlowPtr> parts_;
  std::size_t dim_ = 0, context_dim_ = 0;
};

FlowPtr compose(std::vector<FlowPtr> parts);

// ---- base densities ----------------------------------------------------------

// Row-wise log N(eps; 0, I): [n, d] -> [n].
num::Tensor standard_normal_log_prob(const num::Tensor& eps);

/// Categorical(K, softmax(logits)); K = 2 doubles as the Bernoulli mass.
/// Logits start at zero (uniform).
class Categorical {
 public:
  explicit Categorical(std::size_t categories);

  std::size_t categories() const { return logits_.size(); }
  num::Tensor log_prob(std::span<const std::size_t> values) const;  // [n]
  std::vector<double> probabilities() const;
  std::size_t sample(std::mt19937_64& rng) const;

  num::Tensor& logits() { return logits_; }
  const num::Tensor& logits() const { return logits_; }

 private:
  num::Tensor logits_;
};

// log p(x | context) = log N(f^{-1}(x)) + log|det J_{f^{-1}}(x)|, per row.
num::Tensor log_prob(const FlowTransform& f, const num::Tensor& x, const num::Tensor& context);

}  // namespace flowharm::flows
