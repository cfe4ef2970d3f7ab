#include "flowharm/optim.hpp"

#include <cmath>

namespace flowharm::num {

Optimizer::Optimizer(std::vector<Tensor> params) : params_(std::move(params)) {}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Tensor> params, AdamOptions opts) : Optimizer(std::move(params)), opts_(opts) {
  lr_ = opts.learning_rate;
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++steps_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(steps_));
  const double decay = 1.0 - lr_ * opts_.weight_decay;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) {
      ++missing_;
      continue;
    }
    auto theta = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      theta[i] *= decay;
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * g[i];
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= lr_ * mhat / (std::sqrt(vhat) + opts_.eps);
    }
  }
}

SgdMomentum::SgdMomentum(std::vector<Tensor> params, SgdOptions opts)
    : Optimizer(std::move(params)), opts_(opts) {
  lr_ = opts.learning_rate;
  for (const auto& p : params_) vel_.emplace_back(p.size(), 0.0);
}

void SgdMomentum::step() {
  ++steps_;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) {
      ++missing_;
      continue;
    }
    auto theta = p.mutable_data();
    auto g = p.grad();
    auto& vel = vel_[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      vel[i] = opts_.momentum * vel[i] + g[i];
      theta[i] -= lr_ * vel[i];
    }
  }
}

StepSchedule::StepSchedule(double base_lr, std::size_t total_epochs, std::vector<double> milestone_fractions,
                           double gamma)
    : base_(base_lr), gamma_(gamma) {
  for (double f : milestone_fractions) {
    milestones_.push_back(static_cast<std::size_t>(std::floor(f * static_cast<double>(total_epochs))));
  }
}

double StepSchedule::rate(std::size_t epoch) const {
  double lr = base_;
  for (auto m : milestones_) {
    if (epoch >= m) lr *= gamma_;
  }
  return lr;
}

}  // namespace flowharm::num
