#pragma once

#include <cstddef>
#include <vector>

#include "flowharm/tensor.hpp"

namespace flowharm::num {

enum class OptimizerKind { Adam, SgdMomentum };

struct AdamOptions {
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;  // decoupled: theta *= (1 - lr * wd) before the update
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct SgdOptions {
  double learning_rate = 1e-1;
  double momentum = 0.9;
};

/// Shared bookkeeping for first-order optimizers over a fixed parameter list.
class Optimizer {
 public:
  explicit Optimizer(std::vector<Tensor> params);
  virtual ~Optimizer() = default;

  virtual void step() = 0;
  void zero_grad();

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  std::size_t step_count() const { return steps_; }
  // Parameters skipped because no gradient reached them.
  std::size_t missing_grad_warnings() const { return missing_; }
  const std::vector<Tensor>& params() const { return params_; }

 protected:
  std::vector<Tensor> params_;
  double lr_ = 0.0;
  std::size_t steps_ = 0;
  std::size_t missing_ = 0;
};

class Adam final : public Optimizer {
 public:
  Adam(std::vector<Tensor> params, AdamOptions opts = {});
  void step() override;

  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
};

class SgdMomentum final : public Optimizer {
 public:
  SgdMomentum(std::vector<Tensor> params, SgdOptions opts = {});
  void step() override;

  const std::vector<double>& velocity(std::size_t i) const { return vel_[i]; }

 private:
  SgdOptions opts_;
  std::vector<std::vector<double>> vel_;
};

/// Staircase schedule: lr * gamma^(number of milestones passed). Milestones
/// are given as fractions of the total epoch count.
class StepSchedule {
 public:
  StepSchedule(double base_lr, std::size_t total_epochs, std::vector<double> milestone_fractions = {0.5, 0.75},
               double gamma = 0.1);
  double rate(std::size_t epoch) const;

 private:
  double base_;
  double gamma_;
  std::vector<std::size_t> milestones_;
};

}  // namespace flowharm::num
