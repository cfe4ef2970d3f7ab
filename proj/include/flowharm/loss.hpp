#pragma once

#include "flowharm/tensor.hpp"

namespace flowharm::num {

// Mean Huber loss of pred - target (quadratic inside |r| <= delta).
Tensor huber_loss(const Tensor& pred, const Tensor& target, double delta = 1.0);

// Mean binary cross-entropy on probabilities, clamped to [1e-7, 1 - 1e-7].
Tensor bce_loss(const Tensor& prob, const Tensor& target);

// Same loss taking logits; the probability is sigmoid(logit).
Tensor bce_with_logits(const Tensor& logit, const Tensor& target);

}  // namespace flowharm::num
