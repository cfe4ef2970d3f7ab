#include "flowharm/loss.hpp"

#include <cmath>
#include <vector>

namespace flowharm::num {

Tensor huber_loss(const Tensor& pred, const Tensor& target, double delta) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("huber_loss: shapes " + shape_str(pred.shape()) + " and " + shape_str(target.shape()));
  }
  Tensor r = pred - target;
  std::vector<std::uint8_t> inside(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) inside[i] = std::abs(r[i]) <= delta ? 1 : 0;
  Tensor quad = 0.5 * square(r);
  // delta * (|r| - delta/2); |r| written as r * sign(r) so the sign is a constant.
  std::vector<double> sign(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) sign[i] = r[i] >= 0 ? 1.0 : -1.0;
  Tensor lin = delta * (r * Tensor(r.shape(), std::move(sign)) - 0.5 * delta);
  return mean(where(inside, quad, lin));
}

Tensor bce_loss(const Tensor& prob, const Tensor& target) {
  if (prob.shape() != target.shape()) {
    throw ShapeError("bce_loss: shapes " + shape_str(prob.shape()) + " and " + shape_str(target.shape()));
  }
  constexpr double kEps = 1e-7;
  Tensor p = clamp(prob, kEps, 1.0 - kEps);
  return neg(mean(target * log(p) + (1.0 - target) * log(1.0 - p)));
}

Tensor bce_with_logits(const Tensor& logit, const Tensor& target) { return bce_loss(sigmoid(logit), target); }

}  // namespace flowharm::num
