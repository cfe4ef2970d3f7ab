#include "flowharm/nn.hpp"

#include <cmath>

namespace flowharm::nn {

Linear::Linear(std::size_t in, std::size_t out, std::mt19937_64& rng) : in_(in), out_(out) {
  const double bound = in > 0 ? 1.0 / std::sqrt(static_cast<double>(in)) : 0.0;
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> w(in * out), b(out);
  for (auto& v : w) v = u(rng);
  for (auto& v : b) v = u(rng);
  weight_ = num::Tensor::parameter({in, out}, std::move(w));
  bias_ = num::Tensor::parameter({out}, std::move(b));
}

num::Tensor Linear::forward(const num::Tensor& x) const {
  const num::Tensor w = mask_ ? num::mul(weight_, *mask_) : weight_;
  return num::add(num::matmul(x, w), bias_);
}

void Linear::set_mask(std::vector<double> mask) {
  if (mask.size() != in_ * out_) throw num::ShapeError("Linear::set_mask: mask size mismatch");
  auto w = weight_.mutable_data();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] *= mask[i];
  mask_ = num::Tensor({in_, out_}, std::move(mask));
}

void Linear::zero_init(const std::vector<double>& bias) {
  if (bias.size() != out_) throw num::ShapeError("Linear::zero_init: bias size mismatch");
  auto w = weight_.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  auto b = bias_.mutable_data();
  std::copy(bias.begin(), bias.end(), b.begin());
}

void Linear::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + ".weight", weight_});
  out.push_back({prefix + ".bias", bias_});
}

std::vector<num::Tensor> tensors_of(const std::vector<NamedParam>& params) {
  std::vector<num::Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

void check_finite(const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    const auto d = p.tensor.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!std::isfinite(d[i])) {
        throw num::DomainError("non-finite parameter " + p.name + "[" + std::to_string(i) + "]");
      }
    }
  }
}

}  // namespace flowharm::nn
