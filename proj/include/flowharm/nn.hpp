#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "flowharm/tensor.hpp"

namespace flowharm::nn {

struct NamedParam {
  std::string name;
  num::Tensor tensor;
};

/// y = x W + b with W of shape [in, out]. An optional constant 0/1 mask of the
/// same shape is multiplied into W on every forward pass.
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng);

  num::Tensor forward(const num::Tensor& x) const;

  void set_mask(std::vector<double> mask);
  // Zero weights and the given bias; used for identity-initialized heads.
  void zero_init(const std::vector<double>& bias);

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const num::Tensor& weight() const { return weight_; }
  const num::Tensor& bias() const { return bias_; }
  const std::optional<num::Tensor>& mask() const { return mask_; }

  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;

 private:
  std::size_t in_ = 0, out_ = 0;
  num::Tensor weight_, bias_;
  std::optional<num::Tensor> mask_;
};

std::vector<num::Tensor> tensors_of(const std::vector<NamedParam>& params);

// Throws num::DomainError naming the first non-finite entry.
void check_finite(const std::vector<NamedParam>& params);

}  // namespace flowharm::nn
