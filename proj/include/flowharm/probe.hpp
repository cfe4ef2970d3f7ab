#pragma once

#include <span>
#include <vector>

#include "flowharm/flow.hpp"

namespace flowharm::flows {

struct ProbeReport {
  bool passed = false;
  std::size_t dim = 0;
  std::vector<double> jacobian;      // [d, d] row-major, d x_i / d eps_j
  double max_upper = 0.0;            // largest |J_ij| with j > i
  double fd_logdet = 0.0;            // log|det J| from the finite-difference Jacobian
  double reported_logdet = 0.0;
  double logdet_error = 0.0;         // |fd - reported| / max(1, |reported|)
};

// Finite-difference check of forward at a single point: the Jacobian must be
// lower triangular and its log|det| must match the transform's own logdet.
ProbeReport jacobian_probe_report(const FlowTransform& f, std::span<const double> eps,
                                  std::span<const double> context);
bool jacobian_probe(const FlowTransform& f, std::span<const double> eps, std::span<const double> context);

}  // namespace flowharm::flows
