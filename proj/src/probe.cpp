#include "flowharm/probe.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace flowharm::flows {

namespace {

constexpr double kStep = 1e-5;
constexpr double kUpperTol = 1e-8;
constexpr double kLogdetTol = 1e-4;
constexpr std::size_t kMaxDim = 16;

std::vector<double> run_forward(const FlowTransform& f, std::vector<double> eps, const num::Tensor& ctx) {
  const std::size_t d = eps.size();
  const auto r = f.forward(num::Tensor({1, d}, std::move(eps)), ctx);
  return {r.value.data().begin(), r.value.data().end()};
}

}  // namespace

ProbeReport jacobian_probe_report(const FlowTransform& f, std::span<const double> eps,
                                  std::span<const double> context) {
  num::NoGradGuard guard;
  const std::size_t d = f.event_dim();
  if (d > kMaxDim || eps.size() != d || context.size() != f.context_dim()) {
    throw num::ShapeError("jacobian_probe: expected event_dim <= 16 with matching eps/context sizes");
  }
  const num::Tensor ctx({1, context.size()}, {context.begin(), context.end()});
  const std::vector<double> e0(eps.begin(), eps.end());

  ProbeReport rep;
  rep.dim = d;
  rep.jacobian.assign(d * d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    auto hi = e0, lo = e0;
    hi[j] += kStep;
    lo[j] -= kStep;
    const auto xh = run_forward(f, hi, ctx), xl = run_forward(f, lo, ctx);
    for (std::size_t i = 0; i < d; ++i) rep.jacobian[i * d + j] = (xh[i] - xl[i]) / (2.0 * kStep);
  }
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i + 1; j < d; ++j) rep.max_upper = std::max(rep.max_upper, std::abs(rep.jacobian[i * d + j]));
  }

  Eigen::MatrixXd jm(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) jm(i, j) = rep.jacobian[i * d + j];
  }
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(jm);
  const Eigen::MatrixXd& packed = lu.matrixLU();
  for (std::size_t i = 0; i < d; ++i) rep.fd_logdet += std::log(std::abs(packed(i, i)));

  rep.reported_logdet = f.forward(num::Tensor({1, d}, e0), ctx).logdet[0];
  rep.logdet_error = std::abs(rep.fd_logdet - rep.reported_logdet) / std::max(1.0, std::abs(rep.reported_logdet));
  rep.passed = rep.max_upper < kUpperTol && rep.logdet_error < kLogdetTol && std::isfinite(rep.fd_logdet);
  return rep;
}

bool jacobian_probe(const FlowTransform& f, std::span<const double> eps, std::span<const double> context) {
  return jacobian_probe_report(f, eps, context).passed;
}

}  // namespace flowharm::flows
