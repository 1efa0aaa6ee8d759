#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

namespace mechlearn {

struct LmOptions {
  int max_iterations = 500;
  // Converged once an accepted step lowers the SSE by less than this fraction.
  double relative_sse_tolerance = 1e-10;
  // Absolute floor below which the fit is exact for all practical purposes.
  double absolute_sse_tolerance = 1e-28;
  // Dimensionless; scales diag(J^T J).
  double initial_damping = 1e-3;
  double gradient_tolerance = 1e-12;
  double jacobian_step = 1e-7;
};

struct LmResult {
  Eigen::VectorXd x;
  double sse = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

/// Unconstrained Levenberg-Marquardt on sum of squared residuals. `residuals`
/// maps a parameter vector to a residual vector of fixed length. Jacobians are
/// taken by central differences. Damping follows Marquardt's diagonal scaling.
template <class ResidualFn>
LmResult levenberg_marquardt(ResidualFn&& residuals, Eigen::VectorXd x0, const LmOptions& opt = {}) {
  LmResult out;
  const Eigen::Index n = x0.size();
  Eigen::VectorXd x = std::move(x0);
  Eigen::VectorXd r = residuals(x);
  double sse = r.squaredNorm();
  if (!std::isfinite(sse)) {
    out.x = x;
    return out;
  }
  if (n == 0 || sse <= opt.absolute_sse_tolerance) {
    out.x = x;
    out.sse = sse;
    out.converged = true;
    return out;
  }

  const Eigen::Index m = r.size();
  Eigen::MatrixXd jac(m, n);
  auto jacobian = [&](const Eigen::VectorXd& at) {
    Eigen::VectorXd probe = at;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double h = opt.jacobian_step * std::max(1.0, std::abs(at[j]));
      probe[j] = at[j] + h;
      const Eigen::VectorXd rp = residuals(probe);
      probe[j] = at[j] - h;
      const Eigen::VectorXd rm = residuals(probe);
      probe[j] = at[j];
      jac.col(j) = (rp - rm) / (2.0 * h);
    }
  };

  double mu = opt.initial_damping;
  bool need_jacobian = true;
  Eigen::MatrixXd jtj;
  Eigen::VectorXd grad;
  int it = 0;
  for (; it < opt.max_iterations; ++it) {
    if (need_jacobian) {
      jacobian(x);
      jtj = jac.transpose() * jac;
      grad = jac.transpose() * r;
      need_jacobian = false;
      // Scale-free gradient test: largest cosine between r and a Jacobian column.
      double max_cos = 0.0;
      const double rnorm = std::sqrt(sse);
      for (Eigen::Index j = 0; j < n; ++j) {
        const double cn = std::sqrt(jtj(j, j));
        if (cn > 0.0) max_cos = std::max(max_cos, std::abs(grad[j]) / (cn * rnorm));
      }
      if (max_cos <= opt.gradient_tolerance) {
        out.converged = true;
        break;
      }
    }

    Eigen::MatrixXd lhs = jtj;
    for (Eigen::Index j = 0; j < n; ++j) lhs(j, j) += mu * std::max(jtj(j, j), 1e-12);
    const Eigen::VectorXd step = lhs.ldlt().solve(-grad);
    const Eigen::VectorXd trial = x + step;
    const Eigen::VectorXd r_trial = residuals(trial);
    const double sse_trial = r_trial.squaredNorm();

    if (std::isfinite(sse_trial) && sse_trial < sse) {
      const double rel = (sse - sse_trial) / sse;
      x = trial;
      r = r_trial;
      sse = sse_trial;
      mu = std::max(mu / 3.0, 1e-15);
      need_jacobian = true;
      if (rel < opt.relative_sse_tolerance || sse <= opt.absolute_sse_tolerance) {
        out.converged = true;
        ++it;
        break;
      }
    } else {
      mu *= 4.0;
      // No descent at any damping: x is stationary to working precision.
      if (mu > 1e16) {
        out.converged = true;
        ++it;
        break;
      }
    }
  }
  out.x = x;
  out.sse = sse;
  out.iterations = it;
  return out;
}

}  // namespace mechlearn
