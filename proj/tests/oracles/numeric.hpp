#pragma once

#include <Eigen/Dense>

#include <cmath>

//! Finite-difference and one-dimensional search helpers shared by the
//! oracle comparisons.

namespace oracle {

//! Central-difference gradient of a scalar function.
template <typename F>
Eigen::VectorXd fd_gradient(F&& f, Eigen::VectorXd x, double step)
{
  Eigen::VectorXd g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double xk = x[k];
    x[k] = xk + step;
    const double up = f(x);
    x[k] = xk - step;
    const double down = f(x);
    x[k] = xk;
    g[k] = (up - down) / (2.0 * step);
  }
  return g;
}

//! Central-difference Jacobian of a vector function; column k holds the
//! partial derivatives in direction k.
template <typename G>
Eigen::MatrixXd fd_jacobian(G&& g, Eigen::VectorXd x, double step)
{
  const Eigen::VectorXd base = g(x);
  Eigen::MatrixXd jac(base.size(), x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const double xk = x[k];
    x[k] = xk + step;
    const Eigen::VectorXd up = g(x);
    x[k] = xk - step;
    const Eigen::VectorXd down = g(x);
    x[k] = xk;
    jac.col(k) = (up - down) / (2.0 * step);
  }
  return jac;
}

//! Exhaustive argmax over the inclusive grid lo, lo+step, ..., hi.
//! Ties keep the smallest argument.
template <typename F>
double grid_argmax(F&& f, double lo, double hi, double step)
{
  const long n_steps = std::lround((hi - lo) / step);
  double best_x = lo;
  double best = f(lo);
  for (long k = 1; k <= n_steps; ++k) {
    const double x = lo + static_cast<double>(k) * step;
    const double value = f(x);
    if (value > best) {
      best = value;
      best_x = x;
    }
  }
  return best_x;
}

//! Golden-section refinement of a single interior maximum on [lo, hi].
template <typename F>
double refine_argmax(F&& f, double lo, double hi, double tol = 1e-10)
{
  const double ratio = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo;
  double b = hi;
  double c = b - ratio * (b - a);
  double d = a + ratio * (b - a);
  double fc = f(c);
  double fd = f(d);
  while (b - a > tol) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - ratio * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + ratio * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

}  // namespace oracle
