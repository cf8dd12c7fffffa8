#pragma once

#include "markhaz/core_data.hpp"
#include "oracles/naive_estimator.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

//! Textbook proportional hazards model for one-record-per-subject data,
//! fit with its own Newton loop over direct O(n^2) risk sums, plus the
//! Lin-Wei robust (sandwich) variance.  Per-subject event weights and
//! risk weights generalize the partial likelihood just far enough to
//! cover kernel-weighted events; by default both are one.

namespace oracle {

struct CoxData {
  std::vector<double> time;
  std::vector<int> status;
  Eigen::MatrixXd z;                 //!< n x p
  std::vector<double> event_weight;  //!< empty means all ones
  std::vector<double> risk_weight;   //!< empty means all ones

  int n() const { return static_cast<int>(time.size()); }
  int p() const { return static_cast<int>(z.cols()); }
  double we(int i) const { return event_weight.empty() ? 1.0 : event_weight[i]; }
  double wr(int i) const { return risk_weight.empty() ? 1.0 : risk_weight[i]; }
};

//! Flatten a one-record-per-subject dataset into the oracle's arrays,
//! optionally attaching localized event weights K_h(V_i - v).
inline CoxData cox_view(const markhaz::AnalyticalDataset& data)
{
  const int n = data.n();
  CoxData out;
  out.time.resize(n);
  out.status.resize(n);
  out.z = data.covariates;
  std::vector<int> seen(n, 0);
  for (const auto& rec : data.records) {
    if (seen[rec.subject]++)
      throw std::invalid_argument("cox_view needs one record per subject");
    out.time[rec.subject] = rec.time;
    out.status[rec.subject] = rec.observed ? 1 : 0;
  }
  return out;
}

inline CoxData cox_view_localized(const markhaz::AnalyticalDataset& data,
                                  double v, markhaz::KernelKind kind, double h)
{
  CoxData out = cox_view(data);
  out.event_weight.resize(out.time.size(), 0.0);
  for (const auto& rec : data.records)
    if (rec.observed)
      out.event_weight[rec.subject] = kernel_weight(kind, h, *rec.mark, v);
  return out;
}

struct CoxRisk {
  double s0 = 0.0;
  Eigen::VectorXd s1;
  Eigen::MatrixXd s2;
};

inline CoxRisk cox_risk(const CoxData& d, double t, const Eigen::VectorXd& beta)
{
  CoxRisk out;
  out.s1 = Eigen::VectorXd::Zero(d.p());
  out.s2 = Eigen::MatrixXd::Zero(d.p(), d.p());
  for (int j = 0; j < d.n(); ++j) {
    if (d.time[j] < t)
      continue;
    const Eigen::VectorXd zj = d.z.row(j).transpose();
    const double w = d.wr(j) * std::exp(beta.dot(zj));
    out.s0 += w;
    out.s1 += w * zj;
    out.s2 += w * (zj * zj.transpose());
  }
  return out;
}

inline double cox_loglik(const CoxData& d, const Eigen::VectorXd& beta)
{
  double total = 0.0;
  for (int i = 0; i < d.n(); ++i) {
    if (!d.status[i] || d.we(i) == 0.0)
      continue;
    const Eigen::VectorXd zi = d.z.row(i).transpose();
    total += d.we(i) * (beta.dot(zi) - std::log(cox_risk(d, d.time[i], beta).s0));
  }
  return total;
}

inline Eigen::VectorXd cox_score(const CoxData& d, const Eigen::VectorXd& beta)
{
  Eigen::VectorXd total = Eigen::VectorXd::Zero(d.p());
  for (int i = 0; i < d.n(); ++i) {
    if (!d.status[i] || d.we(i) == 0.0)
      continue;
    const Eigen::VectorXd zi = d.z.row(i).transpose();
    const CoxRisk risk = cox_risk(d, d.time[i], beta);
    total += d.we(i) * (zi - risk.s1 / risk.s0);
  }
  return total;
}

//! Negated Hessian on the sum scale (the observed information).
inline Eigen::MatrixXd cox_information(const CoxData& d,
                                       const Eigen::VectorXd& beta)
{
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(d.p(), d.p());
  for (int i = 0; i < d.n(); ++i) {
    if (!d.status[i] || d.we(i) == 0.0)
      continue;
    const CoxRisk risk = cox_risk(d, d.time[i], beta);
    const Eigen::VectorXd zbar = risk.s1 / risk.s0;
    total += d.we(i) * (risk.s2 / risk.s0 - zbar * zbar.transpose());
  }
  return total;
}

struct CoxFit {
  Eigen::VectorXd beta;
  double loglik = 0.0;
  Eigen::MatrixXd information;
  bool converged = false;
  int iterations = 0;
};

inline CoxFit cox_fit(const CoxData& d, double tol = 1e-9,
                      int max_iter = 200)
{
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(d.p());
  double cur = cox_loglik(d, beta);
  CoxFit fit;
  for (int iter = 0; iter < max_iter; ++iter) {
    const Eigen::VectorXd u = cox_score(d, beta);
    if (u.cwiseAbs().maxCoeff() < tol) {
      fit.converged = true;
      break;
    }
    const Eigen::VectorXd step = cox_information(d, beta).ldlt().solve(u);
    if (step.cwiseAbs().maxCoeff() < 1e-4) {
      // inside the quadratic basin the improvement test drowns in rounding,
      // so take the pure Newton step
      beta += step;
      cur = cox_loglik(d, beta);
    } else {
      double alpha = 1.0;
      for (int half = 0; half < 40; ++half) {
        const double trial = cox_loglik(d, beta + alpha * step);
        if (trial > cur) {
          beta += alpha * step;
          cur = trial;
          break;
        }
        alpha *= 0.5;
      }
    }
    fit.iterations = iter + 1;
  }
  fit.beta = beta;
  fit.loglik = cur;
  fit.information = cox_information(d, beta);
  return fit;
}

//! Classical Breslow jumps: at each distinct event time, the summed event
//! weights over the risk sum there.  Returned in ascending time order.
inline std::vector<std::pair<double, double>> cox_breslow(
  const CoxData& d, const Eigen::VectorXd& beta)
{
  std::vector<double> times;
  for (int i = 0; i < d.n(); ++i)
    if (d.status[i] && d.we(i) != 0.0)
      times.push_back(d.time[i]);
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  std::vector<std::pair<double, double>> jumps;
  jumps.reserve(times.size());
  for (double t : times) {
    double mass = 0.0;
    for (int i = 0; i < d.n(); ++i)
      if (d.status[i] && d.time[i] == t)
        mass += d.we(i);
    jumps.emplace_back(t, mass / cox_risk(d, t, beta).s0);
  }
  return jumps;
}

//! Per-subject score residuals: the event part minus the accumulated
//! compensator part over all event times at or below the subject's own.
inline std::vector<Eigen::VectorXd> cox_score_residuals(
  const CoxData& d, const Eigen::VectorXd& beta)
{
  std::vector<Eigen::VectorXd> resid(
    static_cast<std::size_t>(d.n()), Eigen::VectorXd::Zero(d.p()));
  for (int i = 0; i < d.n(); ++i) {
    const Eigen::VectorXd zi = d.z.row(i).transpose();
    const double ei = d.wr(i) * std::exp(beta.dot(zi));
    Eigen::VectorXd w = Eigen::VectorXd::Zero(d.p());
    if (d.status[i])
      w += d.we(i) * (zi - cox_risk(d, d.time[i], beta).s1 /
                             cox_risk(d, d.time[i], beta).s0);
    for (int k = 0; k < d.n(); ++k) {
      if (!d.status[k] || d.we(k) == 0.0 || d.time[k] > d.time[i])
        continue;
      const CoxRisk risk = cox_risk(d, d.time[k], beta);
      w -= d.we(k) * (ei / risk.s0) * (zi - risk.s1 / risk.s0);
    }
    resid[static_cast<std::size_t>(i)] = w;
  }
  return resid;
}

//! Lin-Wei sandwich: information^-1 (sum of residual outer products)
//! information^-1, directly on the sum scale so the diagonal square roots
//! are the robust standard errors.
inline Eigen::MatrixXd cox_robust_variance(const CoxData& d,
                                           const Eigen::VectorXd& beta)
{
  const auto resid = cox_score_residuals(d, beta);
  Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(d.p(), d.p());
  for (const auto& w : resid)
    outer += w * w.transpose();
  const Eigen::MatrixXd inv_info =
    cox_information(d, beta).ldlt().solve(
      Eigen::MatrixXd::Identity(d.p(), d.p()));
  return inv_info * outer * inv_info;
}

}  // namespace oracle
