#pragma once

#include "markhaz/common.hpp"
#include "markhaz/core_data.hpp"
#include "markhaz/estimator.hpp"
#include "markhaz/kernel.hpp"
#include "markhaz/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

//! Post-fit inference: the mark-localized cumulative baseline, per-record
//! pseudo-score residuals, the clustered sandwich covariance and Wald
//! hazard-ratio tables.

namespace markhaz {

//! Cumulative baseline jumps at the in-window event times of one mark.
struct BaselineCurve {
  double v = std::numeric_limits<double>::quiet_NaN();
  Bandwidth bw;
  KernelKind kernel = KernelKind::epanechnikov;
  std::vector<double> jump_times;  //!< strictly increasing
  std::vector<double> jumps;       //!< nonnegative increments
  std::vector<double> cumulative;  //!< running sums of `jumps`

  //! Cumulative baseline at gap time t; zero before the first jump.
  double value(double t) const
  {
    const auto it =
      std::upper_bound(jump_times.begin(), jump_times.end(), t);
    if (it == jump_times.begin())
      return 0.0;
    return cumulative[static_cast<std::size_t>(it - jump_times.begin()) - 1];
  }
};

//! Baseline increment at each in-window event time: the kernel- and
//! episode-weighted event mass divided by the unnormalized risk sum there.
//! An empty window yields the identically zero curve.
inline BaselineCurve breslow_baseline(const AnalyticalDataset& data, double v,
                                      KernelKind kind, Bandwidth bw,
                                      const Eigen::VectorXd& beta,
                                      double eta_bound = 700.0)
{
  check_bandwidth(kind, bw);
  if (is_localized(kind) && !(v >= 0.0 && v <= 1.0))
    throw DataError("target mark must lie in [0, 1]");

  BaselineCurve curve;
  curve.v = v;
  curve.bw = bw;
  curve.kernel = kind;

  const auto ev = detail::build_local_events(data, v, kind, bw);
  if (ev.count() == 0)
    return curve;

  detail::RiskSnapshots snap;
  detail::evaluate_events(data, ev, beta, eta_bound, &snap);

  // snapshots run in sweep order (descending time), one per tie group
  const std::size_t n_groups = ev.group_start.size() - 1;
  curve.jump_times.resize(n_groups);
  curve.jumps.resize(n_groups);
  curve.cumulative.resize(n_groups);
  for (std::size_t g = 0; g < n_groups; ++g) {
    Kahan mass;
    for (std::size_t k = ev.group_start[g]; k < ev.group_start[g + 1]; ++k)
      mass.add(ev.weight[k]);
    const std::size_t idx = n_groups - 1 - g;
    curve.jump_times[idx] = snap.time[g];
    curve.jumps[idx] = mass.value() / snap.r0[g];
  }
  Kahan running;
  for (std::size_t k = 0; k < n_groups; ++k) {
    running.add(curve.jumps[k]);
    curve.cumulative[k] = running.value();
  }
  return curve;
}

// ------------------------------------------------------------------------

//! How the kernel factor enters the residual's compensator part.
//!
//! `literal` multiplies the whole bracket, compensator included, by the
//! event indicator and kernel weight, so censored records contribute
//! nothing.  `compensator_smoothed` keeps the kernel inside the baseline
//! increments only; every at-risk record then carries a compensator part,
//! and the per-subject sums telescope exactly to the pseudo-score.
enum class ResidualVariant { literal, compensator_smoothed };

inline const char* residual_variant_name(ResidualVariant variant)
{
  return variant == ResidualVariant::literal ? "literal"
                                             : "compensator-smoothed";
}

inline ResidualVariant residual_variant_from_name(const std::string& name)
{
  if (name == "literal")
    return ResidualVariant::literal;
  if (name == "compensator-smoothed" || name == "compensator_smoothed")
    return ResidualVariant::compensator_smoothed;
  throw DataError("unknown residual variant '" + name +
                  "' (expected literal or compensator-smoothed)");
}

struct ResidualSet {
  double v = std::numeric_limits<double>::quiet_NaN();
  Bandwidth bw;
  KernelKind kernel = KernelKind::epanechnikov;
  ResidualVariant variant = ResidualVariant::literal;
  std::vector<Eigen::VectorXd> per_record;   //!< aligned with records
  std::vector<Eigen::VectorXd> per_subject;  //!< summed within subject
};

//! Per-record pseudo-score residuals against the given baseline.  The
//! baseline must describe the same window (kernel, bandwidth, mark and
//! jump times); its jump values are taken as passed.
inline ResidualSet score_residuals(const AnalyticalDataset& data, double v,
                                   KernelKind kind, Bandwidth bw,
                                   const Eigen::VectorXd& beta,
                                   const BaselineCurve& baseline,
                                   ResidualVariant variant =
                                     ResidualVariant::literal,
                                   double eta_bound = 700.0)
{
  check_bandwidth(kind, bw);
  const bool same_mark =
    baseline.v == v || (std::isnan(baseline.v) && std::isnan(v));
  if (baseline.kernel != kind || baseline.bw.h != bw.h || !same_mark)
    throw DataError("baseline was built for a different window");

  const int p = data.p();
  const auto ev = detail::build_local_events(data, v, kind, bw);
  const std::size_t n_groups =
    ev.count() == 0 ? 0 : ev.group_start.size() - 1;
  if (baseline.jump_times.size() != n_groups)
    throw DataError("baseline jump times do not match this dataset");

  std::vector<double> times(n_groups);
  std::vector<Eigen::VectorXd> zbar(n_groups);
  if (n_groups > 0) {
    detail::RiskSnapshots snap;
    detail::evaluate_events(data, ev, beta, eta_bound, &snap);
    for (std::size_t g = 0; g < n_groups; ++g) {
      const std::size_t idx = n_groups - 1 - g;
      times[idx] = snap.time[g];
      zbar[idx] = snap.zbar[g];
    }
    for (std::size_t k = 0; k < n_groups; ++k)
      if (baseline.jump_times[k] != times[k])
        throw DataError("baseline jump times do not match this dataset");
  }

  // prefix sums of the compensator integrand over jump times
  std::vector<double> cum0(n_groups);
  std::vector<Eigen::VectorXd> cum1(n_groups);
  {
    Kahan c0;
    KahanVec c1(p);
    for (std::size_t k = 0; k < n_groups; ++k) {
      c0.add(baseline.jumps[k]);
      c1.add(baseline.jumps[k] * zbar[k]);
      cum0[k] = c0.value();
      cum1[k] = c1.value();
    }
  }

  Eigen::VectorXd eta = data.covariates * beta;
  for (Eigen::Index i = 0; i < eta.size(); ++i)
    if (!(std::fabs(eta[i]) <= eta_bound))
      throw OverflowError("linear predictor " + std::to_string(eta[i]) +
                          " outside the safe range for exp()");

  ResidualSet out;
  out.v = v;
  out.bw = bw;
  out.kernel = kind;
  out.variant = variant;
  out.per_record.assign(data.records.size(), Eigen::VectorXd::Zero(p));
  out.per_subject.assign(static_cast<std::size_t>(data.n()),
                         Eigen::VectorXd::Zero(p));

  for (std::size_t r = 0; r < data.records.size(); ++r) {
    const GapRecord& rec = data.records[r];
    const Eigen::VectorXd z = data.covariates.row(rec.subject).transpose();

    Eigen::VectorXd comp = Eigen::VectorXd::Zero(p);
    const auto past =
      std::upper_bound(times.begin(), times.end(), rec.time) - times.begin();
    if (past > 0) {
      const std::size_t last = static_cast<std::size_t>(past) - 1;
      comp = std::exp(eta[rec.subject]) * (z * cum0[last] - cum1[last]);
    }

    const double kw =
      rec.observed ? (is_localized(kind)
                        ? scaled_kernel(kind, bw, *rec.mark, v)
                        : 1.0)
                   : 0.0;
    Eigen::VectorXd value;
    if (variant == ResidualVariant::literal) {
      if (kw == 0.0) {
        out.per_record[r].setZero();
        continue;
      }
      const auto at = std::lower_bound(times.begin(), times.end(), rec.time);
      const Eigen::VectorXd event_part =
        z - zbar[static_cast<std::size_t>(at - times.begin())];
      value = rec.weight * kw * (event_part - comp);
    } else {
      Eigen::VectorXd event_part = Eigen::VectorXd::Zero(p);
      if (kw > 0.0) {
        const auto at =
          std::lower_bound(times.begin(), times.end(), rec.time);
        event_part =
          kw * (z - zbar[static_cast<std::size_t>(at - times.begin())]);
      }
      value = rec.weight * (event_part - comp);
    }
    out.per_record[r] = value;
    out.per_subject[static_cast<std::size_t>(rec.subject)] += value;
  }
  return out;
}

// ------------------------------------------------------------------------

//! Clustered sandwich pieces for one fitted mark.  `lambda` and `gamma`
//! carry the bandwidth-stabilized scale under which sqrt(n * h_eff) times
//! the estimation error is approximately normal, so the standard error of
//! coefficient q is sqrt(gamma(q, q) / (n * h_eff)).
struct SandwichResult {
  Eigen::MatrixXd sigma;   //!< curvature scale, copied from the fit
  Eigen::MatrixXd lambda;  //!< h_eff times the mean subject-score outer product
  Eigen::MatrixXd gamma;   //!< sigma^-1 lambda sigma^-1
  Eigen::VectorXd se;
  double h_eff = 1.0;
  ResidualVariant variant = ResidualVariant::literal;
  std::string scaling = "se[q] = sqrt(gamma(q,q) / (n * h_eff))";
};

inline SandwichResult sandwich_variance(const AnalyticalDataset& data,
                                        const MarkFit& fit,
                                        const ResidualSet& residuals,
                                        double max_condition = 1e12)
{
  if (!fit.converged)
    throw DataError("sandwich variance needs a converged fit");
  if (residuals.kernel != fit.kernel || residuals.bw.h != fit.bw.h)
    throw DataError("residuals were built for a different window");
  if (residuals.per_subject.size() != static_cast<std::size_t>(data.n()))
    throw DataError("residuals do not match this dataset");

  const int p = data.p();
  const double n = static_cast<double>(data.n());

  SandwichResult out;
  out.h_eff = is_localized(fit.kernel) ? fit.bw.h : 1.0;
  out.variant = residuals.variant;
  out.sigma = fit.sigma;

  KahanMat outer(p, p);
  for (const auto& u : residuals.per_subject)
    outer.add(u * u.transpose());
  out.lambda = (out.h_eff / n) * outer.value();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(fit.sigma);
  const auto& eig = solver.eigenvalues();
  if (!(eig[0] > 0.0) || eig[eig.size() - 1] / eig[0] > max_condition)
    throw SingularHessian("curvature scale singular or ill-conditioned");
  const Eigen::MatrixXd sigma_inv =
    solver.eigenvectors() * eig.cwiseInverse().asDiagonal() *
    solver.eigenvectors().transpose();

  const Eigen::MatrixXd gamma = sigma_inv * out.lambda * sigma_inv;
  out.gamma = 0.5 * (gamma + gamma.transpose());
  out.se.resize(p);
  for (int q = 0; q < p; ++q)
    out.se[q] = std::sqrt(out.gamma(q, q) / (n * out.h_eff));
  return out;
}

// ------------------------------------------------------------------------

struct HazardRatioRow {
  std::string covariate;
  double beta = 0.0;
  double se = 0.0;
  double hazard_ratio = 1.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double p_value = 1.0;
};

//! Wald table: exponentiated coefficients with level-% confidence limits
//! and two-sided normal p-values.  Names default to z1..zp.
inline std::vector<HazardRatioRow> hazard_ratio_table(
  const MarkFit& fit, const SandwichResult& sandwich, double level = 0.95,
  const std::vector<std::string>& names = {})
{
  if (!(level > 0.0 && level < 1.0))
    throw DataError("confidence level must sit strictly inside (0, 1)");
  if (!fit.converged)
    throw DataError("hazard ratios need a converged fit");
  const auto p = fit.beta.size();
  if (sandwich.se.size() != p)
    throw DataError("sandwich result does not match this fit");
  if (!names.empty() && names.size() != static_cast<std::size_t>(p))
    throw DataError("need one covariate name per coefficient");

  const double zq = norm_quantile(1.0 - 0.5 * (1.0 - level));
  std::vector<HazardRatioRow> rows;
  rows.reserve(static_cast<std::size_t>(p));
  for (Eigen::Index q = 0; q < p; ++q) {
    HazardRatioRow row;
    row.covariate = names.empty()
                      ? "z" + std::to_string(q + 1)
                      : names[static_cast<std::size_t>(q)];
    row.beta = fit.beta[q];
    row.se = sandwich.se[q];
    if (!(row.se > 0.0))
      throw DataError("standard error must be positive for a Wald table");
    row.hazard_ratio = std::exp(row.beta);
    row.ci_low = std::exp(row.beta - zq * row.se);
    row.ci_high = std::exp(row.beta + zq * row.se);
    row.p_value =
      std::erfc(std::fabs(row.beta / row.se) / std::numbers::sqrt2);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace markhaz
