#pragma once

#include "markhaz/common.hpp"
#include "markhaz/core_data.hpp"
#include "markhaz/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

//! Kernel-localized partial-likelihood estimation on the weighted dataset.
//!
//! At a target mark v the criterion is
//!
//!   l(v, b) = sum_i w_i sum_j d_ij K_h(V_ij - v) [b'Z_i - log(n S0(X_ij, b))]
//!
//! with S(q)(t, b) = n^-1 sum_i w_i sum_j 1{X_ij >= t} exp(b'Z_i) Z_i^(q).
//! Records only enter through events inside the kernel window and through
//! risk sets at in-window event times, so subjects that touch neither leave
//! the fit bit-for-bit unchanged.

namespace markhaz {

struct RiskAggregates {
  double s0 = 0.0;
  Eigen::VectorXd s1;
  Eigen::MatrixXd s2;
};

//! S(0), S(1), S(2) at gap time t (direct pass over all records).
inline RiskAggregates risk_aggregates(const AnalyticalDataset& data, double t,
                                      const Eigen::VectorXd& beta,
                                      double eta_bound = 700.0)
{
  const int p = data.p();
  Eigen::VectorXd eta = data.covariates * beta;
  for (Eigen::Index i = 0; i < eta.size(); ++i)
    if (!(std::fabs(eta[i]) <= eta_bound))
      throw OverflowError("linear predictor " + std::to_string(eta[i]) +
                          " outside the safe range for exp()");
  Kahan s0;
  KahanVec s1(p);
  KahanMat s2(p, p);
  for (const auto& rec : data.records) {
    if (rec.time < t)
      continue;
    const double w = rec.weight * std::exp(eta[rec.subject]);
    const Eigen::VectorXd z = data.covariates.row(rec.subject).transpose();
    s0.add(w);
    s1.add(w * z);
    s2.add(w * (z * z.transpose()));
  }
  const double inv_n = 1.0 / static_cast<double>(data.n());
  RiskAggregates agg;
  agg.s0 = s0.value() * inv_n;
  agg.s1 = s1.value() * inv_n;
  agg.s2 = s2.value() * inv_n;
  return agg;
}

namespace detail {

//! In-window events, sorted by gap time descending and grouped by ties.
struct LocalEvents {
  std::vector<int> record;        //!< index into AnalyticalDataset::records
  std::vector<double> weight;     //!< w_i * K_h(V_ij - v)
  std::vector<std::size_t> group_start;  //!< tie-group boundaries, + sentinel
  std::size_t count() const { return record.size(); }
};

inline LocalEvents build_local_events(const AnalyticalDataset& data, double v,
                                      KernelKind kind, Bandwidth bw)
{
  check_bandwidth(kind, bw);
  LocalEvents ev;
  for (int idx : data.by_time_desc) {
    const GapRecord& rec = data.records[static_cast<std::size_t>(idx)];
    if (!rec.observed)
      continue;
    const double kw =
      is_localized(kind) ? scaled_kernel(kind, bw, *rec.mark, v) : 1.0;
    if (kw == 0.0)
      continue;
    ev.record.push_back(idx);
    ev.weight.push_back(rec.weight * kw);
  }
  for (std::size_t k = 0; k < ev.record.size(); ++k) {
    if (k == 0 ||
        data.records[static_cast<std::size_t>(ev.record[k])].time !=
          data.records[static_cast<std::size_t>(ev.record[k - 1])].time)
      ev.group_start.push_back(k);
  }
  ev.group_start.push_back(ev.record.size());
  return ev;
}

struct Evaluation {
  double loglik = 0.0;
  Eigen::VectorXd score;
  Eigen::MatrixXd hessian;
};

//! Risk-set state at the unique in-window event times (sweep order, so gap
//! time descending).  r0 is the unnormalized sum, i.e. n * S(0).
struct RiskSnapshots {
  std::vector<double> time;
  std::vector<double> r0;
  std::vector<Eigen::VectorXd> zbar;
};

//! One sweep over the records: criterion value, pseudo-score and
//! pseudo-Hessian at beta.  The cumulative risk sums advance through
//! records in descending time order, so records below the smallest
//! in-window event time are never touched.
inline Evaluation evaluate_events(const AnalyticalDataset& data,
                                  const LocalEvents& ev,
                                  const Eigen::VectorXd& beta,
                                  double eta_bound,
                                  RiskSnapshots* snapshots = nullptr)
{
  const int p = data.p();
  Eigen::VectorXd eta = data.covariates * beta;
  for (Eigen::Index i = 0; i < eta.size(); ++i)
    if (!(std::fabs(eta[i]) <= eta_bound))
      throw OverflowError("linear predictor " + std::to_string(eta[i]) +
                          " outside the safe range for exp()");
  Eigen::VectorXd exp_eta = eta.array().exp();

  Kahan r0;
  KahanVec r1(p);
  KahanMat r2(p, p);
  Kahan loglik;
  KahanVec score(p);
  KahanMat hessian(p, p);

  std::size_t ptr = 0;
  const std::size_t n_groups = ev.group_start.size() - 1;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::size_t begin = ev.group_start[g];
    const std::size_t end = ev.group_start[g + 1];
    const double t =
      data.records[static_cast<std::size_t>(ev.record[begin])].time;

    while (ptr < data.by_time_desc.size()) {
      const GapRecord& rec =
        data.records[static_cast<std::size_t>(data.by_time_desc[ptr])];
      if (rec.time < t)
        break;
      const double w = rec.weight * exp_eta[rec.subject];
      const Eigen::VectorXd z = data.covariates.row(rec.subject).transpose();
      r0.add(w);
      r1.add(w * z);
      r2.add(w * (z * z.transpose()));
      ++ptr;
    }

    const double risk0 = r0.value();
    const double log_risk0 = std::log(risk0);
    const Eigen::VectorXd zbar = r1.value() / risk0;
    const Eigen::MatrixXd curvature =
      r2.value() / risk0 - zbar * zbar.transpose();
    if (snapshots) {
      snapshots->time.push_back(t);
      snapshots->r0.push_back(risk0);
      snapshots->zbar.push_back(zbar);
    }

    for (std::size_t k = begin; k < end; ++k) {
      const GapRecord& rec =
        data.records[static_cast<std::size_t>(ev.record[k])];
      const double w = ev.weight[k];
      const Eigen::VectorXd z = data.covariates.row(rec.subject).transpose();
      loglik.add(w * (eta[rec.subject] - log_risk0));
      score.add(w * (z - zbar));
      hessian.add(-w * curvature);
    }
  }

  Evaluation out;
  out.loglik = loglik.value();
  out.score = score.value();
  out.hessian = hessian.value();
  if (ev.count() == 0) {
    out.score = Eigen::VectorXd::Zero(p);
    out.hessian = Eigen::MatrixXd::Zero(p, p);
  }
  return out;
}

}  // namespace detail

namespace detail {

inline LocalEvents nonempty_local_events(const AnalyticalDataset& data,
                                         double v, KernelKind kind,
                                         Bandwidth bw)
{
  auto ev = build_local_events(data, v, kind, bw);
  if (ev.count() == 0)
    throw NoLocalData("no events carry positive kernel weight at v=" +
                      std::to_string(v));
  return ev;
}

}  // namespace detail

inline double log_pseudo_likelihood(const AnalyticalDataset& data, double v,
                                    KernelKind kind, Bandwidth bw,
                                    const Eigen::VectorXd& beta,
                                    double eta_bound = 700.0)
{
  const auto ev = detail::nonempty_local_events(data, v, kind, bw);
  return detail::evaluate_events(data, ev, beta, eta_bound).loglik;
}

inline Eigen::VectorXd pseudo_score(const AnalyticalDataset& data, double v,
                                    KernelKind kind, Bandwidth bw,
                                    const Eigen::VectorXd& beta,
                                    double eta_bound = 700.0)
{
  const auto ev = detail::nonempty_local_events(data, v, kind, bw);
  return detail::evaluate_events(data, ev, beta, eta_bound).score;
}

inline Eigen::MatrixXd pseudo_hessian(const AnalyticalDataset& data, double v,
                                      KernelKind kind, Bandwidth bw,
                                      const Eigen::VectorXd& beta,
                                      double eta_bound = 700.0)
{
  const auto ev = detail::nonempty_local_events(data, v, kind, bw);
  return detail::evaluate_events(data, ev, beta, eta_bound).hessian;
}

// ------------------------------------------------------------------------

struct FitOptions {
  double tol_score = 1e-8;      //!< sup-norm of the score per in-window event
  int max_iter = 100;
  int max_step_halvings = 30;
  Eigen::VectorXd init;         //!< starting coefficients; empty means zeros
  bool interior_guard = true;   //!< require v in [h, 1-h] (localized kernels)
  int min_effective_events = 10;
  double eta_bound = 700.0;
  double max_condition = 1e12;  //!< curvature condition-number ceiling
};

struct MarkFit {
  double v = std::numeric_limits<double>::quiet_NaN();
  Bandwidth bw;
  KernelKind kernel = KernelKind::epanechnikov;
  Eigen::VectorXd beta;
  Eigen::MatrixXd sigma;  //!< -(1/n) * pseudo-Hessian at beta
  bool converged = false;
  int iterations = 0;
  //! sup|score| / effective_events at the returned beta
  double score_norm = std::numeric_limits<double>::infinity();
  std::size_t effective_events = 0;
  double log_likelihood = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

//! Eigendecomposition of the negated pseudo-Hessian, rejected when it is
//! not numerically positive definite.
inline Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> checked_curvature(
  const Eigen::MatrixXd& hessian, double max_condition, double v)
{
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(-hessian);
  const auto& eig = solver.eigenvalues();
  const double lo = eig[0];
  const double hi = eig[eig.size() - 1];
  if (!(lo > 0.0) || hi / lo > max_condition)
    throw SingularHessian("curvature matrix singular or ill-conditioned at v=" +
                          std::to_string(v));
  return solver;
}

inline MarkFit fit_core(const AnalyticalDataset& data, double v,
                        KernelKind kind, Bandwidth bw, const FitOptions& opts)
{
  check_bandwidth(kind, bw);
  if (is_localized(kind)) {
    if (!(v >= 0.0 && v <= 1.0))
      throw DataError("target mark must lie in [0, 1]");
    if (opts.interior_guard && !(v >= bw.h && v <= 1.0 - bw.h))
      throw BoundaryMark("mark " + std::to_string(v) +
                         " outside the interior guard [h, 1-h] for h=" +
                         std::to_string(bw.h));
  }

  const auto ev = build_local_events(data, v, kind, bw);
  const std::size_t floor =
    static_cast<std::size_t>(std::max(opts.min_effective_events, 1));
  if (ev.count() < floor)
    throw NoLocalData("only " + std::to_string(ev.count()) +
                      " in-window events, need at least " +
                      std::to_string(floor));

  const int p = data.p();
  const double scale = static_cast<double>(ev.count());

  MarkFit fit;
  fit.v = v;
  fit.bw = bw;
  fit.kernel = kind;
  fit.effective_events = ev.count();

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  if (opts.init.size() != 0) {
    if (opts.init.size() != p)
      throw DataError("init vector length does not match covariate count");
    beta = opts.init;
  }
  Evaluation cur = evaluate_events(data, ev, beta, opts.eta_bound);

  for (int iter = 0; iter < opts.max_iter; ++iter) {
    if (cur.score.cwiseAbs().maxCoeff() / scale < opts.tol_score)
      break;
    const auto curvature =
      checked_curvature(cur.hessian, opts.max_condition, v);
    const Eigen::VectorXd step = curvature.eigenvectors() *
      (curvature.eigenvalues().cwiseInverse().asDiagonal() *
       (curvature.eigenvectors().transpose() * cur.score));

    // inside the quadratic basin the improvement test drowns in rounding,
    // so tiny steps are taken on evaluability alone
    const bool terminal = step.cwiseAbs().maxCoeff() < 1e-4;
    bool accepted = false;
    double alpha = 1.0;
    for (int half = 0; half <= opts.max_step_halvings; ++half) {
      const Eigen::VectorXd trial_beta = beta + alpha * step;
      std::optional<Evaluation> trial;
      try {
        trial = evaluate_events(data, ev, trial_beta, opts.eta_bound);
      } catch (const OverflowError&) {
        // treat an overflowing trial like a non-improving one
      }
      if (trial && (terminal || trial->loglik > cur.loglik)) {
        beta = trial_beta;
        cur = std::move(*trial);
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted)
      break;  // no improving step of any length; score test decides below
    fit.iterations = iter + 1;
  }

  fit.beta = beta;
  fit.sigma = -cur.hessian / static_cast<double>(data.n());
  fit.score_norm = cur.score.cwiseAbs().maxCoeff() / scale;
  fit.converged = fit.score_norm < opts.tol_score;
  fit.log_likelihood = cur.loglik;
  return fit;
}

}  // namespace detail

//! Newton fit of the localized criterion at mark v.  Throws BoundaryMark,
//! NoLocalData or SingularHessian; running out of iterations is reported
//! through MarkFit::converged instead.
inline MarkFit fit_at_mark(const AnalyticalDataset& data, double v,
                           KernelKind kind, Bandwidth bw,
                           const FitOptions& opts = {})
{
  return detail::fit_core(data, v, kind, bw, opts);
}

//! The non-mark-specific comparator: every event keeps unit kernel weight,
//! which reduces the criterion to a weighted gap-time partial likelihood.
inline MarkFit fit_nonms(const AnalyticalDataset& data,
                         const FitOptions& opts = {})
{
  return detail::fit_core(data, std::numeric_limits<double>::quiet_NaN(),
                          KernelKind::all_mass, Bandwidth{1.0}, opts);
}

// ------------------------------------------------------------------------

//! One grid point of a mark-by-mark fit; `error` is non-empty when the fit
//! could not run at all (boundary guard, empty window, singular curvature).
struct GridFit {
  double v = 0.0;
  Bandwidth bw;
  std::optional<MarkFit> fit;
  std::string error;
  bool usable() const { return fit.has_value() && fit->converged; }
};

struct MarkCurve {
  std::vector<GridFit> points;
  std::uint64_t fingerprint = 0;  //!< dataset_fingerprint() of the input
};

//! Fits every mark in `marks` (strictly increasing); `bandwidths` holds
//! either one shared value or one value per mark.  Failures are recorded
//! per mark, never thrown; an empty mark list gives an empty curve.
inline MarkCurve fit_grid(const AnalyticalDataset& data,
                          const std::vector<double>& marks, KernelKind kind,
                          const std::vector<Bandwidth>& bandwidths,
                          const FitOptions& opts = {})
{
  MarkCurve curve;
  curve.fingerprint = dataset_fingerprint(data);
  if (marks.empty())
    return curve;
  for (std::size_t k = 1; k < marks.size(); ++k)
    if (!(marks[k] > marks[k - 1]))
      throw DataError("marks must be strictly increasing");
  if (bandwidths.size() != 1 && bandwidths.size() != marks.size())
    throw DataError("need one bandwidth, or one per mark");
  curve.points.resize(marks.size());
  for (std::size_t k = 0; k < marks.size(); ++k) {
    GridFit& point = curve.points[k];
    point.v = marks[k];
    point.bw = bandwidths.size() == 1 ? bandwidths[0] : bandwidths[k];
    try {
      point.fit = detail::fit_core(data, point.v, kind, point.bw, opts);
    } catch (const Error& e) {
      point.error = e.what();
    }
  }
  return curve;
}

}  // namespace markhaz
