#pragma once

#include "markhaz/bandwidth.hpp"
#include "markhaz/common.hpp"
#include "markhaz/core_data.hpp"
#include "markhaz/estimator.hpp"
#include "markhaz/inference.hpp"
#include "markhaz/kernel.hpp"
#include "markhaz/rng.hpp"
#include "markhaz/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

//! Replication studies: generate, fit, and summarize across seeds.
//!
//! A study runs R independent replications of generate-then-fit and
//! aggregates bias, coverage, empirical SD, and mean reported SE per
//! (method, mark).  The censoring horizon is resolved once up front so
//! every replication shares it; per-replication seeds derive from the
//! master seed, so results are reproducible and independent of scheduling.

namespace markhaz {

//! Fitting strategies compared in a study.
enum class Method {
  ms_uniform_h,   //!< mark-specific fits, one shared bandwidth
  ms_per_mark_h,  //!< mark-specific fits, event-count bandwidth per mark
  non_ms,         //!< mark-ignoring comparator (all-mass kernel)
};

inline std::string method_name(Method method)
{
  switch (method) {
    case Method::ms_uniform_h: return "MS_uniform_h";
    case Method::ms_per_mark_h: return "MS_per_mark_h";
    case Method::non_ms: return "NonMS";
  }
  throw DataError("unknown method value");
}

inline Method method_from_name(const std::string& name)
{
  if (name == "MS_uniform_h")
    return Method::ms_uniform_h;
  if (name == "MS_per_mark_h")
    return Method::ms_per_mark_h;
  if (name == "NonMS")
    return Method::non_ms;
  throw DataError("unknown method '" + name +
                  "' (expected MS_uniform_h, MS_per_mark_h, or NonMS)");
}

//! How the mark-specific methods pick their windows.
struct BandwidthPolicy {
  std::vector<double> hs = default_bandwidth_grid();
  //! Event target for the per-mark rule; 0 means one event per subject.
  int target_events = 0;
  //! Fixed bandwidth for MS_uniform_h; empty selects by IMSE per
  //! replication, with the split seed varied per replication.
  std::optional<double> uniform_h;
  std::uint64_t split_seed = 1;
  int n_splits = 1;
};

//! The named simulation settings: form x slope-parameter combinations.
inline SimConfig named_setting(const std::string& name)
{
  SimConfig config;
  if (name == "lin1")
    return config;
  if (name == "lin2") {
    config.beta2 = -1.5;
    return config;
  }
  if (name == "quad1") {
    config.beta_form = BetaForm::quadratic;
    return config;
  }
  if (name == "quad2") {
    config.beta_form = BetaForm::quadratic;
    config.beta2 = -1.5;
    return config;
  }
  throw DataError("unknown setting '" + name +
                  "' (expected lin1, lin2, quad1, or quad2)");
}

struct StudyConfig {
  SimConfig sim;
  std::vector<Method> methods{Method::ms_per_mark_h, Method::non_ms};
  std::vector<double> marks{0.1, 0.3, 0.5, 0.7, 0.9};
  int replications = 200;
  BandwidthPolicy bandwidth;
  std::uint64_t master_seed = 2026;
  KernelKind kernel = KernelKind::epanechnikov;
  FitOptions fit;
  //! Studies default to the smoothed-compensator residuals: at realistic
  //! window widths their standard errors track the empirical spread while
  //! literal residuals drift with the window; the table carries the tag.
  ResidualVariant residual = ResidualVariant::compensator_smoothed;
  double ci_level = 0.95;
  //! Keep per-replication estimates in the table (off by default; a full
  //! study stores methods x marks x R outcomes).
  bool keep_raw = false;
};

inline void check_study_config(const StudyConfig& study)
{
  check_sim_config(study.sim);
  if (study.replications < 1)
    throw DataError("a study needs at least one replication");
  if (study.methods.empty())
    throw DataError("a study needs at least one method");
  for (std::size_t i = 0; i < study.methods.size(); ++i)
    for (std::size_t j = i + 1; j < study.methods.size(); ++j)
      if (study.methods[i] == study.methods[j])
        throw DataError("duplicate method in study");
  if (study.marks.empty())
    throw DataError("a study needs at least one mark");
  for (std::size_t i = 0; i < study.marks.size(); ++i) {
    const double v = study.marks[i];
    if (!(std::isfinite(v) && v >= 0.0 && v <= 1.0))
      throw DataError("study marks must lie in [0, 1]");
    if (i > 0 && !(v > study.marks[i - 1]))
      throw DataError("study marks must increase strictly");
  }
  if (!(study.ci_level > 0.0 && study.ci_level < 1.0))
    throw DataError("confidence level must lie strictly inside (0, 1)");
  const auto& policy = study.bandwidth;
  if (policy.hs.empty())
    throw DataError("bandwidth policy has no candidates");
  for (std::size_t k = 0; k < policy.hs.size(); ++k) {
    if (!(std::isfinite(policy.hs[k]) && policy.hs[k] > 0.0))
      throw DataError("candidate bandwidths must be positive");
    if (k > 0 && !(policy.hs[k] > policy.hs[k - 1]))
      throw DataError("candidate bandwidths must increase strictly");
  }
  if (policy.target_events < 0)
    throw DataError("target event count cannot be negative");
  if (policy.uniform_h && !(*policy.uniform_h > 0.0 && *policy.uniform_h <= 1.0))
    throw DataError("uniform bandwidth must lie in (0, 1]");
  if (policy.n_splits < 1)
    throw DataError("n_splits must be at least 1");
}

//! One (method, mark) outcome in one replication.
struct RepOutcome {
  double beta = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double h = std::numeric_limits<double>::quiet_NaN();  //!< NaN for NonMS
  bool converged = false;
  bool covered = false;
  std::string error;
};

//! Aggregates for one (method, mark) over the converged replications.
struct SummaryRow {
  Method method = Method::non_ms;
  double v = std::numeric_limits<double>::quiet_NaN();
  double truth = std::numeric_limits<double>::quiet_NaN();
  double avg_bias = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> emp_sd;  //!< absent below two converged replications
  double avg_se = std::numeric_limits<double>::quiet_NaN();
  int n_converged = 0;
};

struct SummaryTable {
  std::vector<Method> methods;
  std::vector<double> marks;
  int replications = 0;
  std::uint64_t master_seed = 0;
  double tau_c = std::numeric_limits<double>::quiet_NaN();
  KernelKind kernel = KernelKind::epanechnikov;
  ResidualVariant residual = ResidualVariant::literal;
  double ci_level = 0.95;
  std::string se_convention;
  std::vector<SummaryRow> rows;  //!< method-major, marks inner
  //! Per-replication outcomes, indexed like `rows`; empty unless kept.
  std::vector<std::vector<RepOutcome>> raw;

  SummaryRow& row(std::size_t method_index, std::size_t mark_index)
  {
    return rows[method_index * marks.size() + mark_index];
  }
  const SummaryRow& row(std::size_t method_index,
                        std::size_t mark_index) const
  {
    return rows[method_index * marks.size() + mark_index];
  }
};

namespace detail {

//! Candidates compatible with the interior guard at v, written with the
//! same comparisons the fitting guard uses.
inline std::vector<double> guarded_candidates(const std::vector<double>& hs,
                                              double v)
{
  std::vector<double> allowed;
  for (double h : hs)
    if (v >= h && v <= 1.0 - h)
      allowed.push_back(h);
  return allowed;
}

//! Fit plus sandwich standard error for the first covariate at one mark.
inline RepOutcome scored_fit(const AnalyticalDataset& data, double v,
                             KernelKind kind, Bandwidth bw,
                             const StudyConfig& study, double truth,
                             double z_level)
{
  RepOutcome outcome;
  outcome.h = bw.h;
  const MarkFit fit = fit_at_mark(data, v, kind, bw, study.fit);
  if (!fit.converged) {
    outcome.error = "fit did not converge";
    return outcome;
  }
  const BaselineCurve baseline =
    breslow_baseline(data, v, kind, bw, fit.beta, study.fit.eta_bound);
  const ResidualSet residuals =
    score_residuals(data, v, kind, bw, fit.beta, baseline, study.residual,
                    study.fit.eta_bound);
  const SandwichResult sandwich =
    sandwich_variance(data, fit, residuals, study.fit.max_condition);
  outcome.beta = fit.beta(0);
  outcome.se = sandwich.se(0);
  outcome.converged = true;
  outcome.covered = outcome.beta - z_level * outcome.se <= truth &&
                    truth <= outcome.beta + z_level * outcome.se;
  return outcome;
}

}  // namespace detail

//! Runs the full study: R seeded replications of generate-then-fit, then
//! order-independent aggregation.  Replications run concurrently when
//! `threads` exceeds one; results land in preallocated per-replication
//! slots, so the table is identical for any thread count.
inline SummaryTable run_replications(const StudyConfig& study,
                                     int threads = 1)
{
  check_study_config(study);

  double tau_c;
  if (study.sim.tau_c) {
    tau_c = *study.sim.tau_c;
  } else {
    tau_c =
      calibrate_censoring(study.sim, study.sim.censor_target).tau_c;
  }

  const std::size_t nm = study.marks.size();
  const std::size_t n_methods = study.methods.size();
  const std::size_t n_cells = n_methods * nm;
  const std::size_t reps = static_cast<std::size_t>(study.replications);
  const double z_level = norm_quantile(0.5 + study.ci_level / 2.0);
  const int target_events = study.bandwidth.target_events > 0
                              ? study.bandwidth.target_events
                              : study.sim.n;

  std::vector<double> truth(nm);
  for (std::size_t m = 0; m < nm; ++m)
    truth[m] = true_beta(study.sim, study.marks[m]);

  std::vector<std::vector<RepOutcome>> store(
    n_cells, std::vector<RepOutcome>(reps));

  parallel_for(reps, threads, [&](std::size_t r) {
    SimConfig rep_sim = study.sim;
    rep_sim.seed = derive_seed(study.master_seed, r);
    rep_sim.tau_c = tau_c;
    const AnalyticalDataset data =
      build_analytical_dataset(generate_dataset(rep_sim).subjects);

    for (std::size_t mi = 0; mi < n_methods; ++mi) {
      const Method method = study.methods[mi];
      auto slot = [&](std::size_t m) -> RepOutcome& {
        return store[mi * nm + m][r];
      };

      if (method == Method::non_ms) {
        try {
          const MarkFit fit = fit_nonms(data, study.fit);
          if (!fit.converged)
            throw DataError("fit did not converge");
          const BaselineCurve baseline = breslow_baseline(
            data, fit.v, fit.kernel, fit.bw, fit.beta, study.fit.eta_bound);
          const ResidualSet residuals = score_residuals(
            data, fit.v, fit.kernel, fit.bw, fit.beta, baseline,
            study.residual, study.fit.eta_bound);
          const SandwichResult sandwich =
            sandwich_variance(data, fit, residuals, study.fit.max_condition);
          for (std::size_t m = 0; m < nm; ++m) {
            RepOutcome& outcome = slot(m);
            outcome.beta = fit.beta(0);
            outcome.se = sandwich.se(0);
            outcome.converged = true;
            outcome.covered =
              outcome.beta - z_level * outcome.se <= truth[m] &&
              truth[m] <= outcome.beta + z_level * outcome.se;
          }
        } catch (const Error& failure) {
          for (std::size_t m = 0; m < nm; ++m)
            slot(m).error = failure.what();
        }
        continue;
      }

      if (method == Method::ms_per_mark_h) {
        for (std::size_t m = 0; m < nm; ++m) {
          RepOutcome& outcome = slot(m);
          try {
            const std::vector<double> allowed = detail::guarded_candidates(
              study.bandwidth.hs, study.marks[m]);
            if (allowed.empty())
              throw BoundaryMark(
                "no candidate bandwidth passes the interior guard");
            CandidateGrid grid;
            grid.hs = allowed;
            grid.marks = {study.marks[m]};
            const PerMarkChoice choice = select_per_mark(
              data, study.marks[m], grid, target_events, study.fit);
            outcome = detail::scored_fit(data, study.marks[m], study.kernel,
                                         Bandwidth{choice.h}, study,
                                         truth[m], z_level);
          } catch (const Error& failure) {
            outcome.error = failure.what();
          }
        }
        continue;
      }

      double shared_h = 0.0;
      std::string selection_error;
      if (study.bandwidth.uniform_h) {
        shared_h = *study.bandwidth.uniform_h;
      } else {
        try {
          CandidateGrid grid;
          grid.hs = study.bandwidth.hs;
          grid.marks = study.marks;
          grid.split_seed = derive_seed(study.bandwidth.split_seed, r);
          grid.n_splits = study.bandwidth.n_splits;
          shared_h =
            select_uniform(data, grid, study.kernel, study.fit).chosen_h;
        } catch (const Error& failure) {
          selection_error = failure.what();
        }
      }
      for (std::size_t m = 0; m < nm; ++m) {
        RepOutcome& outcome = slot(m);
        if (!selection_error.empty()) {
          outcome.error = selection_error;
          continue;
        }
        try {
          outcome = detail::scored_fit(data, study.marks[m], study.kernel,
                                       Bandwidth{shared_h}, study, truth[m],
                                       z_level);
        } catch (const Error& failure) {
          outcome.error = failure.what();
        }
      }
    }
  });

  SummaryTable table;
  table.methods = study.methods;
  table.marks = study.marks;
  table.replications = study.replications;
  table.master_seed = study.master_seed;
  table.tau_c = tau_c;
  table.kernel = study.kernel;
  table.residual = study.residual;
  table.ci_level = study.ci_level;
  table.se_convention = SandwichResult{}.scaling;
  table.rows.resize(n_cells);

  for (std::size_t mi = 0; mi < n_methods; ++mi) {
    for (std::size_t m = 0; m < nm; ++m) {
      SummaryRow& row = table.rows[mi * nm + m];
      row.method = study.methods[mi];
      row.v = study.marks[m];
      row.truth = truth[m];

      const auto& outcomes = store[mi * nm + m];
      Kahan beta_sum, se_sum;
      int converged = 0;
      int covered = 0;
      for (const RepOutcome& outcome : outcomes) {
        if (!outcome.converged)
          continue;
        beta_sum.add(outcome.beta);
        se_sum.add(outcome.se);
        converged += 1;
        covered += outcome.covered ? 1 : 0;
      }
      row.n_converged = converged;
      if (converged == 0)
        continue;

      const double beta_mean = beta_sum.value() / converged;
      row.avg_bias = beta_mean - row.truth;
      row.avg_se = se_sum.value() / converged;
      row.coverage = static_cast<double>(covered) / converged;
      if (converged >= 2) {
        Kahan squares;
        for (const RepOutcome& outcome : outcomes) {
          if (!outcome.converged)
            continue;
          const double centered = outcome.beta - beta_mean;
          squares.add(centered * centered);
        }
        row.emp_sd = std::sqrt(squares.value() / (converged - 1));
      }
    }
  }

  if (study.keep_raw)
    table.raw = std::move(store);
  return table;
}

}  // namespace markhaz
