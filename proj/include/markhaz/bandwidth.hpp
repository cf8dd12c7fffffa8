#pragma once

#include "markhaz/common.hpp"
#include "markhaz/core_data.hpp"
#include "markhaz/estimator.hpp"
#include "markhaz/kernel.hpp"
#include "markhaz/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

//! Bandwidth selection.
//!
//! The uniform selector scores every candidate h by an estimated
//! MSE_h(v) = C(v)^2 h^4 + V_h(v): the squared-bias factor C(v) is the
//! least-squares slope of the full-data estimate against h^2, and the
//! variance part V_h(v) comes from refitting on a seeded half split of the
//! subjects.  Averaging the MSE over the marks of interest gives an IMSE
//! per candidate, and the smallest minimizer wins.  The per-mark selector
//! instead takes the smallest candidate whose window holds a target number
//! of observed events, which adapts the window to skewed mark densities.

namespace markhaz {

//! Candidate bandwidths 0.05, 0.06, ..., 0.80.
inline std::vector<double> default_bandwidth_grid()
{
  std::vector<double> hs;
  hs.reserve(76);
  for (int k = 5; k <= 80; ++k)
    hs.push_back(static_cast<double>(k) / 100.0);
  return hs;
}

struct CandidateGrid {
  std::vector<double> hs = default_bandwidth_grid();
  std::vector<double> marks;
  std::uint64_t split_seed = 0;
  int n_splits = 1;
};

inline void check_candidate_grid(const CandidateGrid& grid)
{
  if (grid.hs.empty())
    throw DataError("candidate grid has no bandwidths");
  for (std::size_t k = 0; k < grid.hs.size(); ++k) {
    if (!(std::isfinite(grid.hs[k]) && grid.hs[k] > 0.0))
      throw DataError("candidate bandwidths must be positive");
    if (k > 0 && !(grid.hs[k] > grid.hs[k - 1]))
      throw DataError("candidate bandwidths must increase strictly");
  }
  if (grid.marks.empty())
    throw DataError("candidate grid has no marks");
  for (double v : grid.marks)
    if (!(std::isfinite(v) && v >= 0.0 && v <= 1.0))
      throw DataError("marks of interest must lie in [0, 1]");
  if (grid.n_splits < 1)
    throw DataError("n_splits must be at least 1");
}

//! One (mark, bandwidth) candidate.  `usable` pairs carry the full-data
//! estimate and the split variance; the rest keep the reason they failed.
struct BandwidthCell {
  double v = 0.0;
  double h = 0.0;
  bool usable = false;
  std::string error;
  Eigen::VectorXd beta;       //!< full-data estimate
  Eigen::VectorXd split_var;  //!< half-split variance per coefficient
  double mse = std::numeric_limits<double>::quiet_NaN();
};

//! Everything the uniform selector computed, kept for inspection.  Cells
//! are stored mark-major: cell(m, k) pairs marks[m] with hs[k].
struct BandwidthReport {
  std::vector<double> hs;
  std::vector<double> marks;
  std::uint64_t split_seed = 0;
  int n_splits = 1;
  std::vector<BandwidthCell> cells;
  //! Slope of beta against h^2 per mark; empty until completed, and empty
  //! for marks with fewer than two usable candidates.
  std::vector<Eigen::VectorXd> curvature;
  //! Mean MSE per candidate over the marks that contribute; NaN where no
  //! mark does.  `imse_support` counts the contributing marks.
  std::vector<double> imse;
  std::vector<int> imse_support;
  double chosen_h = std::numeric_limits<double>::quiet_NaN();

  BandwidthCell& cell(std::size_t m, std::size_t k)
  {
    return cells[m * hs.size() + k];
  }
  const BandwidthCell& cell(std::size_t m, std::size_t k) const
  {
    return cells[m * hs.size() + k];
  }
};

namespace detail {

//! Seeded half split of n subject indices; both halves come back sorted.
//! Round r of a multi-split evaluation draws from a seed derived per round.
inline std::pair<std::vector<int>, std::vector<int>> split_half(
  int n, std::uint64_t split_seed, int round)
{
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Substream rng(derive_seed(split_seed, static_cast<std::uint64_t>(round)), 0);
  for (int i = n - 1; i >= 1; --i) {
    const int j = static_cast<int>(rng.uniform() * (i + 1));
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(j)]);
  }
  const std::size_t cut = static_cast<std::size_t>(n + 1) / 2;
  std::vector<int> first(order.begin(), order.begin() + cut);
  std::vector<int> second(order.begin() + cut, order.end());
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {std::move(first), std::move(second)};
}

//! Variance estimate from one half split: ((b1 - b2) / 2)^2 coefficientwise.
inline Eigen::VectorXd half_split_variance(const Eigen::VectorXd& b1,
                                           const Eigen::VectorXd& b2)
{
  return (0.25 * (b1 - b2).array().square()).matrix();
}

inline Eigen::VectorXd converged_beta(const AnalyticalDataset& data, double v,
                                      KernelKind kind, Bandwidth bw,
                                      const FitOptions& opts)
{
  const MarkFit fit = fit_at_mark(data, v, kind, bw, opts);
  if (!fit.converged)
    throw DataError("fit did not converge");
  return fit.beta;
}

}  // namespace detail

//! Fits every (mark, bandwidth) pair on the full data and on each half of
//! the seeded subject split, reusing one split per round across the whole
//! grid so the h comparison is not blurred by split noise.  Pairs that
//! fail the interior guard, the event floor, or convergence are marked
//! unusable with the reason kept.
inline BandwidthReport evaluate_candidates(const AnalyticalDataset& data,
                                           const CandidateGrid& grid,
                                           KernelKind kind,
                                           const FitOptions& opts = {},
                                           int threads = 1)
{
  check_candidate_grid(grid);
  if (data.n() < 2)
    throw DataError("half-split evaluation needs at least two subjects");

  std::vector<std::pair<AnalyticalDataset, AnalyticalDataset>> splits;
  splits.reserve(static_cast<std::size_t>(grid.n_splits));
  for (int s = 0; s < grid.n_splits; ++s) {
    auto [left, right] = detail::split_half(data.n(), grid.split_seed, s);
    splits.emplace_back(subset_subjects(data, left),
                        subset_subjects(data, right));
  }

  BandwidthReport report;
  report.hs = grid.hs;
  report.marks = grid.marks;
  report.split_seed = grid.split_seed;
  report.n_splits = grid.n_splits;
  report.cells.resize(grid.marks.size() * grid.hs.size());

  const std::size_t nh = grid.hs.size();
  parallel_for(report.cells.size(), threads, [&](std::size_t idx) {
    BandwidthCell& cell = report.cells[idx];
    cell.v = grid.marks[idx / nh];
    cell.h = grid.hs[idx % nh];
    try {
      const Bandwidth bw{cell.h};
      cell.beta = detail::converged_beta(data, cell.v, kind, bw, opts);
      Eigen::VectorXd accum = Eigen::VectorXd::Zero(data.p());
      for (const auto& [left, right] : splits)
        accum += detail::half_split_variance(
          detail::converged_beta(left, cell.v, kind, bw, opts),
          detail::converged_beta(right, cell.v, kind, bw, opts));
      cell.split_var = accum / static_cast<double>(grid.n_splits);
      cell.usable = true;
    } catch (const Error& failure) {
      cell.beta.resize(0);
      cell.split_var.resize(0);
      cell.error = failure.what();
    }
  });
  return report;
}

//! Least-squares slope of the full-data estimate against h^2 at one mark,
//! one slope per coefficient.
inline Eigen::VectorXd slope_fit(const BandwidthReport& report,
                                 std::size_t mark_index)
{
  if (mark_index >= report.marks.size())
    throw DataError("mark index out of range");

  std::vector<const BandwidthCell*> usable;
  for (std::size_t k = 0; k < report.hs.size(); ++k) {
    const BandwidthCell& cell = report.cell(mark_index, k);
    if (cell.usable)
      usable.push_back(&cell);
  }
  if (usable.size() < 2)
    throw DataError("slope fit needs at least two usable bandwidths");

  const Eigen::Index p = usable.front()->beta.size();
  double x_mean = 0.0;
  Eigen::VectorXd y_mean = Eigen::VectorXd::Zero(p);
  for (const BandwidthCell* cell : usable) {
    x_mean += cell->h * cell->h;
    y_mean += cell->beta;
  }
  x_mean /= static_cast<double>(usable.size());
  y_mean /= static_cast<double>(usable.size());

  double sxx = 0.0;
  Eigen::VectorXd sxy = Eigen::VectorXd::Zero(p);
  for (const BandwidthCell* cell : usable) {
    const double dx = cell->h * cell->h - x_mean;
    sxx += dx * dx;
    sxy += dx * (cell->beta - y_mean);
  }
  return sxy / sxx;
}

//! Fills curvature, per-cell MSE, per-candidate IMSE, and the chosen
//! bandwidth on an evaluated report.  A mark contributes wherever it has a
//! curvature estimate and the cell itself is usable; candidates no mark
//! supports stay NaN and cannot be chosen.
inline void complete_report(BandwidthReport& report)
{
  const std::size_t nh = report.hs.size();
  const std::size_t nm = report.marks.size();

  report.curvature.assign(nm, Eigen::VectorXd());
  for (std::size_t m = 0; m < nm; ++m) {
    std::size_t usable = 0;
    for (std::size_t k = 0; k < nh; ++k)
      usable += report.cell(m, k).usable ? 1 : 0;
    if (usable >= 2)
      report.curvature[m] = slope_fit(report, m);
  }

  for (std::size_t m = 0; m < nm; ++m) {
    if (report.curvature[m].size() == 0)
      continue;
    const double c2 = report.curvature[m].squaredNorm();
    for (std::size_t k = 0; k < nh; ++k) {
      BandwidthCell& cell = report.cell(m, k);
      if (!cell.usable)
        continue;
      const double h2 = cell.h * cell.h;
      cell.mse = c2 * h2 * h2 + cell.split_var.sum();
    }
  }

  report.imse.assign(nh, std::numeric_limits<double>::quiet_NaN());
  report.imse_support.assign(nh, 0);
  for (std::size_t k = 0; k < nh; ++k) {
    Kahan total;
    int support = 0;
    for (std::size_t m = 0; m < nm; ++m) {
      const BandwidthCell& cell = report.cell(m, k);
      if (std::isnan(cell.mse))
        continue;
      total.add(cell.mse);
      support += 1;
    }
    report.imse_support[k] = support;
    if (support > 0)
      report.imse[k] = total.value() / static_cast<double>(support);
  }

  std::size_t best = nh;
  for (std::size_t k = 0; k < nh; ++k) {
    if (report.imse_support[k] == 0)
      continue;
    if (best == nh || report.imse[k] < report.imse[best])
      best = k;
  }
  if (best == nh) {
    // A single-candidate grid leaves no slope to fit, so no cell ever gets
    // an MSE; any usable fit still settles the choice.
    if (nh == 1) {
      for (const BandwidthCell& cell : report.cells) {
        if (cell.usable) {
          report.chosen_h = report.hs[0];
          return;
        }
      }
    }
    throw DataError("no usable candidate pairs for bandwidth selection");
  }
  report.chosen_h = report.hs[best];
}

//! The uniform selector: evaluate the grid, then score and choose.
inline BandwidthReport select_uniform(const AnalyticalDataset& data,
                                      const CandidateGrid& grid,
                                      KernelKind kind,
                                      const FitOptions& opts = {},
                                      int threads = 1)
{
  BandwidthReport report = evaluate_candidates(data, grid, kind, opts, threads);
  complete_report(report);
  return report;
}

//! Outcome of the per-mark event-count rule.
struct PerMarkChoice {
  double v = 0.0;
  double h = 0.0;
  int effective_events = 0;  //!< observed events inside the chosen window
  bool saturated = false;    //!< no candidate reached the target
};

//! Smallest candidate whose window around v holds at least `target_events`
//! observed events; falls back to the largest candidate, flagged as
//! saturated, when none does.
inline PerMarkChoice select_per_mark(const AnalyticalDataset& data, double v,
                                     const CandidateGrid& grid,
                                     int target_events,
                                     const FitOptions& opts = {})
{
  if (grid.hs.empty())
    throw DataError("candidate grid has no bandwidths");
  for (std::size_t k = 0; k < grid.hs.size(); ++k) {
    if (!(std::isfinite(grid.hs[k]) && grid.hs[k] > 0.0))
      throw DataError("candidate bandwidths must be positive");
    if (k > 0 && !(grid.hs[k] > grid.hs[k - 1]))
      throw DataError("candidate bandwidths must increase strictly");
  }
  if (!(std::isfinite(v) && v >= 0.0 && v <= 1.0))
    throw DataError("mark of interest must lie in [0, 1]");
  if (target_events < opts.min_effective_events)
    throw DataError("target event count is below the fitting floor");

  PerMarkChoice choice;
  choice.v = v;
  for (double h : grid.hs) {
    choice.h = h;
    choice.effective_events = static_cast<int>(effective_event_count(
      data, v, KernelKind::uniform_window, Bandwidth{h}));
    if (choice.effective_events >= target_events)
      return choice;
  }
  choice.saturated = true;
  return choice;
}

}  // namespace markhaz
