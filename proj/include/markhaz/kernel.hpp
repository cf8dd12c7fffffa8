#pragma once

#include "markhaz/common.hpp"
#include "markhaz/core_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

//! Mark-localization kernels.
//!
//! The localized kinds integrate to one and vanish outside (-1, 1); the
//! support is open at the endpoints so "inside the window" always means
//! |mark - v| < h, matching effective_event_count() exactly.  all_mass gives
//! every event unit weight and ignores the bandwidth; fitting with it
//! collapses the estimator to the non-mark-specific comparator.

namespace markhaz {

enum class KernelKind { epanechnikov, uniform_window, all_mass };

struct Bandwidth {
  double h = 0.0;
};

inline double kernel_eval(KernelKind kind, double x)
{
  switch (kind) {
    case KernelKind::epanechnikov:
      if (std::fabs(x) >= 1.0)
        return 0.0;
      return 0.75 * (1.0 - x * x);
    case KernelKind::uniform_window:
      return std::fabs(x) < 1.0 ? 0.5 : 0.0;
    case KernelKind::all_mass:
      return 1.0;
  }
  return 0.0;
}

inline bool is_localized(KernelKind kind)
{
  return kind != KernelKind::all_mass;
}

inline void check_bandwidth(KernelKind kind, Bandwidth bw)
{
  if (!is_localized(kind))
    return;
  if (!(bw.h > 0.0 && bw.h <= 1.0))
    throw DataError("bandwidth must lie in (0, 1] for localized kernels");
}

//! K_h(u - v) = K((u - v)/h) / h for localized kernels; 1 for all_mass.
inline double scaled_kernel(KernelKind kind, Bandwidth bw, double u, double v)
{
  if (!is_localized(kind))
    return 1.0;
  check_bandwidth(kind, bw);
  return kernel_eval(kind, (u - v) / bw.h) / bw.h;
}

//! Number of observed events with mark strictly inside (v - h, v + h);
//! with all_mass, every observed event counts.
inline std::size_t effective_event_count(const AnalyticalDataset& data,
                                         double v, KernelKind kind,
                                         Bandwidth bw)
{
  if (!is_localized(kind))
    return data.event_marks.size();
  check_bandwidth(kind, bw);
  const auto lo = std::upper_bound(data.event_marks.begin(),
                                   data.event_marks.end(), v - bw.h);
  const auto hi = std::lower_bound(lo, data.event_marks.end(), v + bw.h);
  return static_cast<std::size_t>(hi - lo);
}

inline const char* kernel_name(KernelKind kind)
{
  switch (kind) {
    case KernelKind::epanechnikov:
      return "epanechnikov";
    case KernelKind::uniform_window:
      return "uniform_window";
    case KernelKind::all_mass:
      return "all_mass";
  }
  return "?";
}

inline KernelKind kernel_from_name(const std::string& name)
{
  if (name == "epanechnikov")
    return KernelKind::epanechnikov;
  if (name == "uniform" || name == "uniform_window")
    return KernelKind::uniform_window;
  if (name == "allmass" || name == "all_mass")
    return KernelKind::all_mass;
  throw DataError("unknown kernel '" + name +
                  "' (expected epanechnikov, uniform or allmass)");
}

}  // namespace markhaz
