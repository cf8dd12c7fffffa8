#pragma once

#include "markhaz/bandwidth.hpp"
#include "markhaz/common.hpp"
#include "markhaz/core_data.hpp"
#include "markhaz/estimator.hpp"
#include "markhaz/harness.hpp"
#include "markhaz/inference.hpp"
#include "markhaz/simulate.hpp"

#include <json.hpp>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

//! File output and result documents.
//!
//! Every file is written atomically (temp in the target directory, then
//! rename), so readers never observe a half-written result.  JSON
//! documents share a schema version and a metadata block; none of them
//! embed timestamps, so rerunning a seeded command reproduces the output
//! byte for byte.

namespace markhaz {

using json = nlohmann::ordered_json;

inline constexpr int schema_version = 1;

//! Writes `content` to `path` via a sibling temp file and rename.  The
//! temp name is derived from the target, so concurrent writers of the
//! same path are not supported.
inline void atomic_write_text(const std::string& path,
                              const std::string& content)
{
  const std::filesystem::path target(path);
  std::filesystem::path tmp(target);
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out)
      throw DataError("cannot open '" + tmp.string() + "' for writing");
    out << content;
    out.flush();
    if (!out)
      throw DataError("write to '" + tmp.string() + "' failed");
  }
  std::error_code code;
  std::filesystem::rename(tmp, target, code);
  if (code) {
    std::filesystem::remove(tmp, code);
    throw DataError("cannot move temp file onto '" + path + "'");
  }
}

namespace detail {

//! NaN is not representable in JSON; absent values become null.
inline json json_number(double x)
{
  if (std::isnan(x))
    return nullptr;
  return x;
}

inline json json_vector(const Eigen::VectorXd& x)
{
  json out = json::array();
  for (Eigen::Index q = 0; q < x.size(); ++q)
    out.push_back(x(q));
  return out;
}

}  // namespace detail

//! Shared preamble of every JSON document.
inline json document_head(const std::string& kind, json metadata)
{
  metadata["version"] = library_version;
  json doc;
  doc["schema_version"] = schema_version;
  doc["kind"] = kind;
  doc["metadata"] = std::move(metadata);
  return doc;
}

// ------------------------------------------------------------------------
// fitted curves with inference

//! One mark of a fitted curve, with the Wald table when the fit stands.
struct FitRow {
  double v = 0.0;
  double h = 0.0;
  bool converged = false;
  std::size_t effective_events = 0;
  std::string error;  //!< why the mark is unusable, empty when converged
  std::vector<HazardRatioRow> coefficients;
};

//! Runs the inference chain on every usable point of a fitted curve.
//! Failures stay per mark: the row keeps the reason and no coefficients.
//! Rows land in preallocated slots, so any thread count gives the same
//! result.
inline std::vector<FitRow> fit_report_rows(const AnalyticalDataset& data,
                                           const MarkCurve& curve,
                                           ResidualVariant variant,
                                           double level,
                                           const FitOptions& opts = {},
                                           int threads = 1)
{
  std::vector<FitRow> rows(curve.points.size());
  parallel_for(curve.points.size(), threads, [&](std::size_t i) {
    const GridFit& point = curve.points[i];
    FitRow& row = rows[i];
    row.v = point.v;
    row.h = point.bw.h;
    if (!point.usable()) {
      row.error = point.error.empty() ? "fit did not converge" : point.error;
      return;
    }
    const MarkFit& fit = *point.fit;
    row.effective_events = fit.effective_events;
    try {
      const BaselineCurve baseline = breslow_baseline(
        data, fit.v, fit.kernel, fit.bw, fit.beta, opts.eta_bound);
      const ResidualSet residuals =
        score_residuals(data, fit.v, fit.kernel, fit.bw, fit.beta, baseline,
                        variant, opts.eta_bound);
      const SandwichResult sandwich =
        sandwich_variance(data, fit, residuals, opts.max_condition);
      row.coefficients =
        hazard_ratio_table(fit, sandwich, level, data.covariate_names);
      row.converged = true;
    } catch (const Error& failure) {
      row.error = failure.what();
    }
  });
  return rows;
}

inline json fit_document(const std::vector<FitRow>& rows, json metadata)
{
  json doc = document_head("fit", std::move(metadata));
  json marks = json::array();
  for (const FitRow& row : rows) {
    json entry;
    entry["v"] = row.v;
    entry["h"] = row.h;
    entry["converged"] = row.converged;
    entry["effective_events"] = row.effective_events;
    if (!row.error.empty())
      entry["error"] = row.error;
    json coefficients = json::array();
    for (const HazardRatioRow& coef : row.coefficients) {
      json c;
      c["covariate"] = coef.covariate;
      c["beta"] = coef.beta;
      c["se"] = coef.se;
      c["hr"] = coef.hazard_ratio;
      c["ci_low"] = coef.ci_low;
      c["ci_high"] = coef.ci_high;
      c["p_value"] = coef.p_value;
      coefficients.push_back(std::move(c));
    }
    entry["coefficients"] = std::move(coefficients);
    marks.push_back(std::move(entry));
  }
  doc["marks"] = std::move(marks);
  return doc;
}

// ------------------------------------------------------------------------
// plot-ready export

//! Long-format view of a fitted curve: one row per (covariate, mark).
struct PlotRow {
  std::string covariate;
  double mark = 0.0;
  std::optional<double> hr;  //!< empty on non-converged marks, with the CIs
  std::optional<double> ci_low;
  std::optional<double> ci_high;
  bool converged = false;
};

inline std::vector<PlotRow> plot_rows(const std::vector<FitRow>& rows,
                                      const std::vector<std::string>& names)
{
  std::vector<PlotRow> out;
  out.reserve(rows.size() * names.size());
  for (const FitRow& row : rows) {
    for (std::size_t q = 0; q < names.size(); ++q) {
      PlotRow plot;
      plot.covariate = names[q];
      plot.mark = row.v;
      plot.converged = row.converged;
      if (row.converged) {
        const HazardRatioRow& coef = row.coefficients[q];
        plot.hr = coef.hazard_ratio;
        plot.ci_low = coef.ci_low;
        plot.ci_high = coef.ci_high;
      }
      out.push_back(std::move(plot));
    }
  }
  return out;
}

inline std::string plot_csv(const std::vector<PlotRow>& rows)
{
  std::ostringstream out;
  out << "covariate,mark,hr,ci_low,ci_high,converged\n";
  for (const PlotRow& row : rows) {
    out << row.covariate << ',' << detail::format_double(row.mark) << ',';
    if (row.hr)
      out << detail::format_double(*row.hr);
    out << ',';
    if (row.ci_low)
      out << detail::format_double(*row.ci_low);
    out << ',';
    if (row.ci_high)
      out << detail::format_double(*row.ci_high);
    out << ',' << (row.converged ? "true" : "false") << '\n';
  }
  return out.str();
}

//! Writes the long-format CSV for a fitted curve, atomically.
inline void export_plot_data(const std::vector<FitRow>& rows,
                             const std::vector<std::string>& names,
                             const std::string& path)
{
  if (rows.empty())
    throw DataError("nothing to export: the curve has no marks");
  atomic_write_text(path, plot_csv(plot_rows(rows, names)));
}

//! Parses the export format back; the inverse of plot_csv on its output.
inline std::vector<PlotRow> read_plot_table(std::istream& in)
{
  std::string line;
  if (!std::getline(in, line))
    throw DataError("empty plot CSV");
  if (detail::trim(line) != "covariate,mark,hr,ci_low,ci_high,converged")
    throw DataError("unexpected plot CSV header '" + line + "'");

  std::vector<PlotRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty())
      continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != 6)
      throw DataError("line " + std::to_string(line_no) +
                      ": expected 6 fields, got " +
                      std::to_string(fields.size()));
    PlotRow row;
    row.covariate = fields[0];
    row.mark = detail::parse_double(fields[1], line_no, "mark");
    if (fields[5] == "true")
      row.converged = true;
    else if (fields[5] != "false")
      throw DataError("line " + std::to_string(line_no) +
                      ": converged must be true or false");
    const bool has_hr = !fields[2].empty();
    if (has_hr != !fields[3].empty() || has_hr != !fields[4].empty())
      throw DataError("line " + std::to_string(line_no) +
                      ": hr and CI fields must be filled together");
    if (has_hr) {
      row.hr = detail::parse_double(fields[2], line_no, "hr");
      row.ci_low = detail::parse_double(fields[3], line_no, "ci_low");
      row.ci_high = detail::parse_double(fields[4], line_no, "ci_high");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<PlotRow> read_plot_table(const std::string& path)
{
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open '" + path + "'");
  return read_plot_table(in);
}

// ------------------------------------------------------------------------
// bandwidth reports

inline json bandwidth_document(const BandwidthReport& report, json metadata)
{
  json doc = document_head("bandwidth", std::move(metadata));
  doc["hs"] = report.hs;
  doc["marks"] = report.marks;
  doc["split_seed"] = report.split_seed;
  doc["n_splits"] = report.n_splits;
  doc["chosen_h"] = detail::json_number(report.chosen_h);

  json imse = json::array();
  for (double value : report.imse)
    imse.push_back(detail::json_number(value));
  doc["imse"] = std::move(imse);
  doc["imse_support"] = report.imse_support;

  json curvature = json::array();
  for (const Eigen::VectorXd& c : report.curvature) {
    if (c.size() == 0)
      curvature.push_back(nullptr);
    else
      curvature.push_back(detail::json_vector(c));
  }
  doc["curvature"] = std::move(curvature);

  json cells = json::array();
  for (const BandwidthCell& cell : report.cells) {
    json entry;
    entry["v"] = cell.v;
    entry["h"] = cell.h;
    entry["usable"] = cell.usable;
    if (cell.usable) {
      entry["beta"] = detail::json_vector(cell.beta);
      entry["split_var"] = detail::json_vector(cell.split_var);
      entry["mse"] = detail::json_number(cell.mse);
    } else {
      entry["error"] = cell.error;
    }
    cells.push_back(std::move(entry));
  }
  doc["cells"] = std::move(cells);
  return doc;
}

inline json per_mark_document(const std::vector<PerMarkChoice>& choices,
                              json metadata)
{
  json doc = document_head("bandwidth-per-mark", std::move(metadata));
  json rows = json::array();
  for (const PerMarkChoice& choice : choices) {
    json entry;
    entry["v"] = choice.v;
    entry["h"] = choice.h;
    entry["effective_events"] = choice.effective_events;
    entry["saturated"] = choice.saturated;
    rows.push_back(std::move(entry));
  }
  doc["choices"] = std::move(rows);
  return doc;
}

// ------------------------------------------------------------------------
// replication summaries

//! Table layout: one row per (method, mark); aggregate fields are empty
//! when no replication converged, and emp_sd also below two.
inline std::string summary_csv(const SummaryTable& table)
{
  auto field = [](double x) {
    return std::isnan(x) ? std::string() : detail::format_double(x);
  };
  std::ostringstream out;
  out << "method,mark,truth,avg_bias,coverage,emp_sd,avg_se,n_converged\n";
  for (const SummaryRow& row : table.rows) {
    out << method_name(row.method) << ',' << detail::format_double(row.v)
        << ',' << detail::format_double(row.truth) << ','
        << field(row.avg_bias) << ',' << field(row.coverage) << ','
        << (row.emp_sd ? detail::format_double(*row.emp_sd) : std::string())
        << ',' << field(row.avg_se) << ',' << row.n_converged << '\n';
  }
  return out.str();
}

//! Companion document describing how a summary table was produced.
inline json summary_metadata_document(const SummaryTable& table,
                                      json metadata)
{
  metadata["master_seed"] = table.master_seed;
  metadata["replications"] = table.replications;
  metadata["tau_c"] = table.tau_c;
  metadata["kernel"] = kernel_name(table.kernel);
  metadata["residual_variant"] = residual_variant_name(table.residual);
  metadata["ci_level"] = table.ci_level;
  metadata["se_convention"] = table.se_convention;
  json methods = json::array();
  for (Method method : table.methods)
    methods.push_back(method_name(method));
  metadata["methods"] = std::move(methods);
  metadata["marks"] = table.marks;
  return document_head("bench-meta", std::move(metadata));
}

// ------------------------------------------------------------------------
// generator truth records

//! Everything the generator drew, for audits and exact replays.
inline json truth_document(const SimulatedStudy& study, json metadata)
{
  metadata["tau_c"] = study.tau_c;
  metadata["calibrated"] = study.calibrated;
  if (study.calibrated) {
    metadata["calibration_achieved"] = study.calibration.achieved;
    metadata["calibration_pilot_n"] = study.calibration.pilot_n;
  }
  json doc = document_head("truth", std::move(metadata));
  json subjects = json::array();
  for (const TruthRecord& record : study.truth) {
    json entry;
    entry["id"] = record.id;
    entry["z"] = record.z;
    entry["a"] = record.a;
    entry["censor"] = record.censor;
    entry["observed"] = record.observed;
    json episodes = json::array();
    for (const EpisodeTruth& episode : record.episodes) {
      json e;
      e["b"] = episode.b;
      e["u_gap"] = episode.u_gap;
      e["u_mark"] = episode.u_mark;
      e["t"] = episode.t;
      e["v"] = episode.v;
      episodes.push_back(std::move(e));
    }
    entry["episodes"] = std::move(episodes);
    subjects.push_back(std::move(entry));
  }
  doc["subjects"] = std::move(subjects);
  return doc;
}

//! Serializes with two-space indentation and a trailing newline, the way
//! every JSON file in this project is written.
inline std::string pretty(const json& doc)
{
  return doc.dump(2) + "\n";
}

}  // namespace markhaz
