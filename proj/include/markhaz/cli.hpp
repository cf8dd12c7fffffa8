#pragma once

#include "markhaz/bandwidth.hpp"
#include "markhaz/common.hpp"
#include "markhaz/core_data.hpp"
#include "markhaz/estimator.hpp"
#include "markhaz/harness.hpp"
#include "markhaz/inference.hpp"
#include "markhaz/io.hpp"
#include "markhaz/kernel.hpp"
#include "markhaz/simulate.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

//! The command-line front end: `fit`, `bandwidth`, `simulate`, `bench`.
//!
//! `dispatch` returns 0 on success, 1 on a usage problem (bad flags,
//! malformed values, unknown config keys) and 2 on a data or convergence
//! problem.  Every subcommand is deterministic given its flags, including
//! the seed, and writes its files atomically.  Options may also come from
//! a `--config` key=value file, with command-line flags taking precedence
//! and unknown keys rejected.

namespace markhaz {
namespace detail {

inline double parse_strict_double(const std::string& text,
                                  const std::string& what)
{
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc{} || res.ptr != last || !std::isfinite(value))
    throw DataError("cannot parse " + what + " '" + text + "'");
  return value;
}

//! "lo:hi:step" -> lo, lo+step, ..., up to hi inclusive.
inline std::vector<double> parse_grid_spec(const std::string& spec)
{
  const auto first = spec.find(':');
  const auto second = spec.find(':', first + 1);
  if (first == std::string::npos || second == std::string::npos ||
      spec.find(':', second + 1) != std::string::npos)
    throw DataError("grid must look like lo:hi:step, got '" + spec + "'");
  const double lo = parse_strict_double(spec.substr(0, first), "grid start");
  const double hi =
    parse_strict_double(spec.substr(first + 1, second - first - 1),
                        "grid end");
  const double step = parse_strict_double(spec.substr(second + 1),
                                          "grid step");
  if (!(lo > 0.0 && hi >= lo && step > 0.0))
    throw DataError("grid needs 0 < lo <= hi and step > 0");

  std::vector<double> hs;
  for (int k = 0;; ++k) {
    const double h = lo + k * step;
    if (h > hi + step * 1e-9)
      break;
    hs.push_back(h);
  }
  return hs;
}

//! "tau=<x>" fixes the horizon; "target=<p>" calibrates toward p.
struct CensorSpec {
  std::optional<double> tau;
  std::optional<double> target;
};

inline CensorSpec parse_censor_spec(const std::string& spec)
{
  const auto eq = spec.find('=');
  if (eq == std::string::npos)
    throw DataError("censor must look like tau=<x> or target=<p>, got '" +
                    spec + "'");
  const std::string key = spec.substr(0, eq);
  const double value = parse_strict_double(spec.substr(eq + 1), "censor");
  CensorSpec out;
  if (key == "tau") {
    if (!(value > 0.0))
      throw DataError("censoring horizon must be positive");
    out.tau = value;
  } else if (key == "target") {
    if (!(value > 0.0 && value < 1.0))
      throw DataError("censoring target must lie strictly inside (0, 1)");
    out.target = value;
  } else {
    throw DataError("censor must look like tau=<x> or target=<p>, got '" +
                    spec + "'");
  }
  return out;
}

//! Wraps a throwing parser into a CLI11 validator, so malformed values
//! are usage errors rather than data errors.
template <typename Parser>
CLI::Validator format_check(const std::string& name, Parser parser)
{
  return CLI::Validator(
    [parser](std::string& value) -> std::string {
      try {
        parser(value);
      } catch (const Error& failure) {
        return failure.what();
      }
      return {};
    },
    name);
}

inline AnalyticalDataset load_dataset(const std::string& path)
{
  const GapTable table = read_gap_table(path);
  AnalyticalDataset data = build_analytical_dataset(table.subjects);
  data.covariate_names = table.covariate_names;
  return data;
}

inline void emit(const std::string& path, const std::string& content,
                 std::ostream& out)
{
  if (path.empty())
    out << content;
  else
    atomic_write_text(path, content);
}

// ----------------------------------------------------------------------
// subcommand argument bundles and runners

struct FitArgs {
  std::string data_path;
  std::vector<double> marks;
  std::vector<double> bandwidths;
  int target_events = 0;
  std::string kernel = "epanechnikov";
  std::string residual = "compensator-smoothed";
  double level = 0.95;
  int threads = 1;
  std::string out;
  std::string plot_out;
};

inline int run_fit(const FitArgs& args, std::ostream& out, std::ostream& err)
{
  const AnalyticalDataset data = load_dataset(args.data_path);
  const KernelKind kind = kernel_from_name(args.kernel);
  const ResidualVariant variant = residual_variant_from_name(args.residual);
  const FitOptions opts;

  json metadata;
  metadata["command"] = "fit";
  metadata["data"] = args.data_path;
  metadata["dataset_fingerprint"] = dataset_fingerprint(data);
  metadata["marks"] = args.marks;
  metadata["kernel"] = kernel_name(kind);
  metadata["residual_variant"] = residual_variant_name(variant);
  metadata["ci_level"] = args.level;
  metadata["se_convention"] = SandwichResult{}.scaling;

  std::vector<Bandwidth> bandwidths;
  if (!args.bandwidths.empty()) {
    bandwidths.reserve(args.bandwidths.size());
    for (double h : args.bandwidths)
      bandwidths.push_back(Bandwidth{h});
    metadata["bandwidths"] = args.bandwidths;
  } else {
    // The count rule searches the windows the interior guard permits; a
    // mark too close to the edge for any candidate keeps the narrowest one
    // so its failure is reported against a concrete window.
    const std::vector<double> grid = default_bandwidth_grid();
    std::vector<double> resolved;
    bandwidths.reserve(args.marks.size());
    for (double v : args.marks) {
      const std::vector<double> allowed = guarded_candidates(grid, v);
      double h = grid.front();
      if (!allowed.empty()) {
        CandidateGrid candidates;
        candidates.hs = allowed;
        candidates.marks = {v};
        h = select_per_mark(data, v, candidates, args.target_events, opts).h;
      }
      bandwidths.push_back(Bandwidth{h});
      resolved.push_back(h);
    }
    metadata["target_events"] = args.target_events;
    metadata["bandwidths"] = resolved;
  }

  const MarkCurve curve = fit_grid(data, args.marks, kind, bandwidths, opts);
  const std::vector<FitRow> rows =
    fit_report_rows(data, curve, variant, args.level, opts, args.threads);

  const bool any_converged =
    std::any_of(rows.begin(), rows.end(),
                [](const FitRow& row) { return row.converged; });
  if (!any_converged) {
    err << "markhaz: no mark could be fitted: " << rows.front().error
        << "\n";
    return 2;
  }

  emit(args.out, pretty(fit_document(rows, std::move(metadata))), out);
  if (!args.plot_out.empty())
    export_plot_data(rows, data.covariate_names, args.plot_out);
  return 0;
}

struct BandwidthArgs {
  std::string data_path;
  std::vector<double> marks;
  std::string grid = "0.05:0.80:0.01";
  std::string mode = "uniform";
  int target_events = 1000;
  std::uint64_t seed = 1;
  int splits = 1;
  std::string kernel = "epanechnikov";
  int threads = 1;
  std::string out;
};

inline int run_bandwidth(const BandwidthArgs& args, std::ostream& out)
{
  const AnalyticalDataset data = load_dataset(args.data_path);
  const KernelKind kind = kernel_from_name(args.kernel);

  CandidateGrid grid;
  grid.hs = parse_grid_spec(args.grid);
  grid.marks = args.marks;
  grid.split_seed = args.seed;
  grid.n_splits = args.splits;

  json metadata;
  metadata["command"] = "bandwidth";
  metadata["data"] = args.data_path;
  metadata["dataset_fingerprint"] = dataset_fingerprint(data);
  metadata["mode"] = args.mode;
  metadata["grid"] = args.grid;
  metadata["kernel"] = kernel_name(kind);

  json doc;
  if (args.mode == "uniform") {
    metadata["split_seed"] = args.seed;
    metadata["n_splits"] = args.splits;
    const BandwidthReport report =
      select_uniform(data, grid, kind, {}, args.threads);
    doc = bandwidth_document(report, std::move(metadata));
  } else {
    metadata["target_events"] = args.target_events;
    std::vector<PerMarkChoice> choices;
    choices.reserve(args.marks.size());
    for (double v : args.marks)
      choices.push_back(select_per_mark(data, v, grid, args.target_events));
    doc = per_mark_document(choices, std::move(metadata));
  }
  emit(args.out, pretty(doc), out);
  return 0;
}

struct SimulateArgs {
  int n = 1000;
  int J = 5;
  double beta0 = 0.3;
  double beta1 = -0.5;
  double beta2 = 0.5;
  std::string form = "linear";
  double rho = 0.25;
  std::string censor = "target=0.25";
  std::uint64_t seed = 1;
  std::string out;
  std::string truth_out;
};

inline SimConfig simulate_config(const SimulateArgs& args)
{
  SimConfig config;
  config.n = args.n;
  config.J = args.J;
  config.beta0 = args.beta0;
  config.beta1 = args.beta1;
  config.beta2 = args.beta2;
  config.beta_form = beta_form_from_name(args.form);
  config.rho = args.rho;
  config.seed = args.seed;
  const CensorSpec censor = parse_censor_spec(args.censor);
  if (censor.tau)
    config.tau_c = *censor.tau;
  else
    config.censor_target = *censor.target;
  return config;
}

inline int run_simulate(const SimulateArgs& args)
{
  const SimConfig config = simulate_config(args);
  const SimulatedStudy study = generate_dataset(config);

  std::ostringstream csv;
  write_gap_table(csv, study.subjects, {"z1"});
  atomic_write_text(args.out, csv.str());

  if (!args.truth_out.empty()) {
    json metadata;
    metadata["command"] = "simulate";
    metadata["n"] = config.n;
    metadata["J"] = config.J;
    metadata["beta0"] = config.beta0;
    metadata["beta1"] = config.beta1;
    metadata["beta2"] = config.beta2;
    metadata["form"] = beta_form_name(config.beta_form);
    metadata["rho"] = config.rho;
    metadata["censor"] = args.censor;
    metadata["seed"] = config.seed;
    atomic_write_text(args.truth_out,
                      pretty(truth_document(study, std::move(metadata))));
  }
  return 0;
}

struct BenchArgs {
  std::string setting = "lin1";
  int reps = 200;
  int n = 500;
  std::uint64_t seed = 2026;
  int J = 5;
  double beta0 = 0.3;
  double beta1 = -0.5;
  double beta2 = 0.5;
  std::string form = "linear";
  double rho = 0.25;
  std::string censor = "target=0.25";
  std::vector<std::string> methods{"MS_per_mark_h", "NonMS"};
  std::vector<double> marks{0.1, 0.3, 0.5, 0.7, 0.9};
  int target_events = 0;
  std::optional<double> uniform_h;
  std::uint64_t split_seed = 1;
  int splits = 1;
  std::string kernel = "epanechnikov";
  std::string residual = "compensator-smoothed";
  double level = 0.95;
  int threads = 1;
  std::string out;
};

inline int run_bench(const BenchArgs& args)
{
  StudyConfig study;
  if (args.setting == "custom") {
    study.sim.J = args.J;
    study.sim.beta0 = args.beta0;
    study.sim.beta1 = args.beta1;
    study.sim.beta2 = args.beta2;
    study.sim.beta_form = beta_form_from_name(args.form);
    study.sim.rho = args.rho;
  } else {
    study.sim = named_setting(args.setting);
  }
  study.sim.n = args.n;
  const CensorSpec censor = parse_censor_spec(args.censor);
  if (censor.tau)
    study.sim.tau_c = *censor.tau;
  else
    study.sim.censor_target = *censor.target;

  study.methods.clear();
  for (const std::string& name : args.methods)
    study.methods.push_back(method_from_name(name));
  study.marks = args.marks;
  study.replications = args.reps;
  study.master_seed = args.seed;
  study.bandwidth.target_events = args.target_events;
  study.bandwidth.uniform_h = args.uniform_h;
  study.bandwidth.split_seed = args.split_seed;
  study.bandwidth.n_splits = args.splits;
  study.kernel = kernel_from_name(args.kernel);
  study.residual = residual_variant_from_name(args.residual);
  study.ci_level = args.level;

  const SummaryTable table = run_replications(study, args.threads);
  atomic_write_text(args.out, summary_csv(table));

  json metadata;
  metadata["command"] = "bench";
  metadata["setting"] = args.setting;
  metadata["n"] = args.n;
  metadata["J"] = study.sim.J;
  metadata["beta0"] = study.sim.beta0;
  metadata["beta1"] = study.sim.beta1;
  metadata["beta2"] = study.sim.beta2;
  metadata["form"] = beta_form_name(study.sim.beta_form);
  metadata["rho"] = study.sim.rho;
  metadata["censor"] = args.censor;
  metadata["target_events"] = study.bandwidth.target_events > 0
                                ? study.bandwidth.target_events
                                : args.n;
  if (args.uniform_h)
    metadata["uniform_h"] = *args.uniform_h;
  atomic_write_text(args.out + ".meta.json",
                    pretty(summary_metadata_document(table,
                                                     std::move(metadata))));
  return 0;
}

}  // namespace detail

//! Parses and runs one command line (without the program name).
inline int dispatch(std::vector<std::string> args,
                    std::ostream& out = std::cout,
                    std::ostream& err = std::cerr)
{
  CLI::App app{"mark-specific hazards for recurrent gap times", "markhaz"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(library_version));
  app.set_config("--config", "",
                 "key=value file; command-line flags take precedence");
  app.allow_config_extras(false);

  const auto censor_check = detail::format_check(
    "CENSOR", [](const std::string& s) { detail::parse_censor_spec(s); });
  const auto grid_check = detail::format_check(
    "GRID", [](const std::string& s) { detail::parse_grid_spec(s); });
  const auto unit_interval = CLI::Range(0.0, 1.0);

  detail::FitArgs fit_args;
  CLI::App* fit = app.add_subcommand(
    "fit", "fit the model at given marks and report hazard ratios");
  fit->add_option("--data", fit_args.data_path, "gap-record CSV")
    ->required();
  fit->add_option("--marks", fit_args.marks, "marks to fit, increasing")
    ->required()
    ->delimiter(',')
    ->check(unit_interval);
  CLI::Option* fit_bandwidth_opt =
    fit->add_option("--bandwidth", fit_args.bandwidths,
                    "one shared bandwidth or one per mark")
      ->delimiter(',');
  CLI::Option* fit_target_opt =
    fit->add_option("--target-events", fit_args.target_events,
                    "pick each mark's bandwidth by this event count")
      ->check(CLI::PositiveNumber);
  fit_bandwidth_opt->excludes(fit_target_opt);
  fit->add_option("--kernel", fit_args.kernel, "localization kernel")
    ->capture_default_str()
    ->check(CLI::IsMember(
      {"epanechnikov", "uniform", "uniform_window", "all_mass", "allmass"}));
  fit->add_option("--residual", fit_args.residual,
                  "residual variant for the sandwich variance")
    ->capture_default_str()
    ->check(CLI::IsMember(
      {"literal", "compensator-smoothed", "compensator_smoothed"}));
  fit->add_option("--level", fit_args.level, "confidence level")
    ->capture_default_str();
  fit->add_option("--threads", fit_args.threads, "worker threads")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  fit->add_option("--out", fit_args.out, "result JSON (default: stdout)");
  fit->add_option("--plot-out", fit_args.plot_out,
                  "long-format CSV of hazard ratios and intervals");

  detail::BandwidthArgs bw_args;
  CLI::App* bandwidth = app.add_subcommand(
    "bandwidth", "score candidate bandwidths on a dataset");
  bandwidth->add_option("--data", bw_args.data_path, "gap-record CSV")
    ->required();
  bandwidth->add_option("--marks", bw_args.marks, "marks of interest")
    ->required()
    ->delimiter(',')
    ->check(unit_interval);
  bandwidth->add_option("--grid", bw_args.grid, "candidates as lo:hi:step")
    ->capture_default_str()
    ->check(grid_check);
  bandwidth->add_option("--mode", bw_args.mode,
                        "uniform (IMSE) or per-mark (event counts)")
    ->capture_default_str()
    ->check(CLI::IsMember({"uniform", "per-mark"}));
  bandwidth
    ->add_option("--target-events", bw_args.target_events,
                 "per-mark mode: events wanted inside the window")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  bandwidth->add_option("--seed", bw_args.seed, "half-split seed")
    ->capture_default_str();
  bandwidth->add_option("--splits", bw_args.splits, "half-split rounds")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  bandwidth->add_option("--kernel", bw_args.kernel, "localization kernel")
    ->capture_default_str()
    ->check(CLI::IsMember({"epanechnikov", "uniform", "uniform_window"}));
  bandwidth->add_option("--threads", bw_args.threads, "worker threads")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  bandwidth->add_option("--out", bw_args.out,
                        "report JSON (default: stdout)");

  detail::SimulateArgs sim_args;
  CLI::App* simulate = app.add_subcommand(
    "simulate", "generate a synthetic gap-record dataset");
  simulate->add_option("--n", sim_args.n, "subjects")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  simulate->add_option("--J", sim_args.J, "latent episodes per subject")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  simulate->add_option("--beta0", sim_args.beta0, "baseline mark loading")
    ->capture_default_str();
  simulate->add_option("--beta1", sim_args.beta1, "effect intercept")
    ->capture_default_str();
  simulate->add_option("--beta2", sim_args.beta2, "effect slope")
    ->capture_default_str();
  simulate->add_option("--form", sim_args.form, "effect shape in the mark")
    ->capture_default_str()
    ->check(CLI::IsMember({"linear", "quadratic"}));
  simulate->add_option("--rho", sim_args.rho, "frailty share of variance")
    ->capture_default_str();
  simulate->add_option("--censor", sim_args.censor,
                       "tau=<x> fixed horizon or target=<p> calibrated")
    ->capture_default_str()
    ->check(censor_check);
  simulate->add_option("--seed", sim_args.seed, "generator seed")
    ->capture_default_str();
  simulate->add_option("--out", sim_args.out, "output CSV")->required();
  simulate->add_option("--truth-out", sim_args.truth_out,
                       "sidecar JSON with every latent draw");

  detail::BenchArgs bench_args;
  CLI::App* bench = app.add_subcommand(
    "bench", "replication study: bias, coverage, SD and SE per mark");
  auto* setting_opt =
    bench->add_option("--setting", bench_args.setting, "simulation setting")
      ->capture_default_str()
      ->check(CLI::IsMember({"lin1", "lin2", "quad1", "quad2", "custom"}));
  bench->add_option("--reps", bench_args.reps, "replications")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  bench->add_option("--n", bench_args.n, "subjects per replication")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  bench->add_option("--seed", bench_args.seed, "master seed")
    ->capture_default_str();
  std::vector<CLI::Option*> custom_only;
  custom_only.push_back(
    bench->add_option("--J", bench_args.J, "custom: episodes per subject")
      ->check(CLI::PositiveNumber));
  custom_only.push_back(
    bench->add_option("--beta0", bench_args.beta0,
                      "custom: baseline mark loading"));
  custom_only.push_back(
    bench->add_option("--beta1", bench_args.beta1,
                      "custom: effect intercept"));
  custom_only.push_back(
    bench->add_option("--beta2", bench_args.beta2, "custom: effect slope"));
  custom_only.push_back(
    bench->add_option("--form", bench_args.form, "custom: effect shape")
      ->check(CLI::IsMember({"linear", "quadratic"})));
  custom_only.push_back(
    bench->add_option("--rho", bench_args.rho,
                      "custom: frailty share of variance"));
  bench->add_option("--censor", bench_args.censor,
                    "tau=<x> fixed horizon or target=<p> calibrated")
    ->capture_default_str()
    ->check(censor_check);
  bench->add_option("--methods", bench_args.methods, "methods to compare")
    ->capture_default_str()
    ->delimiter(',')
    ->check(CLI::IsMember({"MS_uniform_h", "MS_per_mark_h", "NonMS"}));
  bench->add_option("--marks", bench_args.marks, "marks to evaluate")
    ->capture_default_str()
    ->delimiter(',')
    ->check(unit_interval);
  bench->add_option("--target-events", bench_args.target_events,
                    "per-mark window target; 0 means one per subject")
    ->capture_default_str();
  bench->add_option("--uniform-h", bench_args.uniform_h,
                    "fixed bandwidth for MS_uniform_h");
  bench->add_option("--split-seed", bench_args.split_seed,
                    "half-split seed for selected uniform bandwidths")
    ->capture_default_str();
  bench->add_option("--splits", bench_args.splits, "half-split rounds")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  bench->add_option("--kernel", bench_args.kernel, "localization kernel")
    ->capture_default_str()
    ->check(CLI::IsMember({"epanechnikov", "uniform", "uniform_window"}));
  bench->add_option("--residual", bench_args.residual,
                    "residual variant for the sandwich variance")
    ->capture_default_str()
    ->check(CLI::IsMember(
      {"literal", "compensator-smoothed", "compensator_smoothed"}));
  bench->add_option("--level", bench_args.level, "confidence level")
    ->capture_default_str();
  bench->add_option("--threads", bench_args.threads, "worker threads")
    ->capture_default_str()
    ->check(CLI::PositiveNumber);
  bench->add_option("--out", bench_args.out,
                    "summary CSV; metadata goes to <out>.meta.json")
    ->required();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(std::move(args));
  } catch (const CLI::ParseError& parse_error) {
    const int code = app.exit(parse_error, out, err);
    return code == 0 ? 0 : 1;
  }

  if (app.got_subcommand(fit) && fit_bandwidth_opt->count() == 0 &&
      fit_target_opt->count() == 0) {
    err << "markhaz: fit needs --bandwidth or --target-events\n";
    return 1;
  }

  if (app.got_subcommand(bench) && bench_args.setting != "custom") {
    for (const CLI::Option* option : custom_only) {
      if (option->count() > 0) {
        err << "markhaz: " << option->get_name()
            << " needs --setting custom (explicit settings are fixed)\n";
        return 1;
      }
    }
  }
  (void)setting_opt;

  try {
    if (app.got_subcommand(fit))
      return detail::run_fit(fit_args, out, err);
    if (app.got_subcommand(bandwidth))
      return detail::run_bandwidth(bw_args, out);
    if (app.got_subcommand(simulate))
      return detail::run_simulate(sim_args);
    return detail::run_bench(bench_args);
  } catch (const Error& failure) {
    err << "markhaz: " << failure.what() << "\n";
    return 2;
  }
}

}  // namespace markhaz
