#include "markhaz/cli.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

using markhaz::DataError;
using markhaz::json;
using markhaz::PlotRow;

namespace {

namespace fs = std::filesystem;

//! A fresh directory under the system temp root, removed on scope exit.
struct ScratchDir {
  fs::path path;

  explicit ScratchDir(const std::string& name)
    : path(fs::temp_directory_path() / ("markhaz_cli_" + name))
  {
    fs::remove_all(path);
    fs::create_directories(path);
  }

  ~ScratchDir() { fs::remove_all(path); }

  std::string file(const std::string& name) const
  {
    return (path / name).string();
  }
};

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args)
{
  std::ostringstream out;
  std::ostringstream err;
  CliResult result;
  result.code = markhaz::dispatch(std::move(args), out, err);
  result.out = out.str();
  result.err = err.str();
  return result;
}

std::string slurp(const std::string& path)
{
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream content;
  content << in.rdbuf();
  return content.str();
}

json load_json(const std::string& path)
{
  return json::parse(slurp(path));
}

//! Simulates a small dataset into `dir` and returns the CSV path.
std::string small_dataset(const ScratchDir& dir, int n = 250,
                          const std::string& seed = "3")
{
  const std::string path = dir.file("sim.csv");
  const CliResult sim = run({"simulate", "--n", std::to_string(n), "--seed",
                             seed, "--censor", "tau=2.0", "--out", path});
  REQUIRE(sim.code == 0);
  return path;
}

bool no_temp_litter(const ScratchDir& dir)
{
  for (const auto& entry : fs::directory_iterator(dir.path))
    if (entry.path().extension() == ".tmp")
      return false;
  return true;
}

}  // namespace

TEST_CASE("simulated data fits end to end through the CLI")
{
  ScratchDir dir("fit_roundtrip");
  const std::string data = small_dataset(dir);

  const std::string fit_path = dir.file("fit.json");
  const std::string plot_path = dir.file("plot.csv");
  const CliResult fit =
    run({"fit", "--data", data, "--marks", "0.3,0.5,0.7", "--target-events",
         "80", "--out", fit_path, "--plot-out", plot_path});
  REQUIRE(fit.code == 0);
  REQUIRE(fit.err.empty());

  const json doc = load_json(fit_path);
  CHECK(doc["schema_version"] == markhaz::schema_version);
  CHECK(doc["kind"] == "fit");
  CHECK(doc["metadata"]["command"] == "fit");
  CHECK(doc["metadata"]["target_events"] == 80);
  CHECK(doc["metadata"]["residual_variant"] == "compensator-smoothed");
  CHECK(doc["metadata"]["marks"] == json::array({0.3, 0.5, 0.7}));
  CHECK_FALSE(doc["metadata"].contains("threads"));

  REQUIRE(doc["marks"].size() == 3);
  for (const json& mark : doc["marks"]) {
    REQUIRE(mark["converged"] == true);
    REQUIRE(mark["coefficients"].size() == 1);
    const json& coef = mark["coefficients"][0];
    CHECK(coef["covariate"] == "z1");
    const double hr = coef["hr"].get<double>();
    CHECK(hr > 0.0);
    CHECK(coef["ci_low"].get<double>() < hr);
    CHECK(coef["ci_high"].get<double>() > hr);
    const double p = coef["p_value"].get<double>();
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
    CHECK(mark["effective_events"].get<int>() >= 80);
  }

  const std::vector<PlotRow> plot = markhaz::read_plot_table(plot_path);
  REQUIRE(plot.size() == 3);
  for (std::size_t m = 0; m < plot.size(); ++m) {
    CHECK(plot[m].converged);
    CHECK(plot[m].hr.has_value());
    CHECK(*plot[m].hr ==
          doc["marks"][m]["coefficients"][0]["hr"].get<double>());
  }
  CHECK(no_temp_litter(dir));
}

TEST_CASE("boundary marks fail the whole fit with exit code two")
{
  ScratchDir dir("fit_boundary");
  const std::string data = small_dataset(dir, 150);

  const CliResult fit = run({"fit", "--data", data, "--marks", "0.02",
                             "--bandwidth", "0.05", "--out",
                             dir.file("fit.json")});
  CHECK(fit.code == 2);
  CHECK(fit.err.find("interior guard") != std::string::npos);
  CHECK_FALSE(fs::exists(dir.file("fit.json")));
}

TEST_CASE("partial fit failures keep the run alive")
{
  ScratchDir dir("fit_partial");
  const std::string data = small_dataset(dir);

  const std::string fit_path = dir.file("fit.json");
  const std::string plot_path = dir.file("plot.csv");
  const CliResult fit =
    run({"fit", "--data", data, "--marks", "0.02,0.5", "--bandwidth",
         "0.05,0.25", "--out", fit_path, "--plot-out", plot_path});
  REQUIRE(fit.code == 0);

  const json doc = load_json(fit_path);
  REQUIRE(doc["marks"].size() == 2);
  CHECK(doc["marks"][0]["converged"] == false);
  CHECK(doc["marks"][0]["error"].get<std::string>().find("interior guard") !=
        std::string::npos);
  CHECK(doc["marks"][0]["coefficients"].empty());
  CHECK(doc["marks"][1]["converged"] == true);

  const std::vector<PlotRow> plot = markhaz::read_plot_table(plot_path);
  REQUIRE(plot.size() == 2);
  CHECK_FALSE(plot[0].converged);
  CHECK_FALSE(plot[0].hr.has_value());
  CHECK_FALSE(plot[0].ci_low.has_value());
  CHECK(plot[1].converged);
  CHECK(plot[1].hr.has_value());
}

TEST_CASE("fit accepts one shared bandwidth or one per mark and nothing else")
{
  ScratchDir dir("fit_bw_count");
  const std::string data = small_dataset(dir, 150);

  CHECK(run({"fit", "--data", data, "--marks", "0.4,0.6", "--bandwidth",
             "0.3", "--out", dir.file("a.json")})
          .code == 0);
  CHECK(run({"fit", "--data", data, "--marks", "0.4,0.6", "--bandwidth",
             "0.3,0.35", "--out", dir.file("b.json")})
          .code == 0);
  const CliResult mismatched =
    run({"fit", "--data", data, "--marks", "0.4,0.6", "--bandwidth",
         "0.3,0.35,0.4", "--out", dir.file("c.json")});
  CHECK(mismatched.code == 2);
}

TEST_CASE("every subcommand reruns byte for byte")
{
  ScratchDir dir("rerun");
  const std::string data = small_dataset(dir, 200, "11");

  for (int round = 0; round < 2; ++round) {
    const std::string tag = round == 0 ? "a" : "b";
    REQUIRE(run({"simulate", "--n", "200", "--seed", "11", "--out",
                 dir.file("sim_" + tag + ".csv"), "--truth-out",
                 dir.file("truth_" + tag + ".json")})
              .code == 0);
    REQUIRE(run({"fit", "--data", data, "--marks", "0.3,0.6",
                 "--target-events", "120", "--out",
                 dir.file("fit_" + tag + ".json"), "--plot-out",
                 dir.file("plot_" + tag + ".csv")})
              .code == 0);
    REQUIRE(run({"bandwidth", "--data", data, "--marks", "0.4,0.6",
                 "--grid", "0.2:0.4:0.1", "--out",
                 dir.file("bw_" + tag + ".json")})
              .code == 0);
    REQUIRE(run({"bench", "--setting", "lin1", "--reps", "3", "--n", "100",
                 "--marks", "0.5", "--censor", "tau=2.0", "--out",
                 dir.file("bench_" + tag + ".csv")})
              .code == 0);
  }

  CHECK(slurp(dir.file("sim_a.csv")) == slurp(dir.file("sim_b.csv")));
  CHECK(slurp(dir.file("truth_a.json")) == slurp(dir.file("truth_b.json")));
  CHECK(slurp(dir.file("fit_a.json")) == slurp(dir.file("fit_b.json")));
  CHECK(slurp(dir.file("plot_a.csv")) == slurp(dir.file("plot_b.csv")));
  CHECK(slurp(dir.file("bw_a.json")) == slurp(dir.file("bw_b.json")));
  CHECK(slurp(dir.file("bench_a.csv")) == slurp(dir.file("bench_b.csv")));
  CHECK(slurp(dir.file("bench_a.csv.meta.json")) ==
        slurp(dir.file("bench_b.csv.meta.json")));
  CHECK(no_temp_litter(dir));
}

TEST_CASE("thread count never changes the output bytes")
{
  ScratchDir dir("threads");
  const std::string data = small_dataset(dir, 200, "13");

  for (const std::string threads : {"1", "8"}) {
    const std::string tag = "t" + threads;
    REQUIRE(run({"fit", "--data", data, "--marks", "0.3,0.5,0.7",
                 "--target-events", "120", "--threads", threads, "--out",
                 dir.file("fit_" + tag + ".json")})
              .code == 0);
    REQUIRE(run({"bandwidth", "--data", data, "--marks", "0.4,0.6",
                 "--grid", "0.2:0.4:0.05", "--threads", threads, "--out",
                 dir.file("bw_" + tag + ".json")})
              .code == 0);
    REQUIRE(run({"bench", "--setting", "lin1", "--reps", "4", "--n", "100",
                 "--marks", "0.4,0.6", "--censor", "tau=2.0", "--threads",
                 threads, "--out", dir.file("bench_" + tag + ".csv")})
              .code == 0);
  }

  CHECK(slurp(dir.file("fit_t1.json")) == slurp(dir.file("fit_t8.json")));
  CHECK(slurp(dir.file("bw_t1.json")) == slurp(dir.file("bw_t8.json")));
  CHECK(slurp(dir.file("bench_t1.csv")) == slurp(dir.file("bench_t8.csv")));
  CHECK(slurp(dir.file("bench_t1.csv.meta.json")) ==
        slurp(dir.file("bench_t8.csv.meta.json")));
}

TEST_CASE("config files drive a run and flags win over them")
{
  ScratchDir dir("config");
  const std::string data = small_dataset(dir, 150);

  {
    std::ofstream ini(dir.file("fit.ini"));
    ini << "[fit]\n"
        << "data = " << data << "\n"
        << "marks = 0.3,0.5\n"
        << "bandwidth = 0.3\n";
  }

  const std::string from_config = dir.file("from_config.json");
  REQUIRE(run({"--config", dir.file("fit.ini"), "fit", "--out",
               from_config})
            .code == 0);
  CHECK(load_json(from_config)["metadata"]["marks"] ==
        json::array({0.3, 0.5}));

  const std::string overridden = dir.file("overridden.json");
  REQUIRE(run({"--config", dir.file("fit.ini"), "fit", "--marks", "0.7",
               "--out", overridden})
            .code == 0);
  CHECK(load_json(overridden)["metadata"]["marks"] == json::array({0.7}));

  {
    std::ofstream ini(dir.file("bad.ini"));
    ini << "[fit]\n"
        << "data = " << data << "\n"
        << "marks = 0.5\n"
        << "bandwidth = 0.3\n"
        << "turbo = yes\n";
  }
  const CliResult rejected =
    run({"--config", dir.file("bad.ini"), "fit", "--out", dir.file("x")});
  CHECK(rejected.code == 1);
}

TEST_CASE("usage problems exit with code one and say why")
{
  ScratchDir dir("usage");
  const std::string data = small_dataset(dir, 120);

  const CliResult help = run({"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("fit") != std::string::npos);

  const CliResult version = run({"--version"});
  CHECK(version.code == 0);
  CHECK(version.out.find(markhaz::library_version) != std::string::npos);

  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"fit", "--data", data, "--marks", "0.5", "--bandwidth", "0.2",
             "--bogus"})
          .code == 1);
  CHECK(run({"fit", "--data", data, "--marks", "0.5"}).code == 1);
  CHECK(run({"fit", "--data", data, "--marks", "0.5", "--bandwidth", "0.2",
             "--target-events", "100"})
          .code == 1);
  CHECK(run({"fit", "--data", data, "--marks", "1.5", "--bandwidth", "0.2"})
          .code == 1);
  CHECK(run({"fit", "--data", data, "--marks", "0.5", "--target-events",
             "-3"})
          .code == 1);
  CHECK(run({"simulate", "--censor", "banana", "--out", dir.file("x.csv")})
          .code == 1);
  CHECK(run({"simulate", "--censor", "tau=-1", "--out", dir.file("x.csv")})
          .code == 1);
  CHECK(run({"simulate", "--censor", "target=1.5", "--out",
             dir.file("x.csv")})
          .code == 1);
  CHECK(run({"bandwidth", "--data", data, "--marks", "0.5", "--grid",
             "0.4:0.2:0.1", "--out", dir.file("x.json")})
          .code == 1);
  CHECK(run({"bench", "--methods", "MS_bogus", "--out", dir.file("x.csv")})
          .code == 1);

  const CliResult fixed_setting =
    run({"bench", "--setting", "lin2", "--beta1", "0.4", "--reps", "2",
         "--n", "50", "--out", dir.file("x.csv")});
  CHECK(fixed_setting.code == 1);
  CHECK(fixed_setting.err.find("--setting custom") != std::string::npos);
}

TEST_CASE("data problems exit with code two and say why")
{
  ScratchDir dir("data_errors");

  const CliResult missing = run({"fit", "--data", dir.file("absent.csv"),
                                 "--marks", "0.5", "--bandwidth", "0.2"});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("absent.csv") != std::string::npos);

  {
    std::ofstream csv(dir.file("broken.csv"));
    csv << "subject_id,episode,gap_time,status,mark,z1\n"
        << "s1,1,not_a_number,1,0.5,1.0\n";
  }
  const CliResult broken = run({"fit", "--data", dir.file("broken.csv"),
                                "--marks", "0.5", "--bandwidth", "0.2"});
  CHECK(broken.code == 2);
  CHECK_FALSE(broken.err.empty());
}

TEST_CASE("simulate writes the gap table and the latent truth together")
{
  ScratchDir dir("simulate");
  const std::string csv_path = dir.file("sim.csv");
  const std::string truth_path = dir.file("truth.json");
  REQUIRE(run({"simulate", "--n", "80", "--seed", "21", "--censor",
               "tau=1.5", "--out", csv_path, "--truth-out", truth_path})
            .code == 0);

  const std::string csv = slurp(csv_path);
  CHECK(csv.rfind("subject_id,episode,gap_time,status,mark,z1\n", 0) == 0);

  const json truth = load_json(truth_path);
  CHECK(truth["kind"] == "truth");
  CHECK(truth["metadata"]["tau_c"] == 1.5);
  CHECK(truth["metadata"]["calibrated"] == false);
  REQUIRE(truth["subjects"].size() == 80);
  const json& first = truth["subjects"][0];
  CHECK(first["episodes"].size() == 5);
  for (const json& episode : first["episodes"]) {
    CHECK(episode["t"].get<double>() > 0.0);
    const double v = episode["v"].get<double>();
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  const markhaz::GapTable table = markhaz::read_gap_table(csv_path);
  CHECK(table.subjects.size() <= 80);
  CHECK(table.covariate_names == std::vector<std::string>{"z1"});
}

TEST_CASE("bandwidth subcommand matches the library selectors")
{
  ScratchDir dir("bandwidth_match");
  const std::string data = small_dataset(dir, 200, "17");

  const std::string uniform_path = dir.file("uniform.json");
  REQUIRE(run({"bandwidth", "--data", data, "--marks", "0.4,0.6", "--grid",
               "0.2:0.4:0.1", "--seed", "5", "--out", uniform_path})
            .code == 0);
  const json uniform = load_json(uniform_path);

  const markhaz::AnalyticalDataset dataset = markhaz::detail::load_dataset(data);
  markhaz::CandidateGrid grid;
  grid.hs = markhaz::detail::parse_grid_spec("0.2:0.4:0.1");
  grid.marks = {0.4, 0.6};
  grid.split_seed = 5;
  const markhaz::BandwidthReport report = markhaz::select_uniform(
    dataset, grid, markhaz::KernelKind::epanechnikov);
  CHECK(uniform["chosen_h"].get<double>() == report.chosen_h);
  REQUIRE(grid.hs.size() == 3);
  CHECK(uniform["hs"] == json(grid.hs));
  REQUIRE(uniform["cells"].size() == report.cells.size());
  for (std::size_t i = 0; i < report.cells.size(); ++i)
    if (report.cells[i].usable)
      CHECK(uniform["cells"][i]["mse"].get<double>() ==
            report.cells[i].mse);

  const std::string per_mark_path = dir.file("per_mark.json");
  REQUIRE(run({"bandwidth", "--data", data, "--marks", "0.4,0.6", "--mode",
               "per-mark", "--target-events", "120", "--grid",
               "0.05:0.40:0.05", "--out", per_mark_path})
            .code == 0);
  const json per_mark = load_json(per_mark_path);
  markhaz::CandidateGrid counting;
  counting.hs = markhaz::detail::parse_grid_spec("0.05:0.40:0.05");
  REQUIRE(counting.hs.size() == 8);
  REQUIRE(per_mark["choices"].size() == 2);
  for (std::size_t m = 0; m < 2; ++m) {
    const double v = m == 0 ? 0.4 : 0.6;
    const markhaz::PerMarkChoice choice =
      markhaz::select_per_mark(dataset, v, counting, 120);
    CHECK(per_mark["choices"][m]["h"].get<double>() == choice.h);
    CHECK(per_mark["choices"][m]["effective_events"].get<int>() ==
          choice.effective_events);
    CHECK(per_mark["choices"][m]["saturated"].get<bool>() ==
          choice.saturated);
  }
}

TEST_CASE("plot tables round trip through their CSV form")
{
  ScratchDir dir("plot_roundtrip");
  const std::string data = small_dataset(dir, 200, "19");

  const markhaz::AnalyticalDataset dataset = markhaz::detail::load_dataset(data);
  const markhaz::MarkCurve curve = markhaz::fit_grid(
    dataset, {0.3, 0.5, 0.7}, markhaz::KernelKind::epanechnikov,
    {markhaz::Bandwidth{0.25}, markhaz::Bandwidth{0.25},
     markhaz::Bandwidth{0.25}},
    {});
  const std::vector<markhaz::FitRow> rows = markhaz::fit_report_rows(
    dataset, curve, markhaz::ResidualVariant::compensator_smoothed, 0.95);

  const std::string path = dir.file("plot.csv");
  markhaz::export_plot_data(rows, dataset.covariate_names, path);
  const std::vector<PlotRow> parsed = markhaz::read_plot_table(path);

  const std::vector<PlotRow> expected =
    markhaz::plot_rows(rows, dataset.covariate_names);
  REQUIRE(parsed.size() == expected.size());
  for (std::size_t i = 0; i < parsed.size(); ++i) {
    CHECK(parsed[i].covariate == expected[i].covariate);
    CHECK(parsed[i].mark == expected[i].mark);
    CHECK(parsed[i].converged == expected[i].converged);
    REQUIRE(parsed[i].hr.has_value() == expected[i].hr.has_value());
    if (expected[i].hr) {
      CHECK(*parsed[i].hr == *expected[i].hr);
      CHECK(*parsed[i].ci_low == *expected[i].ci_low);
      CHECK(*parsed[i].ci_high == *expected[i].ci_high);
    }
  }
}

TEST_CASE("plot table parsing rejects malformed input")
{
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return markhaz::read_plot_table(in);
  };
  const std::string header = "covariate,mark,hr,ci_low,ci_high,converged\n";

  CHECK_THROWS_AS(parse(""), DataError);
  CHECK_THROWS_AS(parse("who,what,when\n"), DataError);
  CHECK_THROWS_AS(parse(header + "z1,0.5,1.0,0.8\n"), DataError);
  CHECK_THROWS_AS(parse(header + "z1,0.5,1.0,0.8,1.2,maybe\n"), DataError);
  CHECK_THROWS_AS(parse(header + "z1,0.5,1.0,,1.2,true\n"), DataError);
  CHECK_THROWS_AS(parse(header + "z1,oops,1.0,0.8,1.2,true\n"), DataError);
  CHECK(parse(header).empty());
  CHECK(parse(header + "z1,0.5,,,,false\n").size() == 1);
}

TEST_CASE("summary CSV blanks the aggregates that do not exist")
{
  markhaz::SummaryTable table;
  table.methods = {markhaz::Method::non_ms};
  table.marks = {0.5};
  markhaz::SummaryRow row;
  row.method = markhaz::Method::non_ms;
  row.v = 0.5;
  row.truth = -0.25;
  row.n_converged = 0;
  table.rows.push_back(row);

  const std::string csv = markhaz::summary_csv(table);
  CHECK(csv ==
        "method,mark,truth,avg_bias,coverage,emp_sd,avg_se,n_converged\n"
        "NonMS,0.5,-0.25,,,,,0\n");

  row.n_converged = 1;
  row.avg_bias = 0.125;
  row.coverage = 1.0;
  row.avg_se = 0.5;
  table.rows[0] = row;
  CHECK(markhaz::summary_csv(table) ==
        "method,mark,truth,avg_bias,coverage,emp_sd,avg_se,n_converged\n"
        "NonMS,0.5,-0.25,0.125,1,,0.5,1\n");
}

TEST_CASE("atomic writes replace the target or leave it untouched")
{
  ScratchDir dir("atomic");
  const std::string path = dir.file("out.txt");

  markhaz::atomic_write_text(path, "first\n");
  CHECK(slurp(path) == "first\n");
  markhaz::atomic_write_text(path, "second\n");
  CHECK(slurp(path) == "second\n");
  CHECK(no_temp_litter(dir));

  const std::string unreachable = dir.file("no_such_dir/out.txt");
  CHECK_THROWS_AS(markhaz::atomic_write_text(unreachable, "x"), DataError);
  CHECK(slurp(path) == "second\n");
}

TEST_CASE("fit documents keep numbers out of JSON that JSON cannot hold")
{
  markhaz::BandwidthReport report;
  report.hs = {0.2};
  report.marks = {0.5};
  report.imse = {std::numeric_limits<double>::quiet_NaN()};
  report.imse_support = {0};
  report.curvature = {Eigen::VectorXd()};
  markhaz::BandwidthCell cell;
  cell.v = 0.5;
  cell.h = 0.2;
  cell.usable = false;
  cell.error = "fit did not converge";
  report.cells = {cell};
  report.chosen_h = std::numeric_limits<double>::quiet_NaN();

  const json doc = markhaz::bandwidth_document(report, json::object());
  CHECK(doc["chosen_h"].is_null());
  CHECK(doc["imse"][0].is_null());
  CHECK(doc["curvature"][0].is_null());
  CHECK(doc["cells"][0]["error"] == "fit did not converge");
  const std::string text = markhaz::pretty(doc);
  CHECK(json::parse(text) == doc);
}
