#pragma once

#include "markhaz/common.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

//! Recurrent gap-time data and the analytical-dataset construction rules.
//!
//! Input is one row of gap intervals per subject.  Construction keeps, for a
//! subject with at least one observed event, only its observed gaps (the
//! trailing censored gap is dropped); an event-free subject keeps its single
//! censored gap.  Each retained record carries the weight 1/R_i, where
//! R_i = max(observed events, 1), so a subject's records always weigh 1 in
//! total.  Marks are mapped affinely onto [0, 1].

namespace markhaz {

//! One gap interval as supplied by the caller.
struct RawGap {
  double time = 0.0;
  bool observed = false;
  std::optional<double> mark;  //!< engaged exactly when observed
};

//! A study subject: fixed covariates and an ordered run of gap intervals.
//! A censored gap may appear once at most, and only in the final position.
struct RawSubject {
  std::string id;
  Eigen::VectorXd covariates;
  std::vector<RawGap> gaps;
};

//! Affine map from the raw mark scale onto [0, 1]:
//! scaled = (raw - lo) / (hi - lo).
struct MarkTransform {
  double lo = 0.0;
  double hi = 1.0;
};

//! One retained gap record.
struct GapRecord {
  int subject = 0;   //!< row index into AnalyticalDataset::covariates
  int episode = 0;   //!< 1-based position within the subject
  double time = 0.0;
  bool observed = false;
  std::optional<double> mark;  //!< on the [0, 1] scale; engaged iff observed
  double weight = 0.0;         //!< 1 / R_i
};

//! The weighted dataset every estimator works on.  Treat as immutable once
//! built; the derived indexes assume the records never change.
struct AnalyticalDataset {
  std::vector<GapRecord> records;
  Eigen::MatrixXd covariates;  //!< one row per subject
  std::vector<std::string> subject_ids;
  std::vector<std::string> covariate_names;
  MarkTransform transform;

  //! record indices sorted by gap time, longest first
  std::vector<int> by_time_desc;
  //! scaled marks of observed records, ascending (for window counting)
  std::vector<double> event_marks;

  int n() const { return static_cast<int>(covariates.rows()); }
  int p() const { return static_cast<int>(covariates.cols()); }
};

inline void finalize_indexes(AnalyticalDataset& data)
{
  data.by_time_desc.resize(data.records.size());
  for (std::size_t k = 0; k < data.records.size(); ++k)
    data.by_time_desc[k] = static_cast<int>(k);
  std::stable_sort(data.by_time_desc.begin(), data.by_time_desc.end(),
                   [&](int a, int b) {
                     return data.records[a].time > data.records[b].time;
                   });
  data.event_marks.clear();
  for (const auto& rec : data.records)
    if (rec.observed)
      data.event_marks.push_back(*rec.mark);
  std::sort(data.event_marks.begin(), data.event_marks.end());
}

namespace detail {

inline void check_subject(const RawSubject& subj, const MarkTransform& support)
{
  const std::string who = "subject '" + subj.id + "': ";
  if (subj.gaps.empty())
    throw DataError(who + "no gap records");
  if (subj.covariates.size() < 1)
    throw DataError(who + "no covariates");
  for (Eigen::Index q = 0; q < subj.covariates.size(); ++q)
    if (!std::isfinite(subj.covariates[q]))
      throw DataError(who + "non-finite covariate");
  for (std::size_t j = 0; j < subj.gaps.size(); ++j) {
    const RawGap& gap = subj.gaps[j];
    if (!(std::isfinite(gap.time) && gap.time > 0.0))
      throw DataError(who + "gap time must be finite and positive");
    if (!gap.observed && j + 1 != subj.gaps.size())
      throw DataError(who + "censored gap before the final position");
    if (gap.observed != gap.mark.has_value())
      throw DataError(who + "mark must be present exactly for observed gaps");
    if (gap.mark) {
      if (!std::isfinite(*gap.mark))
        throw DataError(who + "non-finite mark");
      if (*gap.mark < support.lo || *gap.mark > support.hi)
        throw DataError(who + "mark outside the declared support");
    }
  }
}

}  // namespace detail

//! Applies the construction rules and returns the weighted dataset.
//! `support` declares the raw mark range; marks are rescaled onto [0, 1].
inline AnalyticalDataset build_analytical_dataset(
  const std::vector<RawSubject>& subjects, MarkTransform support = {0.0, 1.0})
{
  if (subjects.empty())
    throw DataError("no subjects");
  if (!(std::isfinite(support.lo) && std::isfinite(support.hi) &&
        support.hi > support.lo))
    throw DataError("mark support must be a finite interval with lo < hi");

  const Eigen::Index p = subjects.front().covariates.size();
  AnalyticalDataset data;
  data.transform = support;
  data.covariates.resize(static_cast<Eigen::Index>(subjects.size()), p);
  data.subject_ids.reserve(subjects.size());

  std::unordered_map<std::string, int> seen;
  const double width = support.hi - support.lo;

  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const RawSubject& subj = subjects[i];
    detail::check_subject(subj, support);
    if (subj.covariates.size() != p)
      throw DataError("subject '" + subj.id +
                      "': covariate length differs from the first subject");
    if (!seen.emplace(subj.id, static_cast<int>(i)).second)
      throw DataError("duplicate subject id '" + subj.id + "'");

    data.covariates.row(static_cast<Eigen::Index>(i)) =
      subj.covariates.transpose();
    data.subject_ids.push_back(subj.id);

    int observed = 0;
    for (const auto& gap : subj.gaps)
      observed += gap.observed ? 1 : 0;
    const int r_i = std::max(observed, 1);
    const double weight = 1.0 / static_cast<double>(r_i);

    for (std::size_t j = 0; j < subj.gaps.size(); ++j) {
      const RawGap& gap = subj.gaps[j];
      if (observed >= 1 && !gap.observed)
        continue;  // drop the censored tail once events exist
      GapRecord rec;
      rec.subject = static_cast<int>(i);
      rec.episode = static_cast<int>(j) + 1;
      rec.time = gap.time;
      rec.observed = gap.observed;
      if (gap.mark)
        rec.mark = (*gap.mark - support.lo) / width;
      rec.weight = weight;
      data.records.push_back(rec);
    }
  }

  if (p >= 1) {
    data.covariate_names.resize(static_cast<std::size_t>(p));
    for (Eigen::Index q = 0; q < p; ++q)
      data.covariate_names[static_cast<std::size_t>(q)] =
        "z" + std::to_string(q + 1);
  }

  finalize_indexes(data);
  return data;
}

//! Re-expresses the marks for a new declared raw support.  Raw values are
//! recovered through the stored transform, so the operation composes.
inline AnalyticalDataset rescale_marks(const AnalyticalDataset& data,
                                       double lo, double hi)
{
  if (!(std::isfinite(lo) && std::isfinite(hi) && hi > lo))
    throw DataError("mark support must be a finite interval with lo < hi");
  AnalyticalDataset out = data;
  const double old_width = data.transform.hi - data.transform.lo;
  for (auto& rec : out.records) {
    if (!rec.mark)
      continue;
    const double raw = data.transform.lo + old_width * (*rec.mark);
    if (raw < lo || raw > hi)
      throw DataError("mark outside the new support");
    rec.mark = (raw - lo) / (hi - lo);
  }
  out.transform = {lo, hi};
  finalize_indexes(out);
  return out;
}

//! Restriction to a subset of subjects (used by the split-sample bandwidth
//! machinery).  Weights are per subject, so they carry over unchanged.
inline AnalyticalDataset subset_subjects(const AnalyticalDataset& data,
                                         const std::vector<int>& keep)
{
  if (keep.empty())
    throw DataError("empty subject subset");
  AnalyticalDataset out;
  out.transform = data.transform;
  out.covariate_names = data.covariate_names;
  out.covariates.resize(static_cast<Eigen::Index>(keep.size()),
                        data.covariates.cols());
  std::vector<int> remap(static_cast<std::size_t>(data.n()), -1);
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const int i = keep[k];
    if (i < 0 || i >= data.n())
      throw DataError("subject index out of range");
    if (remap[static_cast<std::size_t>(i)] != -1)
      throw DataError("duplicate subject index in subset");
    remap[static_cast<std::size_t>(i)] = static_cast<int>(k);
    out.covariates.row(static_cast<Eigen::Index>(k)) =
      data.covariates.row(static_cast<Eigen::Index>(i));
    out.subject_ids.push_back(data.subject_ids[static_cast<std::size_t>(i)]);
  }
  for (const auto& rec : data.records) {
    const int target = remap[static_cast<std::size_t>(rec.subject)];
    if (target == -1)
      continue;
    GapRecord copy = rec;
    copy.subject = target;
    out.records.push_back(copy);
  }
  finalize_indexes(out);
  return out;
}

//! Structural hash of a dataset (records, weights, covariates, transform).
//! Lets downstream results assert they were produced from the same data.
inline std::uint64_t dataset_fingerprint(const AnalyticalDataset& data)
{
  std::uint64_t state = 0x9E3779B97F4A7C15ULL;
  auto mixin = [&state](std::uint64_t word) {
    state ^= word + 0x9E3779B97F4A7C15ULL + (state << 6) + (state >> 2);
    state *= 0xFF51AFD7ED558CCDULL;
    state ^= state >> 33;
  };
  auto mix_double = [&](double x) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(x));
    std::memcpy(&bits, &x, sizeof(bits));
    mixin(bits);
  };
  mixin(static_cast<std::uint64_t>(data.n()));
  mixin(static_cast<std::uint64_t>(data.p()));
  mix_double(data.transform.lo);
  mix_double(data.transform.hi);
  for (const auto& rec : data.records) {
    mixin(static_cast<std::uint64_t>(rec.subject));
    mixin(static_cast<std::uint64_t>(rec.episode));
    mix_double(rec.time);
    mixin(rec.observed ? 1u : 0u);
    mix_double(rec.mark ? *rec.mark : -1.0);
    mix_double(rec.weight);
  }
  for (Eigen::Index i = 0; i < data.covariates.size(); ++i)
    mix_double(data.covariates.data()[i]);
  return state;
}

// ------------------------------------------------------------------------
// integrity report

struct ValidationReport {
  int n_subjects = 0;
  int n_records = 0;
  int n_events = 0;
  int n_censored = 0;
  bool ok = true;
  std::vector<std::string> problems;
};

//! Re-checks the construction invariants on an already-built dataset.
inline ValidationReport validate(const AnalyticalDataset& data)
{
  ValidationReport report;
  report.n_subjects = data.n();
  report.n_records = static_cast<int>(data.records.size());

  auto complain = [&](const std::string& msg) {
    report.ok = false;
    report.problems.push_back(msg);
  };

  std::vector<int> events(static_cast<std::size_t>(data.n()), 0);
  std::vector<int> total(static_cast<std::size_t>(data.n()), 0);
  std::vector<double> weight(static_cast<std::size_t>(data.n()), -1.0);
  std::vector<int> last_episode(static_cast<std::size_t>(data.n()), 0);

  for (const auto& rec : data.records) {
    if (rec.subject < 0 || rec.subject >= data.n()) {
      complain("record points to a missing subject");
      continue;
    }
    auto i = static_cast<std::size_t>(rec.subject);
    total[i] += 1;
    if (rec.observed) {
      report.n_events += 1;
      events[i] += 1;
      if (!rec.mark || !(*rec.mark >= 0.0 && *rec.mark <= 1.0))
        complain("observed record without a mark in [0, 1]");
    } else {
      report.n_censored += 1;
      if (rec.mark)
        complain("censored record carries a mark");
    }
    if (!(std::isfinite(rec.time) && rec.time > 0.0))
      complain("non-positive gap time");
    if (rec.episode <= last_episode[i])
      complain("episodes out of order for subject " +
               data.subject_ids[i]);
    last_episode[i] = rec.episode;
    if (weight[i] < 0.0)
      weight[i] = rec.weight;
    else if (weight[i] != rec.weight)
      complain("unequal weights within subject " + data.subject_ids[i]);
  }

  for (int i = 0; i < data.n(); ++i) {
    auto k = static_cast<std::size_t>(i);
    if (total[k] == 0) {
      complain("subject " + data.subject_ids[k] + " has no records");
      continue;
    }
    const int r_i = std::max(events[k], 1);
    // weight == 1/R_i bit-exactly, R_i records per subject: the subject's
    // records then sum to one in exact arithmetic.
    if (weight[k] != 1.0 / static_cast<double>(r_i))
      complain("weight of subject " + data.subject_ids[k] +
               " is not one over its record count");
    if (events[k] >= 1 && total[k] != events[k])
      complain("subject " + data.subject_ids[k] +
               " kept a censored record despite having events");
    if (events[k] == 0 && total[k] != 1)
      complain("event-free subject " + data.subject_ids[k] +
               " must have exactly one censored record");
  }

  return report;
}

// ------------------------------------------------------------------------
// CSV interchange
//
// Layout: subject_id, episode, gap_time, status, mark, <covariates...>.
// The mark field is empty exactly when status is 0.  Fields must not
// contain commas; values are parsed strictly.

struct GapTable {
  std::vector<RawSubject> subjects;
  std::vector<std::string> covariate_names;
};

namespace detail {

inline std::string trim(const std::string& s)
{
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos)
    return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
  std::vector<std::string> fields;
  std::string::size_type start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string::npos) {
      fields.push_back(trim(line.substr(start)));
      break;
    }
    fields.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return fields;
}

inline double parse_double(const std::string& field, int line_no,
                           const char* what)
{
  double value = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc{} || res.ptr != last)
    throw DataError("line " + std::to_string(line_no) + ": cannot parse " +
                    what + " '" + field + "'");
  return value;
}

inline long parse_long(const std::string& field, int line_no,
                       const char* what)
{
  long value = 0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  const auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc{} || res.ptr != last)
    throw DataError("line " + std::to_string(line_no) + ": cannot parse " +
                    what + " '" + field + "'");
  return value;
}

inline std::string format_double(double x)
{
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace detail

//! Reads the gap-record CSV.  Rows of one subject may appear anywhere in the
//! file but their episodes must run 1, 2, ... in order of appearance and
//! their covariates must repeat exactly.
inline GapTable read_gap_table(std::istream& in)
{
  std::string line;
  if (!std::getline(in, line))
    throw DataError("empty CSV input");
  auto header = detail::split_csv_line(line);
  const std::vector<std::string> fixed = {"subject_id", "episode", "gap_time",
                                          "status", "mark"};
  if (header.size() < fixed.size() + 1)
    throw DataError("CSV header needs at least one covariate column after '" +
                    fixed.back() + "'");
  for (std::size_t k = 0; k < fixed.size(); ++k)
    if (header[k] != fixed[k])
      throw DataError("CSV header column " + std::to_string(k + 1) +
                      " must be '" + fixed[k] + "', got '" + header[k] + "'");

  GapTable table;
  table.covariate_names.assign(header.begin() + fixed.size(), header.end());
  const std::size_t n_cov = table.covariate_names.size();

  std::unordered_map<std::string, std::size_t> index;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty())
      continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() != fixed.size() + n_cov)
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(fixed.size() + n_cov) + " fields, got " +
                      std::to_string(fields.size()));

    const std::string& id = fields[0];
    if (id.empty())
      throw DataError("line " + std::to_string(line_no) +
                      ": empty subject_id");
    auto [it, inserted] = index.emplace(id, table.subjects.size());
    if (inserted) {
      RawSubject subj;
      subj.id = id;
      subj.covariates.resize(static_cast<Eigen::Index>(n_cov));
      for (std::size_t q = 0; q < n_cov; ++q)
        subj.covariates[static_cast<Eigen::Index>(q)] = detail::parse_double(
          fields[fixed.size() + q], line_no, "covariate");
      table.subjects.push_back(std::move(subj));
    }
    RawSubject& subj = table.subjects[it->second];
    if (!inserted) {
      for (std::size_t q = 0; q < n_cov; ++q) {
        const double z = detail::parse_double(fields[fixed.size() + q],
                                              line_no, "covariate");
        if (z != subj.covariates[static_cast<Eigen::Index>(q)])
          throw DataError("line " + std::to_string(line_no) +
                          ": covariates changed within subject '" + id + "'");
      }
    }

    const long episode = detail::parse_long(fields[1], line_no, "episode");
    if (episode != static_cast<long>(subj.gaps.size()) + 1)
      throw DataError("line " + std::to_string(line_no) + ": subject '" + id +
                      "' expected episode " +
                      std::to_string(subj.gaps.size() + 1));

    RawGap gap;
    gap.time = detail::parse_double(fields[2], line_no, "gap_time");
    const long status = detail::parse_long(fields[3], line_no, "status");
    if (status != 0 && status != 1)
      throw DataError("line " + std::to_string(line_no) +
                      ": status must be 0 or 1");
    gap.observed = status == 1;
    if (gap.observed) {
      if (fields[4].empty())
        throw DataError("line " + std::to_string(line_no) +
                        ": observed gap without a mark");
      gap.mark = detail::parse_double(fields[4], line_no, "mark");
    } else if (!fields[4].empty()) {
      throw DataError("line " + std::to_string(line_no) +
                      ": censored gap must leave the mark empty");
    }
    subj.gaps.push_back(gap);
  }
  if (table.subjects.empty())
    throw DataError("CSV contains a header but no data rows");
  return table;
}

inline GapTable read_gap_table(const std::string& path)
{
  std::ifstream in(path);
  if (!in)
    throw DataError("cannot open '" + path + "'");
  return read_gap_table(in);
}

//! Writes the same layout read_gap_table() accepts, with full double
//! precision so a round trip is lossless.
inline void write_gap_table(std::ostream& out,
                            const std::vector<RawSubject>& subjects,
                            const std::vector<std::string>& covariate_names)
{
  out << "subject_id,episode,gap_time,status,mark";
  for (const auto& name : covariate_names)
    out << ',' << name;
  out << '\n';
  for (const auto& subj : subjects) {
    for (std::size_t j = 0; j < subj.gaps.size(); ++j) {
      const RawGap& gap = subj.gaps[j];
      out << subj.id << ',' << (j + 1) << ','
          << detail::format_double(gap.time) << ',' << (gap.observed ? 1 : 0)
          << ',';
      if (gap.mark)
        out << detail::format_double(*gap.mark);
      for (Eigen::Index q = 0; q < subj.covariates.size(); ++q)
        out << ',' << detail::format_double(subj.covariates[q]);
      out << '\n';
    }
  }
}

}  // namespace markhaz
