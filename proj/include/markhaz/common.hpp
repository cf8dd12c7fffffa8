#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

//! Shared scaffolding: the error taxonomy, compensated accumulators, and the
//! index-striped loop used to run grid fits and replications concurrently.

namespace markhaz {

inline constexpr const char* library_version = "1.0.0";

//! Base of every exception thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

//! Malformed or inconsistent input (dataset construction, CSV, CLI config).
struct DataError : Error {
  using Error::Error;
};

//! Too few in-window events to localize at the requested mark.
struct NoLocalData : Error {
  using Error::Error;
};

//! Requested mark violates the interior guard v in [h, 1-h].
struct BoundaryMark : Error {
  using Error::Error;
};

//! Curvature matrix is singular or numerically ill-conditioned.
struct SingularHessian : Error {
  using Error::Error;
};

//! A linear predictor left the safe range for exp().
struct OverflowError : Error {
  using Error::Error;
};

//! Bracketing or calibration failure inside the data generator.
struct CalibrationError : Error {
  using Error::Error;
};

// ------------------------------------------------------------------------
// compensated accumulators
//
// Risk-set sweeps and score sums use Kahan compensation so that reordering
// the input (subject permutations, tie order) moves results by strictly
// less than the documented 1e-10 reproducibility tolerance.

class Kahan {
 public:
  void add(double x)
  {
    double y = x - comp_;
    double t = sum_ + y;
    comp_ = (t - sum_) - y;
    sum_ = t;
  }
  double value() const { return sum_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

class KahanVec {
 public:
  explicit KahanVec(Eigen::Index size)
    : sum_(Eigen::VectorXd::Zero(size)), comp_(Eigen::VectorXd::Zero(size))
  {
  }
  void add(const Eigen::VectorXd& x)
  {
    Eigen::VectorXd y = x - comp_;
    Eigen::VectorXd t = sum_ + y;
    comp_ = (t - sum_) - y;
    sum_ = t;
  }
  const Eigen::VectorXd& value() const { return sum_; }

 private:
  Eigen::VectorXd sum_;
  Eigen::VectorXd comp_;
};

class KahanMat {
 public:
  KahanMat(Eigen::Index rows, Eigen::Index cols)
    : sum_(Eigen::MatrixXd::Zero(rows, cols)),
      comp_(Eigen::MatrixXd::Zero(rows, cols))
  {
  }
  void add(const Eigen::MatrixXd& x)
  {
    Eigen::MatrixXd y = x - comp_;
    Eigen::MatrixXd t = sum_ + y;
    comp_ = (t - sum_) - y;
    sum_ = t;
  }
  const Eigen::MatrixXd& value() const { return sum_; }

 private:
  Eigen::MatrixXd sum_;
  Eigen::MatrixXd comp_;
};

// ------------------------------------------------------------------------

//! Runs body(i) for i in [0, count).  threads <= 1 gives a plain serial
//! loop; otherwise work is striped over the workers by index.  Results must
//! be written to per-index slots so that the outcome does not depend on the
//! thread count.  If any iteration throws, the exception with the smallest
//! failing index is rethrown on the calling thread.
template <typename Body>
void parallel_for(std::size_t count, int threads, Body&& body)
{
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i)
      body(i);
    return;
  }
  std::size_t n_workers = std::min<std::size_t>(threads, count);
  std::vector<std::pair<std::size_t, std::exception_ptr>> failures(
    n_workers, {count, nullptr});
  std::vector<std::thread> pool;
  pool.reserve(n_workers);
  for (std::size_t w = 0; w < n_workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += n_workers) {
        try {
          body(i);
        } catch (...) {
          failures[w] = {i, std::current_exception()};
          return;
        }
      }
    });
  }
  for (auto& t : pool)
    t.join();
  std::size_t first = count;
  std::exception_ptr err;
  for (auto& f : failures) {
    if (f.second && f.first < first) {
      first = f.first;
      err = f.second;
    }
  }
  if (err)
    std::rethrow_exception(err);
}

}  // namespace markhaz
