#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>

//! Counter-based random streams and high-accuracy normal transforms.
//!
//! Every random quantity in the generator is drawn from a Substream keyed
//! by (seed, stream index), so subjects and replications can be produced in
//! any order, or in parallel, without changing a single draw.

namespace markhaz {

//! 64-bit finalizing mix (bijective).
inline std::uint64_t mix64(std::uint64_t z)
{
  z ^= z >> 33;
  z *= 0xFF51AFD7ED558CCDULL;
  z ^= z >> 33;
  z *= 0xC4CEB9FE1A85EC53ULL;
  z ^= z >> 33;
  return z;
}

//! Deterministically derives a child seed, e.g. one per replication.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index)
{
  return mix64(mix64(seed) + 0x9E3779B97F4A7C15ULL * (index + 1));
}

//! Standard normal CDF.
inline double norm_cdf(double x)
{
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

//! Standard normal quantile, rational minimax approximation.
//! Relative error stays below ~1e-15 for p in [1e-300, 1 - 1e-16].
inline double norm_quantile(double p)
{
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("norm_quantile: p must lie in (0, 1)");

  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    return q *
           (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                 6.7265770927008700853e4) *
                  r +
                4.5921953931549871457e4) *
                 r +
               1.3731693765509461125e4) *
                r +
              1.9715909503065514427e3) *
               r +
             1.3314166789178437745e2) *
              r +
            3.3871328727963666080e0) /
           (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                 3.9307895800092710610e4) *
                  r +
                2.1213794301586595867e4) *
                 r +
               5.3941960214247511077e3) *
                r +
              6.8718700749205790830e2) *
               r +
             4.2313330701600911252e1) *
              r +
            1.0);
  }

  double r = (q < 0.0) ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double x;
  if (r <= 5.0) {
    r -= 1.6;
    x = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) *
                r +
              2.41780725177450611770e-1) *
               r +
             1.27045825245236838258e0) *
              r +
            3.64784832476320460504e0) *
             r +
           5.76949722146069140550e0) *
            r +
          4.63033784615654529590e0) *
           r +
         1.42343711074968357734e0) /
        (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) *
                r +
              1.51986665636164571966e-2) *
               r +
             1.48103976427480074590e-1) *
              r +
            6.89767334985100004550e-1) *
             r +
           1.67638483018380384940e0) *
            r +
          2.05319162663775882187e0) *
           r +
         1.0);
  } else {
    r -= 5.0;
    x = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) *
                r +
              1.24266094738807843860e-3) *
               r +
             2.65321895265761230930e-2) *
              r +
            2.96560571828504891230e-1) *
             r +
           1.78482653991729133580e0) *
            r +
          5.46378491116411436990e0) *
           r +
         6.65790464350110377720e0) /
        (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) *
                r +
              1.84631831751005468180e-5) *
               r +
             7.86869131145613259100e-4) *
              r +
            1.48753612908506148525e-2) *
             r +
           1.36929880922735805310e-1) *
            r +
          5.99832206555887937690e-1) *
           r +
         1.0);
  }
  return (q < 0.0) ? -x : x;
}

//! A counter-based random stream: the k-th draw is a pure function of
//! (seed, stream, k).  Streams with distinct keys are independent for all
//! practical purposes.
class Substream {
 public:
  Substream(std::uint64_t seed, std::uint64_t stream)
    : key_(mix64(mix64(seed) ^ (0xA0761D6478BD642FULL * (stream + 1))))
  {
  }

  std::uint64_t next()
  {
    return mix64(key_ + 0x9E3779B97F4A7C15ULL * (++counter_));
  }

  //! Uniform draw strictly inside (0, 1).
  double uniform()
  {
    return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal(double mean = 0.0, double sd = 1.0)
  {
    return mean + sd * norm_quantile(uniform());
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace markhaz
