#pragma once

// Pass@k transform, its derivative weights, population objectives and the
// combination-ratio pass@k estimator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "passk/error.hpp"

namespace passk {

inline constexpr int kMaxK = 1'000'000;

namespace detail {

inline void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0))
    throw DomainError(std::string(name) + " must lie in [0,1], got " + std::to_string(p));
}

inline void check_k(long k) {
  if (k < 1 || k > kMaxK)
    throw DomainError("k must lie in [1, " + std::to_string(kMaxK) + "], got " +
                      std::to_string(k));
}

/// Neumaier-compensated sum, used to validate normalisation of large masses.
inline double compensated_sum(std::span<const double> xs) {
  double sum = 0.0;
  double comp = 0.0;
  for (double x : xs) {
    const double t = sum + x;
    comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
    sum = t;
  }
  return sum + comp;
}

/// Power by squaring; used when the base 1-p is computed exactly.
inline double ipow(double base, long n) {
  double result = 1.0;
  while (n > 0) {
    if (n & 1) result *= base;
    base *= base;
    n >>= 1;
  }
  return result;
}

}  // namespace detail

/// (1 - p)^n. For p < 0.5 goes through log1p so tiny p keeps full precision
/// and results near 1e-300 underflow gracefully; otherwise 1 - p is exact and
/// repeated squaring is used.
inline double complement_power(double p, long n) {
  if (n == 0) return 1.0;
  if (p < 0.5) return std::exp(static_cast<double>(n) * std::log1p(-p));
  return detail::ipow(1.0 - p, n);
}

/// f_k(p) = 1 - (1 - p)^k, probability that at least one of k draws succeeds.
inline double fk(double p, int k) {
  detail::check_probability(p, "p");
  detail::check_k(k);
  if (k == 1) return p;
  if (p < 0.5) return -std::expm1(static_cast<double>(k) * std::log1p(-p));
  return 1.0 - detail::ipow(1.0 - p, k);
}

/// w_k(p) = k (1 - p)^(k - 1) = d f_k / dp.
inline double wk(double p, int k) {
  detail::check_probability(p, "p");
  detail::check_k(k);
  return static_cast<double>(k) * complement_power(p, k - 1);
}

/// Per-prompt success probabilities together with the prompt distribution.
class SuccessProfile {
 public:
  /// Empty ids default to "0", "1", ...
  SuccessProfile(std::vector<double> probs, std::vector<double> mass,
                 std::vector<std::string> ids = {})
      : probs_(std::move(probs)), mass_(std::move(mass)), ids_(std::move(ids)) {
    if (probs_.empty()) throw ShapeError("success profile must be non-empty");
    if (ids_.empty())
      for (std::size_t i = 0; i < probs_.size(); ++i) ids_.push_back(std::to_string(i));
    if (mass_.size() != probs_.size() || ids_.size() != probs_.size())
      throw ShapeError("probs, mass and ids must have equal length");
    for (std::size_t i = 0; i < probs_.size(); ++i) {
      detail::check_probability(probs_[i], "success probability");
      if (!(mass_[i] >= 0.0)) throw DomainError("prompt mass must be nonnegative");
    }
    const double total = detail::compensated_sum(mass_);
    if (std::abs(total - 1.0) > 1e-12)
      throw DomainError("prompt mass must sum to 1, got " + std::to_string(total));
  }

  /// Uniform mass.
  static SuccessProfile uniform(std::vector<double> probs, std::vector<std::string> ids = {}) {
    const std::size_t n = probs.size();
    if (n == 0) throw ShapeError("success profile must be non-empty");
    return SuccessProfile(std::move(probs), uniform_mass(n), std::move(ids));
  }

  static std::vector<double> uniform_mass(std::size_t n) {
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
  }

  std::size_t size() const { return probs_.size(); }
  std::span<const double> probs() const { return probs_; }
  std::span<const double> mass() const { return mass_; }
  const std::vector<std::string>& ids() const { return ids_; }

 private:
  std::vector<double> probs_;
  std::vector<double> mass_;
  std::vector<std::string> ids_;
};

struct PassKWeights {
  int k = 1;
  std::vector<double> weights;
};

inline PassKWeights passk_weights(const SuccessProfile& profile, int k) {
  detail::check_k(k);
  PassKWeights out{k, {}};
  out.weights.reserve(profile.size());
  for (double p : profile.probs()) out.weights.push_back(wk(p, k));
  return out;
}

/// J_k = sum_i mass_i f_k(p_i), accumulated in index order.
inline double pass_at_k(const SuccessProfile& profile, int k) {
  detail::check_k(k);
  double acc = 0.0;
  const auto p = profile.probs();
  const auto m = profile.mass();
  for (std::size_t i = 0; i < p.size(); ++i) acc += m[i] * fk(p[i], k);
  return acc;
}

/// Mass-weighted mean of the pass@k weights, E[w_k(p)].
inline double mean_weight(const SuccessProfile& profile, int k) {
  detail::check_k(k);
  double acc = 0.0;
  const auto p = profile.probs();
  const auto m = profile.mass();
  for (std::size_t i = 0; i < p.size(); ++i) acc += m[i] * wk(p[i], k);
  return acc;
}

/// Policy regularity constants: G^2 bounds E_y ||grad log pi||^2 and F bounds
/// E_y ||grad^2 log pi|| for every prompt.
struct AssumptionConstants {
  double G2 = 0.0;
  double F = 0.0;
};

struct PassKBounds {
  double lower = 0.0;
  double upper = 0.0;
};

/// Jensen sandwich J_1 <= J_k <= min(1, f_k(J_1)).
inline PassKBounds pass_at_k_bounds(double j1, int k) {
  detail::check_probability(j1, "J_1");
  detail::check_k(k);
  return {j1, std::min(1.0, fk(j1, k))};
}

/// 1 - C(n-c, k) / C(n, k), as the telescoping product
/// prod_{i=n-c+1}^{n} (1 - k/i); never forms a binomial coefficient.
inline double unbiased_pass_at_k(long n, long c, long k) {
  if (n < 1) throw DomainError("sample count n must be >= 1");
  if (c < 0 || c > n) throw DomainError("success count c must lie in [0, n]");
  if (k < 1 || k > n) throw DomainError("k must lie in [1, n]");
  if (n - c < k) return 1.0;
  double miss = 1.0;
  for (long i = n - c + 1; i <= n; ++i)
    miss *= 1.0 - static_cast<double>(k) / static_cast<double>(i);
  return 1.0 - miss;
}

}  // namespace passk
