#pragma once

// Quantitative gradient-conflict analysis between pass@k and pass@1:
// three routes to <grad J_k, grad J_1>, the reweighted prompt distribution,
// the dominating-interference certificate delta(theta), the k* threshold,
// smoothness constants and the certified step size.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "passk/core_objectives.hpp"
#include "passk/error.hpp"
#include "passk/interference.hpp"

namespace passk {

inline constexpr double kDegenerateStd = 1e-14;

struct SmoothnessConstants {
  double L1 = 0.0;
  double Lk = 0.0;
  double C2 = 0.0;
};

/// L_1 = G^2 + F, L_k = k^2 G^2 + k F, C_2 = k^2 G^2 L_1 / 2.
inline SmoothnessConstants smoothness_constants(double G2, double F, int k) {
  if (!(G2 > 0.0) || !(F > 0.0)) throw DomainError("G2 and F must be > 0");
  detail::check_k(k);
  const double kk = static_cast<double>(k);
  SmoothnessConstants s;
  s.L1 = G2 + F;
  s.Lk = kk * kk * G2 + kk * F;
  s.C2 = kk * kk * G2 * s.L1 / 2.0;
  return s;
}

/// min(delta / C2, 1 / Lk); only defined when delta > 0.
inline double max_safe_step(double delta_theta, double C2, double Lk) {
  if (!(delta_theta > 0.0)) throw DomainError("no degradation certificate: delta(theta) must be > 0");
  if (!(C2 > 0.0) || !(Lk > 0.0)) throw DomainError("C2 and Lk must be > 0");
  return std::min(delta_theta / C2, 1.0 / Lk);
}

/// delta(theta) = m W_- - G^2 W_+. Positive values certify
/// <grad J_k, grad J_1> <= -delta(theta) < 0.
inline double delta_bound(const AgreementProfile& agreement, double G2) {
  return agreement.margin * agreement.w_minus - G2 * agreement.w_plus;
}

/// Bound quantity of the k-threshold result:
/// k [(1 - eps)^(k-1) m q - (1 - sep)^(k-1) G^2 (1 - q)].
/// Whenever it is positive the inner product is at most its negation.
inline double conflict_bound(int k, double eps, double separation, double q, double m, double G2) {
  detail::check_k(k);
  const double kk = static_cast<double>(k);
  return kk * (complement_power(eps, k - 1) * m * q - complement_power(separation, k - 1) * G2 * (1.0 - q));
}

/// k* = 1 + log((1 - q) G^2 / (q m)) / log((1 - eps) / (1 - sep)).
/// Integer k > k* guarantees conflict under the separation hypotheses.
inline double k_star(double eps, double separation, double q, double m, double G2) {
  if (!(eps >= 0.0 && eps < separation && separation <= 1.0))
    throw DomainError("k_star requires 0 <= eps < separation <= 1");
  if (!(q > 0.0 && q < 1.0)) throw DomainError("k_star requires 0 < q < 1");
  if (!(m > 0.0) || !(G2 > 0.0)) throw DomainError("k_star requires m > 0 and G2 > 0");
  if (separation == 1.0) return 1.0;  // (1 - sep)^(k-1) vanishes for every k >= 2
  const double num = std::log((1.0 - q) * G2 / (q * m));
  const double den = std::log1p(-eps) - std::log1p(-separation);
  return 1.0 + num / den;
}

/// Reweighted distribution D~ proportional to w_k(p) D.
inline std::vector<double> reweighted_distribution(const SuccessProfile& profile, int k) {
  detail::check_k(k);
  const auto mass = profile.mass();
  const auto probs = profile.probs();
  std::vector<double> out(profile.size());
  double total = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = mass[i] * wk(probs[i], k);
    total += out[i];
  }
  if (!(total > 0.0))
    throw DomainError("reweighted distribution undefined: every pass@k weight is zero");
  for (double& v : out) v /= total;
  return out;
}

/// sum_i mass_i c_i g_i; with c = 1 this is grad J_1, with c = w_k(p) it is grad J_k.
inline Vector weighted_population_gradient(const GradientTable& table, std::span<const double> coeffs) {
  if (coeffs.size() != table.size()) throw ShapeError("one coefficient per prompt required");
  Vector g = Vector::Zero(table.dim());
  const auto mass = table.mass();
  for (std::size_t i = 0; i < table.size(); ++i) {
    const double c = mass[i] * coeffs[i];
    const double* row = table.row_data(i);
    for (Eigen::Index j = 0; j < table.dim(); ++j) g[j] += c * row[j];
  }
  return g;
}

inline Vector passk_gradient(const GradientTable& table, const SuccessProfile& profile, int k) {
  detail::check_aligned(table, profile);
  return weighted_population_gradient(table, passk_weights(profile, k).weights);
}

struct ConflictReport {
  int k = 1;
  double margin = kDefaultMargin;
  std::size_t prompts = 0;

  // Three routes to <grad J_k, grad J_1>.
  double inner_product = 0.0;  // direct dot of assembled gradients
  double weighted_form = 0.0;  // E[w a]
  double cov_form = 0.0;       // E[w] ||grad J_1||^2 + cov(w, a)
  double scale = 0.0;          // E[w |a|], the magnitude the routes are compared at

  double grad1_norm_sq = 0.0;
  double gradk_norm_sq = 0.0;
  double cosine = 0.0;
  double mean_weight = 0.0;
  double covariance = 0.0;
  double sigma_w = 0.0;
  double sigma_a = 0.0;
  std::optional<double> correlation;  // undefined when either std < 1e-14
  double reweighted_mean_agreement = 0.0;

  double q = 0.0;
  double w_minus = 0.0;
  double w_plus = 0.0;
  double delta_bound = 0.0;

  double G2 = 0.0;
  double F = 0.0;
  SmoothnessConstants smoothness;
  std::optional<double> eta_max;  // set only when delta_bound > 0

  /// Largest pairwise discrepancy between the three routes, relative to `scale`.
  double route_discrepancy() const {
    const double s = std::max(scale, std::numeric_limits<double>::min());
    const double d1 = std::abs(inner_product - weighted_form);
    const double d2 = std::abs(inner_product - cov_form);
    const double d3 = std::abs(weighted_form - cov_form);
    return std::max({d1, d2, d3}) / s;
  }

  bool routes_agree(double rel_tol = 1e-10) const { return route_discrepancy() <= rel_tol; }

  /// Conditions (i) and (ii) and the reweighted form, each evaluated on its own.
  bool conflict_direct() const { return inner_product < 0.0; }
  bool conflict_weighted() const { return weighted_form < 0.0; }
  bool conflict_covariance() const { return covariance < -mean_weight * grad1_norm_sq; }
  bool conflict_reweighted() const { return reweighted_mean_agreement < 0.0; }
  /// Correlation form; empty when the correlation is undefined.
  std::optional<bool> conflict_correlation() const {
    if (!correlation) return std::nullopt;
    return *correlation < -mean_weight * grad1_norm_sq / (sigma_w * sigma_a);
  }
};

inline ConflictReport conflict_report(const GradientTable& table, const SuccessProfile& profile, int k,
                                      double margin, const AssumptionConstants& constants) {
  detail::check_aligned(table, profile);
  const AgreementProfile agreement = classify_interference(table, profile, margin, k);
  const auto mass = profile.mass();
  const std::vector<double> w = passk_weights(profile, k).weights;
  const Vector& a = agreement.scores;
  const std::size_t n = table.size();

  ConflictReport r;
  r.k = k;
  r.margin = margin;
  r.prompts = n;

  const Vector& g1 = table.mean_grad();
  const Vector gk = weighted_population_gradient(table, w);
  r.inner_product = detail::dot(gk.data(), g1.data(), g1.size());
  r.grad1_norm_sq = detail::dot(g1.data(), g1.data(), g1.size());
  r.gradk_norm_sq = detail::dot(gk.data(), gk.data(), gk.size());
  const double denom = std::sqrt(r.grad1_norm_sq) * std::sqrt(r.gradk_norm_sq);
  r.cosine = denom < kZeroNorm * kZeroNorm ? 0.0 : r.inner_product / denom;

  double mean_a = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ii = static_cast<Eigen::Index>(i);
    r.weighted_form += mass[i] * w[i] * a[ii];
    r.scale += mass[i] * w[i] * std::abs(a[ii]);
    r.mean_weight += mass[i] * w[i];
    mean_a += mass[i] * a[ii];
  }
  double var_w = 0.0;
  double var_a = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dw = w[i] - r.mean_weight;
    const double da = a[static_cast<Eigen::Index>(i)] - mean_a;
    r.covariance += mass[i] * dw * da;
    var_w += mass[i] * dw * dw;
    var_a += mass[i] * da * da;
  }
  r.sigma_w = std::sqrt(var_w);
  r.sigma_a = std::sqrt(var_a);
  if (r.sigma_w >= kDegenerateStd && r.sigma_a >= kDegenerateStd)
    r.correlation = r.covariance / (r.sigma_w * r.sigma_a);
  r.cov_form = r.mean_weight * r.grad1_norm_sq + r.covariance;
  r.reweighted_mean_agreement =
      r.mean_weight > 0.0 ? r.weighted_form / r.mean_weight : std::numeric_limits<double>::quiet_NaN();

  r.q = agreement.q;
  r.w_minus = agreement.w_minus;
  r.w_plus = agreement.w_plus;
  r.G2 = constants.G2;
  r.F = constants.F;
  r.delta_bound = delta_bound(agreement, constants.G2);
  if (constants.G2 > 0.0 && constants.F > 0.0) {
    r.smoothness = smoothness_constants(constants.G2, constants.F, k);
    if (r.delta_bound > 0.0) r.eta_max = max_safe_step(r.delta_bound, r.smoothness.C2, r.smoothness.Lk);
  }
  return r;
}

struct KernelInnerProduct {
  double double_sum = 0.0;  // E_{x,x'}[w_k(x) w_m(x') kappa(x,x')]
  double direct = 0.0;      // <grad J_k, grad J_m>
};

/// <grad J_k, grad J_m> by the kernel double sum and by the assembled gradients.
inline KernelInnerProduct inner_product_k_m(const GradientTable& table, const SuccessProfile& profile, int k,
                                            int m_order) {
  detail::check_aligned(table, profile);
  const auto wk_vec = passk_weights(profile, k).weights;
  const auto wm_vec = passk_weights(profile, m_order).weights;
  const auto mass = table.mass();
  const Matrix kern = kernel_matrix(table, false);
  KernelInnerProduct out;
  for (std::size_t i = 0; i < table.size(); ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < table.size(); ++j)
      row += mass[j] * wm_vec[j] * kern(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    out.double_sum += mass[i] * wk_vec[i] * row;
  }
  const Vector gk = weighted_population_gradient(table, wk_vec);
  const Vector gm = weighted_population_gradient(table, wm_vec);
  out.direct = detail::dot(gk.data(), gm.data(), gk.size());
  return out;
}

inline nlohmann::json to_json(const ConflictReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {
      {"k", r.k},
      {"margin", r.margin},
      {"prompts", r.prompts},
      {"inner_product", r.inner_product},
      {"routes",
       {{"direct", r.inner_product},
        {"weighted_agreement", r.weighted_form},
        {"covariance_decomposition", r.cov_form},
        {"relative_discrepancy", r.route_discrepancy()}}},
      {"weighted_form", r.weighted_form},
      {"cov_form", r.cov_form},
      {"grad1_norm_sq", r.grad1_norm_sq},
      {"gradk_norm_sq", r.gradk_norm_sq},
      {"cosine", r.cosine},
      {"mean_weight", r.mean_weight},
      {"covariance", r.covariance},
      {"correlation", opt(r.correlation)},
      {"sigma_w", r.sigma_w},
      {"sigma_a", r.sigma_a},
      {"reweighted_mean_agreement", r.reweighted_mean_agreement},
      {"q", r.q},
      {"w_minus", r.w_minus},
      {"w_plus", r.w_plus},
      {"delta_bound", r.delta_bound},
      {"G2", r.G2},
      {"F", r.F},
      {"L1", r.smoothness.L1},
      {"Lk", r.smoothness.Lk},
      {"C2", r.smoothness.C2},
      {"eta_max", opt(r.eta_max)},
  };
}

}  // namespace passk
