#pragma once

// Pass@k policy-gradient ascent on the toy bandit with per-label tracking of
// pass@1 and pass@k.

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "passk/conflict_analysis.hpp"
#include "passk/format.hpp"
#include "passk/toy_population.hpp"

namespace passk::toy {

struct TrajectoryRecord {
  int step = 0;
  Theta theta = Theta::Zero();
  double eta = 0.0;  // step size that produced this state; 0 at step 0
  double J1_pop = 0.0;
  double Jk_pop = 0.0;
  double J1_easy = 0.0;
  double J1_hard = 0.0;
  double Jk_easy = 0.0;
  double Jk_hard = 0.0;
  double hard_fraction = 0.0;  // empirical share of hard prompts in the batch
  double inner_product = 0.0;  // <grad J_k, grad J_1>
  double delta_bound = 0.0;
};

struct StepOptions {
  double margin = kDefaultMargin;
  /// Constants used for delta(theta); defaults to the theta-uniform bound.
  std::optional<AssumptionConstants> constants;
};

/// Evaluates every tracked quantity at theta. Label-restricted means are NaN
/// when the batch has no prompt of that label.
inline TrajectoryRecord evaluate_state(const PromptBatch& batch, const Theta& theta, int k, int step,
                                       const StepOptions& options = {}) {
  TrajectoryRecord r;
  r.step = step;
  r.theta = theta;
  double s1[2] = {0.0, 0.0};
  double sk[2] = {0.0, 0.0};
  std::size_t count[2] = {0, 0};
  for (const auto& x : batch) {
    const double p = success_prob(theta, x);
    const int h = x.label == Difficulty::hard ? 1 : 0;
    s1[h] += p;
    sk[h] += fk(p, k);
    ++count[h];
  }
  const double n = static_cast<double>(batch.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.J1_pop = (s1[0] + s1[1]) / n;
  r.Jk_pop = (sk[0] + sk[1]) / n;
  r.J1_easy = count[0] ? s1[0] / static_cast<double>(count[0]) : nan;
  r.Jk_easy = count[0] ? sk[0] / static_cast<double>(count[0]) : nan;
  r.J1_hard = count[1] ? s1[1] / static_cast<double>(count[1]) : nan;
  r.Jk_hard = count[1] ? sk[1] / static_cast<double>(count[1]) : nan;
  r.hard_fraction = static_cast<double>(count[1]) / n;

  const AssumptionConstants c = options.constants.value_or(assumption_constants_uniform(batch));
  const ConflictReport report = conflict_report_at(batch, theta, k, options.margin, c);
  r.inner_product = report.inner_product;
  r.delta_bound = report.delta_bound;
  return r;
}

/// theta+ = theta + eta grad J_k(theta), with the exact batch gradient.
/// The returned record describes theta+.
inline std::pair<Theta, TrajectoryRecord> ascent_step(const Theta& theta, const PromptBatch& batch, int k,
                                                      double eta, int step = 1,
                                                      const StepOptions& options = {}) {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw DomainError("step size eta must be > 0");
  passk::detail::check_k(k);
  if (batch.empty()) throw DomainError("batch must be non-empty");
  const Vec2 g = objective_gradient(batch, theta, k);
  if (!g.allFinite()) throw DomainError("non-finite pass@k gradient");
  const Theta next = theta + eta * g;
  TrajectoryRecord r = evaluate_state(batch, next, k, step, options);
  r.eta = eta;
  return {next, r};
}

/// Records step 0 (theta0) and each of `steps` fixed-size ascent steps.
inline std::vector<TrajectoryRecord> run_trajectory(const PromptBatch& batch, const Theta& theta0, int k,
                                                    double eta, int steps, const StepOptions& options = {}) {
  if (steps < 1) throw DomainError("steps must be >= 1");
  std::vector<TrajectoryRecord> out;
  out.reserve(static_cast<std::size_t>(steps) + 1);
  out.push_back(evaluate_state(batch, theta0, k, 0, options));
  Theta theta = theta0;
  for (int s = 1; s <= steps; ++s) {
    auto [next, rec] = ascent_step(theta, batch, k, eta, s, options);
    theta = next;
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<TrajectoryRecord> run_trajectory(const BanditConfig& config, std::size_t n, const Theta& theta0,
                                                    int k, double eta, int steps, const StepOptions& options = {}) {
  return run_trajectory(sample_prompts(config, n), theta0, k, eta, steps, options);
}

/// Ascent with eta = max_safe_step recomputed at every state; stops after
/// `max_steps` or as soon as delta(theta) <= 0 (no certificate left).
inline std::vector<TrajectoryRecord> run_certified_trajectory(const PromptBatch& batch, const Theta& theta0, int k,
                                                              int max_steps, const StepOptions& options = {}) {
  if (max_steps < 1) throw DomainError("steps must be >= 1");
  const AssumptionConstants c = options.constants.value_or(assumption_constants_uniform(batch));
  StepOptions opts = options;
  opts.constants = c;
  const SmoothnessConstants sc = smoothness_constants(c.G2, c.F, k);
  std::vector<TrajectoryRecord> out;
  out.push_back(evaluate_state(batch, theta0, k, 0, opts));
  Theta theta = theta0;
  for (int s = 1; s <= max_steps && out.back().delta_bound > 0.0; ++s) {
    const double eta = max_safe_step(out.back().delta_bound, sc.C2, sc.Lk);
    auto [next, rec] = ascent_step(theta, batch, k, eta, s, opts);
    theta = next;
    out.push_back(std::move(rec));
  }
  return out;
}

inline void write_trajectory_csv(const std::string& path, const std::vector<TrajectoryRecord>& records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "step,J1_pop,Jk_pop,J1_easy,J1_hard,Jk_easy,Jk_hard,inner_product,delta_bound\n";
  for (const auto& r : records) {
    out << r.step;
    for (double v : {r.J1_pop, r.Jk_pop, r.J1_easy, r.J1_hard, r.Jk_easy, r.Jk_hard, r.inner_product, r.delta_bound})
      out << ',' << format_double(v);
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace passk::toy
