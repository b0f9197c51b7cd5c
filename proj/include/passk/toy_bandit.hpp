#pragma once

// Two-action logistic contextual bandit with easy/hard prompts whose scalar
// feature is drawn from two overlapping unit Gaussians.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "passk/core_objectives.hpp"
#include "passk/error.hpp"
#include "passk/rng.hpp"

namespace passk::toy {

using Vec2 = Eigen::Vector2d;

/// Policy parameters of the logistic policy, pi(1|x) = sigmoid(theta . psi(x)).
using Theta = Eigen::Vector2d;

enum class Difficulty { easy, hard };

inline const char* to_string(Difficulty d) { return d == Difficulty::easy ? "easy" : "hard"; }

inline Difficulty difficulty_from_string(const std::string& s) {
  if (s == "easy") return Difficulty::easy;
  if (s == "hard") return Difficulty::hard;
  throw ParseError("unknown difficulty label '" + s + "'");
}

struct BanditConfig {
  double separation = 0.2;
  double hard_fraction = 0.4;
  double feature_std = 1.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (!(separation > 0.0) || !std::isfinite(separation))
      throw DomainError("separation must be > 0");
    if (!(hard_fraction >= 0.0 && hard_fraction <= 1.0))
      throw DomainError("hard_fraction must lie in [0,1]");
    if (!(feature_std > 0.0) || !std::isfinite(feature_std))
      throw DomainError("feature_std must be > 0");
  }
};

struct PromptInstance {
  std::string id;
  Vec2 features{1.0, 0.0};  // [1, s(x)]
  Difficulty label = Difficulty::easy;
  int correct_action = 0;   // 0 for easy, 1 for hard

  double scalar_feature() const { return features[1]; }
};

using PromptBatch = std::vector<PromptInstance>;

inline PromptInstance make_prompt(std::string id, double s, Difficulty label) {
  if (!std::isfinite(s)) throw DomainError("scalar feature must be finite");
  return {std::move(id), Vec2{1.0, s}, label, label == Difficulty::hard ? 1 : 0};
}

inline std::string prompt_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%05zu", index);
  return buf;
}

/// Draws n prompts; prompt i uses the stream (seed, i), so the batch prefix
/// is stable when n grows.
inline PromptBatch sample_prompts(const BanditConfig& config, std::size_t n) {
  config.validate();
  if (n < 1) throw DomainError("prompt count must be >= 1");
  PromptBatch batch;
  batch.reserve(n);
  const double half = 0.5 * config.separation;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(config.seed, static_cast<std::uint64_t>(i));
    const bool hard = rng.bernoulli(config.hard_fraction);
    const double s = rng.normal(hard ? half : -half, config.feature_std);
    batch.push_back(make_prompt(prompt_id(i), s, hard ? Difficulty::hard : Difficulty::easy));
  }
  return batch;
}

inline double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

namespace detail {
inline void check_theta(const Theta& theta) {
  if (!theta.allFinite()) throw DomainError("policy parameters must be finite");
}
}  // namespace detail

inline double action_prob(const Theta& theta, const PromptInstance& x, int action) {
  detail::check_theta(theta);
  if (action != 0 && action != 1) throw DomainError("action must be 0 or 1");
  const double t = theta.dot(x.features);
  // sigmoid(-t) instead of 1 - sigmoid(t) keeps small probabilities accurate.
  return action == 1 ? sigmoid(t) : sigmoid(-t);
}

inline double success_prob(const Theta& theta, const PromptInstance& x) {
  return action_prob(theta, x, x.correct_action);
}

/// z = sigmoid(t)(1 - sigmoid(t)), always in (0, 1/4] for finite t.
inline double curvature(const Theta& theta, const PromptInstance& x) {
  detail::check_theta(theta);
  const double t = theta.dot(x.features);
  return sigmoid(t) * sigmoid(-t);
}

/// grad p = +z psi for hard prompts and -z psi for easy prompts.
inline Vec2 grad_success_prob(const Theta& theta, const PromptInstance& x) {
  const double z = curvature(theta, x);
  return (x.label == Difficulty::hard ? z : -z) * x.features;
}

/// Score vector grad log pi(action | x).
inline Vec2 score(const Theta& theta, const PromptInstance& x, int action) {
  detail::check_theta(theta);
  const double t = theta.dot(x.features);
  return (action == 1 ? sigmoid(-t) : -sigmoid(t)) * x.features;
}

/// Solves logit(1 - p_easy) = theta . psi_easy and logit(p_hard) = theta . psi_hard,
/// recovering the reference policy from target success probabilities.
inline Theta derive_reference_theta(double p_easy_target, double p_hard_target,
                                    const Vec2& psi_easy, const Vec2& psi_hard) {
  if (!(p_easy_target > 0.0 && p_easy_target < 1.0) ||
      !(p_hard_target > 0.0 && p_hard_target < 1.0))
    throw DomainError("target probabilities must lie strictly inside (0,1)");
  Eigen::Matrix2d a;
  a.row(0) = psi_easy.transpose();
  a.row(1) = psi_hard.transpose();
  const double det = a.determinant();
  const double scale = psi_easy.norm() * psi_hard.norm();
  if (!(std::abs(det) > 1e-12 * scale))
    throw DomainError("feature vectors are collinear; reference theta is not identifiable");
  const Vec2 rhs{logit(1.0 - p_easy_target), logit(p_hard_target)};
  // Explicit 2x2 inverse.
  return Theta{(a(1, 1) * rhs[0] - a(0, 1) * rhs[1]) / det,
               (a(0, 0) * rhs[1] - a(1, 0) * rhs[0]) / det};
}

/// The reference policy of the two-prompt trade-off example.
struct TwoPointSetup {
  PromptInstance easy = make_prompt("x_e", -0.1, Difficulty::easy);
  PromptInstance hard = make_prompt("x_h", +0.1, Difficulty::hard);
  double p_easy = 0.86;
  double p_hard = 0.10;

  Theta reference_theta() const {
    return derive_reference_theta(p_easy, p_hard, easy.features, hard.features);
  }
  PromptBatch batch() const { return {easy, hard}; }
};

// Assumption constants for the logistic policy. Both G^2 and F equal
// z ||psi||^2 per prompt, since E_y ||grad log pi||^2 = z ||psi||^2 and
// grad^2 log pi = -z psi psi^T for either action.

/// Constants evaluated at a fixed theta (max over the batch).
inline AssumptionConstants assumption_constants_at(const PromptBatch& batch, const Theta& theta) {
  AssumptionConstants c;
  for (const auto& x : batch) {
    const double v = curvature(theta, x) * x.features.squaredNorm();
    c.G2 = std::max(c.G2, v);
    c.F = std::max(c.F, v);
  }
  return c;
}

/// Constants valid for every theta (z <= 1/4); these are the ones the
/// smoothness and degradation certificates require.
inline AssumptionConstants assumption_constants_uniform(const PromptBatch& batch) {
  AssumptionConstants c;
  for (const auto& x : batch) {
    const double v = 0.25 * x.features.squaredNorm();
    c.G2 = std::max(c.G2, v);
    c.F = std::max(c.F, v);
  }
  return c;
}

// --- JSONL batch exchange ---------------------------------------------------

inline nlohmann::json to_json(const PromptInstance& x) {
  return {{"id", x.id},
          {"psi", {x.features[0], x.features[1]}},
          {"label", to_string(x.label)},
          {"correct_action", x.correct_action}};
}

inline PromptInstance prompt_from_json(const nlohmann::json& j) {
  const auto& psi = j.at("psi");
  if (!psi.is_array() || psi.size() != 2) throw ParseError("psi must be a 2-vector");
  if (psi[0].get<double>() != 1.0) throw ParseError("psi[0] must be exactly 1");
  auto x = make_prompt(j.at("id").get<std::string>(), psi[1].get<double>(),
                       difficulty_from_string(j.at("label").get<std::string>()));
  if (j.at("correct_action").get<int>() != x.correct_action)
    throw ParseError("correct_action inconsistent with label for prompt " + x.id);
  return x;
}

inline void write_batch_jsonl(const PromptBatch& batch, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& x : batch) out << to_json(x).dump() << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline PromptBatch read_batch_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  PromptBatch batch;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      batch.push_back(prompt_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return batch;
}

}  // namespace passk::toy
