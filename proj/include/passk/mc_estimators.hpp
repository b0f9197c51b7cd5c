#pragma once

// Monte Carlo estimators of grad p(x) and grad J_k from sampled actions,
// using the score-function identity grad p(x) = E_y[r(x,y) grad log pi(y|x)].

#include <Eigen/Dense>

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "passk/core_objectives.hpp"
#include "passk/error.hpp"
#include "passk/interference.hpp"
#include "passk/rng.hpp"
#include "passk/toy_bandit.hpp"

namespace passk {

struct Sample {
  int action = 0;
  int reward = 0;  // exactly 0 or 1
  Vector score;    // grad log pi(action | x)
};

/// Sampled responses grouped by prompt, in insertion order of prompts.
class SampleSet {
 public:
  void add(const std::string& prompt_id, Sample s) {
    if (s.reward != 0 && s.reward != 1) throw DomainError("reward must be exactly 0 or 1");
    if (s.score.size() == 0) throw ShapeError("score vector must be non-empty");
    if (dim_ == 0) dim_ = s.score.size();
    if (s.score.size() != dim_)
      throw ShapeError("score dimension " + std::to_string(s.score.size()) + " differs from " +
                       std::to_string(dim_));
    auto it = index_.find(prompt_id);
    if (it == index_.end()) {
      it = index_.emplace(prompt_id, ids_.size()).first;
      ids_.push_back(prompt_id);
      samples_.emplace_back();
    }
    samples_[it->second].push_back(std::move(s));
  }

  const std::vector<std::string>& ids() const { return ids_; }
  Eigen::Index dim() const { return dim_; }
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  const std::vector<Sample>& samples(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ShapeError("no samples for prompt '" + id + "'");
    return samples_[it->second];
  }

  /// Empirical success rate c/n for one prompt.
  double success_rate(const std::string& id) const {
    const auto& s = samples(id);
    long c = 0;
    for (const auto& x : s) c += x.reward;
    return static_cast<double>(c) / static_cast<double>(s.size());
  }

 private:
  std::vector<std::string> ids_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::vector<Sample>> samples_;
  Eigen::Index dim_ = 0;
};

/// (1/n) sum r s, an unbiased estimate of grad p(x).
inline Vector mc_grad_pass1(const SampleSet& samples, const std::string& prompt_id) {
  const auto& s = samples.samples(prompt_id);
  if (s.empty()) throw DomainError("prompt '" + prompt_id + "' has no samples");
  Vector g = Vector::Zero(samples.dim());
  for (const auto& x : s)
    if (x.reward == 1) g += x.score;
  return g / static_cast<double>(s.size());
}

/// Plug-in profile p^ = c/n per prompt with the given mass (uniform if empty).
inline SuccessProfile empirical_profile(const SampleSet& samples, std::vector<double> mass = {}) {
  std::vector<double> probs;
  for (const auto& id : samples.ids()) probs.push_back(samples.success_rate(id));
  if (mass.empty()) return SuccessProfile::uniform(std::move(probs), samples.ids());
  return SuccessProfile(std::move(probs), std::move(mass), samples.ids());
}

/// sum_i mass_i w_k(p_i) grad^ p(x_i), where p_i comes from `profile` (exact
/// probabilities or the plug-in estimate).
inline Vector mc_grad_passk(const SampleSet& samples, const SuccessProfile& profile, int k) {
  detail::check_k(k);
  Vector g = Vector::Zero(samples.dim());
  const auto mass = profile.mass();
  const auto probs = profile.probs();
  for (std::size_t i = 0; i < profile.size(); ++i) {
    const double w = wk(probs[i], k);
    g += (mass[i] * w) * mc_grad_pass1(samples, profile.ids()[i]);
  }
  return g;
}

namespace toy {

/// Draws n actions per prompt from pi_theta; the stream of each prompt is
/// keyed by (seed, prompt id).
inline SampleSet sample_actions(const PromptBatch& batch, const Theta& theta, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw DomainError("sample count must be >= 1");
  SampleSet set;
  for (const auto& x : batch) {
    Rng rng(seed, x.id);
    const double p1 = action_prob(theta, x, 1);
    const Vector s1 = score(theta, x, 1);
    const Vector s0 = score(theta, x, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const int a = rng.uniform() < p1 ? 1 : 0;
      set.add(x.id, Sample{a, a == x.correct_action ? 1 : 0, a == 1 ? s1 : s0});
    }
  }
  return set;
}

}  // namespace toy

// --- JSONL exchange ---------------------------------------------------------

inline void write_samples_jsonl(const SampleSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& id : set.ids()) {
    for (const auto& s : set.samples(id)) {
      nlohmann::json j = {{"prompt_id", id}, {"action", s.action}, {"reward", s.reward}};
      j["score"] = std::vector<double>(s.score.data(), s.score.data() + s.score.size());
      out << j.dump() << '\n';
    }
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline SampleSet read_samples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  SampleSet set;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto v = j.at("score").get<std::vector<double>>();
      set.add(j.at("prompt_id").get<std::string>(),
              Sample{j.at("action").get<int>(), j.at("reward").get<int>(), Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()))});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return set;
}

}  // namespace passk
