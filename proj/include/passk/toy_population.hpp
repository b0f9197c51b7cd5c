#pragma once

// Exact population quantities of the toy bandit over a fixed prompt batch
// (uniform mass): success profile, gradient table, J_k and grad J_k.

#include <string>
#include <vector>

#include "passk/conflict_analysis.hpp"
#include "passk/core_objectives.hpp"
#include "passk/interference.hpp"
#include "passk/toy_bandit.hpp"

namespace passk::toy {

inline std::vector<std::string> batch_ids(const PromptBatch& batch) {
  std::vector<std::string> ids;
  ids.reserve(batch.size());
  for (const auto& x : batch) ids.push_back(x.id);
  return ids;
}

inline SuccessProfile success_profile(const PromptBatch& batch, const Theta& theta) {
  std::vector<double> probs;
  probs.reserve(batch.size());
  for (const auto& x : batch) probs.push_back(success_prob(theta, x));
  return SuccessProfile::uniform(std::move(probs), batch_ids(batch));
}

inline GradientTable gradient_table(const PromptBatch& batch, const Theta& theta) {
  Matrix grads(static_cast<Eigen::Index>(batch.size()), 2);
  for (std::size_t i = 0; i < batch.size(); ++i)
    grads.row(static_cast<Eigen::Index>(i)) = grad_success_prob(theta, batch[i]).transpose();
  return GradientTable::uniform(batch_ids(batch), std::move(grads));
}

inline double objective(const PromptBatch& batch, const Theta& theta, int k) {
  return pass_at_k(success_profile(batch, theta), k);
}

/// grad J_k = E[w_k(p) grad p] from the closed-form per-prompt gradients.
inline Vec2 objective_gradient(const PromptBatch& batch, const Theta& theta, int k) {
  const Vector g = passk_gradient(gradient_table(batch, theta), success_profile(batch, theta), k);
  return Vec2{g[0], g[1]};
}

inline ConflictReport conflict_report_at(const PromptBatch& batch, const Theta& theta, int k, double margin,
                                         const AssumptionConstants& constants) {
  return conflict_report(gradient_table(batch, theta), success_profile(batch, theta), k, margin, constants);
}

}  // namespace passk::toy
