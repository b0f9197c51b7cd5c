#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "passk/core_objectives.hpp"
#include "passk/interference.hpp"
#include "passk/rng.hpp"

namespace testing {

/// Fresh scratch directory under the system temp dir, unique per tag.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("passk-test-" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<std::string> make_ids(std::size_t n, const char* prefix = "x") {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(prefix + std::to_string(i));
  return ids;
}

/// Random masses on the simplex, strictly positive.
inline std::vector<double> random_mass(passk::Rng& rng, std::size_t n) {
  std::vector<double> m(n);
  double s = 0.0;
  for (auto& v : m) s += (v = rng.uniform() + 1e-3);
  for (auto& v : m) v /= s;
  return m;
}

struct RandomInstance {
  passk::GradientTable table;
  passk::SuccessProfile profile;
};

/// Gaussian gradients, uniform probabilities, random mass.
inline RandomInstance random_instance(passk::Rng& rng, std::size_t n, Eigen::Index d) {
  passk::Matrix g(static_cast<Eigen::Index>(n), d);
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < d; ++j) g(i, j) = rng.normal();
  std::vector<double> p(n);
  for (auto& v : p) v = rng.uniform();
  auto ids = make_ids(n);
  auto mass = random_mass(rng, n);
  return {passk::GradientTable(ids, g, mass), passk::SuccessProfile(p, mass, ids)};
}

}  // namespace testing
