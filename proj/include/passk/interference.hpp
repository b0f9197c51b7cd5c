#pragma once

// Prompt interference: the pairwise kernel of per-prompt pass@1 gradients,
// agreement scores against the population gradient, and the negatively
// interfering set with its aggregate pass@k weight mass.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "passk/core_objectives.hpp"
#include "passk/error.hpp"
#include "passk/format.hpp"

namespace passk {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kDefaultMargin = 1e-6;
inline constexpr double kZeroNorm = 1e-15;

namespace detail {

/// Inner product in ascending index order.
inline double dot(const double* a, const double* b, Eigen::Index n) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace detail

/// Per-prompt pass@1 gradients (one row per prompt) with the prompt
/// distribution and the population gradient grad J_1 = sum_i mass_i g_i.
class GradientTable {
 public:
  GradientTable(std::vector<std::string> ids, Matrix grads, std::vector<double> mass)
      : ids_(std::move(ids)), grads_(std::move(grads)), mass_(std::move(mass)) {
    const auto n = static_cast<std::size_t>(grads_.rows());
    if (n == 0) throw ShapeError("gradient table must have at least one row");
    if (grads_.cols() == 0) throw ShapeError("gradient dimension must be >= 1");
    if (ids_.size() != n || mass_.size() != n)
      throw ShapeError("ids, gradient rows and mass must have equal length");
    if (!grads_.allFinite()) throw DomainError("gradient entries must be finite");
    for (double m : mass_)
      if (!(m >= 0.0)) throw DomainError("prompt mass must be nonnegative");
    if (std::abs(detail::compensated_sum(mass_) - 1.0) > 1e-12)
      throw DomainError("prompt mass must sum to 1");
    // Row-major copy keeps each prompt's gradient contiguous for the dot loops.
    rows_ = grads_;
    mean_ = Vector::Zero(grads_.cols());
    for (std::size_t i = 0; i < n; ++i) mean_ += mass_[i] * grads_.row(static_cast<Eigen::Index>(i)).transpose();
  }

  static GradientTable uniform(std::vector<std::string> ids, Matrix grads) {
    auto mass = SuccessProfile::uniform_mass(static_cast<std::size_t>(grads.rows()));
    return GradientTable(std::move(ids), std::move(grads), std::move(mass));
  }

  std::size_t size() const { return ids_.size(); }
  Eigen::Index dim() const { return grads_.cols(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const Matrix& grads() const { return grads_; }
  std::span<const double> mass() const { return mass_; }
  const Vector& mean_grad() const { return mean_; }

  const double* row_data(std::size_t i) const { return rows_.data() + i * static_cast<std::size_t>(dim()); }
  Vector row(std::size_t i) const { return grads_.row(static_cast<Eigen::Index>(i)).transpose(); }

 private:
  std::vector<std::string> ids_;
  Matrix grads_;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rows_;
  std::vector<double> mass_;
  Vector mean_;
};

/// kappa(x, x') = <grad p(x), grad p(x')>.
inline double kernel(const Vector& g1, const Vector& g2) {
  if (g1.size() != g2.size())
    throw ShapeError("kernel: dimension mismatch (" + std::to_string(g1.size()) + " vs " +
                     std::to_string(g2.size()) + ")");
  return detail::dot(g1.data(), g2.data(), g1.size());
}

inline double cosine(const Vector& g1, const Vector& g2) {
  const double n1 = std::sqrt(kernel(g1, g1));
  const double n2 = std::sqrt(kernel(g2, g2));
  if (n1 < kZeroNorm || n2 < kZeroNorm) return 0.0;
  return kernel(g1, g2) / (n1 * n2);
}

/// Full pairwise kernel; with `normalize` each entry is a cosine, and rows
/// with norm below 1e-15 produce zeros (including on the diagonal).
inline Matrix kernel_matrix(const GradientTable& table, bool normalize) {
  const std::size_t n = table.size();
  const auto d = table.dim();
  Matrix k(n, n);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i)
    norms[i] = std::sqrt(detail::dot(table.row_data(i), table.row_data(i), d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double v = detail::dot(table.row_data(i), table.row_data(j), d);
      if (normalize) v = (norms[i] < kZeroNorm || norms[j] < kZeroNorm) ? 0.0 : v / (norms[i] * norms[j]);
      const auto ii = static_cast<Eigen::Index>(i);
      const auto jj = static_cast<Eigen::Index>(j);
      k(ii, jj) = v;
      k(jj, ii) = v;
    }
  }
  return k;
}

/// a(x) = <grad p(x), grad J_1>.
inline Vector agreement_scores(const GradientTable& table) {
  const std::size_t n = table.size();
  Vector a(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    a[static_cast<Eigen::Index>(i)] = detail::dot(table.row_data(i), table.mean_grad().data(), table.dim());
  return a;
}

/// Second route: a(x) = E_{x'}[kappa(x, x')], the mass-weighted kernel row mean.
inline Vector agreement_scores_via_kernel(const GradientTable& table) {
  const Matrix k = kernel_matrix(table, false);
  const auto mass = table.mass();
  Vector a = Vector::Zero(k.rows());
  for (Eigen::Index i = 0; i < k.rows(); ++i) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < k.cols(); ++j) acc += mass[static_cast<std::size_t>(j)] * k(i, j);
    a[i] = acc;
  }
  return a;
}

struct AgreementProfile {
  Vector scores;
  double margin = kDefaultMargin;
  int k = 1;
  std::vector<std::size_t> neg_set;  // indices with score <= -margin
  double q = 0.0;                    // D(neg_set)
  double w_minus = 0.0;              // E[w 1{neg}]
  double w_plus = 0.0;               // E[w 1{not neg}]
};

namespace detail {

inline void check_aligned(const GradientTable& table, const SuccessProfile& profile) {
  if (table.size() != profile.size()) throw ShapeError("gradient table and success profile differ in size");
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table.ids()[i] != profile.ids()[i])
      throw ShapeError("prompt id mismatch at row " + std::to_string(i) + ": '" + table.ids()[i] +
                       "' vs '" + profile.ids()[i] + "'");
    if (std::abs(table.mass()[i] - profile.mass()[i]) > 1e-15)
      throw ShapeError("prompt mass mismatch for '" + table.ids()[i] + "'");
  }
}

}  // namespace detail

inline AgreementProfile classify_interference(const GradientTable& table, const SuccessProfile& profile,
                                              double margin, int k) {
  if (!(margin > 0.0)) throw DomainError("margin must be > 0");
  detail::check_k(k);
  detail::check_aligned(table, profile);
  AgreementProfile out;
  out.scores = agreement_scores(table);
  out.margin = margin;
  out.k = k;
  const auto mass = profile.mass();
  const auto probs = profile.probs();
  for (std::size_t i = 0; i < table.size(); ++i) {
    const double w = wk(probs[i], k);
    if (out.scores[static_cast<Eigen::Index>(i)] <= -margin) {
      out.neg_set.push_back(i);
      out.q += mass[i];
      out.w_minus += mass[i] * w;
    } else {
      out.w_plus += mass[i] * w;
    }
  }
  return out;
}

// --- CSV export -------------------------------------------------------------

/// Square matrix with ids as the header row and as the first column.
inline void write_matrix_csv(const std::string& path, const std::vector<std::string>& ids, const Matrix& m) {
  if (static_cast<std::size_t>(m.rows()) != ids.size() || m.rows() != m.cols())
    throw ShapeError("matrix must be square with one id per row");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "id";
  for (const auto& id : ids) out << ',' << id;
  out << '\n';
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out << ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.cols(); ++j) out << ',' << format_double(m(i, j));
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline void write_scores_csv(const std::string& path, const std::vector<std::string>& ids, const Vector& scores) {
  if (static_cast<std::size_t>(scores.size()) != ids.size()) throw ShapeError("one score per id required");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "id,agreement\n";
  for (std::size_t i = 0; i < ids.size(); ++i)
    out << ids[i] << ',' << format_double(scores[static_cast<Eigen::Index>(i)]) << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace passk
