#pragma once

// Diagnostic pipeline over externally supplied per-prompt pass@1 gradient
// logs: difficulty filtering, agreement scores against the filtered pass@1
// gradient, pass@k weights and weighted contributions.
//
// Log format, one JSON object per line:
//   {"prompt_id": str, "pass1": float, "grad": [float, ...],
//    "label": str (optional), "mass": float (optional)}

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "passk/conflict_analysis.hpp"
#include "passk/core_objectives.hpp"
#include "passk/error.hpp"
#include "passk/format.hpp"
#include "passk/interference.hpp"
#include "passk/rng.hpp"

namespace passk::diag {

struct GradLogRecord {
  std::string prompt_id;
  double pass1 = 0.0;
  Vector grad;
  std::optional<std::string> label;
  std::optional<double> mass;
};

enum class Tag { hard, easy };

inline const char* to_string(Tag t) { return t == Tag::hard ? "hard" : "easy"; }

struct FilterSpec {
  double delta1 = 0.85;  // easy: pass1 > delta1
  double delta2 = 0.10;  // hard: pass1 < delta2

  void validate() const {
    if (!(delta2 > 0.0 && delta2 < delta1 && delta1 < 1.0))
      throw DomainError("thresholds must satisfy 0 < delta2 < delta1 < 1 (got delta1=" + format_double(delta1) +
                        ", delta2=" + format_double(delta2) + ")");
  }
};

struct FilteredSet {
  std::vector<GradLogRecord> records;
  std::vector<Tag> tags;
  std::size_t hard = 0;
  std::size_t easy = 0;
  std::size_t dropped = 0;

  double ratio() const {
    return hard == 0 ? std::numeric_limits<double>::infinity()
                     : static_cast<double>(easy) / static_cast<double>(hard);
  }

  /// "86 hard, 464 easy, ratio 5.4:1"
  std::string counts_line() const {
    std::ostringstream os;
    os << hard << " hard, " << easy << " easy, ratio ";
    if (hard == 0) {
      os << "inf:1";
    } else {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.1f:1", ratio());
      os << buf;
    }
    return os.str();
  }
};

struct DiagRow {
  std::string prompt_id;
  double pass1 = 0.0;
  double agreement = 0.0;
  double weight = 0.0;
  double contribution = 0.0;  // weight * agreement
  Tag tag = Tag::easy;
};

struct DiagReport {
  int k = 1;
  std::size_t hard = 0;
  std::size_t easy = 0;
  double ratio = 0.0;
  std::string counts;
  double unweighted_mean_agreement = 0.0;  // E[a] = ||grad J_1||^2
  double weighted_mean_agreement = 0.0;    // E[w a] / E[w]
  double mean_shift = 0.0;                 // weighted - unweighted
  double mean_weight = 0.0;
  double inner_product = 0.0;              // E[w a] = <grad J_k, grad J_1>
  double contribution_sum = 0.0;           // sum_i w_i a_i, unnormalised
  std::vector<DiagRow> rows;
  ConflictReport conflict;                 // same data through conflict_report
};

// --- loading ----------------------------------------------------------------

inline GradLogRecord record_from_json(const nlohmann::json& j) {
  GradLogRecord r;
  r.prompt_id = j.at("prompt_id").get<std::string>();
  r.pass1 = j.at("pass1").get<double>();
  if (!(r.pass1 >= 0.0 && r.pass1 <= 1.0))
    throw ParseError("pass1 must lie in [0,1], got " + format_double(r.pass1));
  const auto& g = j.at("grad");
  if (!g.is_array() || g.empty()) throw ParseError("grad must be a non-empty array");
  r.grad.resize(static_cast<Eigen::Index>(g.size()));
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!g[i].is_number()) throw ParseError("grad entries must be numbers");
    r.grad[static_cast<Eigen::Index>(i)] = g[i].get<double>();
  }
  if (!r.grad.allFinite()) throw ParseError("grad entries must be finite");
  if (j.contains("label") && !j["label"].is_null()) r.label = j["label"].get<std::string>();
  if (j.contains("mass") && !j["mass"].is_null()) {
    r.mass = j["mass"].get<double>();
    if (!(*r.mass >= 0.0)) throw ParseError("mass must be nonnegative");
  }
  return r;
}

inline nlohmann::json to_json(const GradLogRecord& r) {
  nlohmann::json j = {{"prompt_id", r.prompt_id}, {"pass1", r.pass1}};
  j["grad"] = std::vector<double>(r.grad.data(), r.grad.data() + r.grad.size());
  if (r.label) j["label"] = *r.label;
  if (r.mass) j["mass"] = *r.mass;
  return j;
}

inline std::vector<GradLogRecord> load_gradlog(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open gradient log '" + path + "'");
  std::vector<GradLogRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    GradLogRecord r;
    try {
      r = record_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + e.what());
    } catch (const Error& e) {
      throw ParseError(where + e.what());
    }
    if (!out.empty() && r.grad.size() != out.front().grad.size())
      throw ShapeError(where + "gradient dimension " + std::to_string(r.grad.size()) + " differs from " +
                       std::to_string(out.front().grad.size()));
    out.push_back(std::move(r));
  }
  if (out.empty()) throw ParseError(path + ": empty gradient log");
  return out;
}

inline void write_gradlog(const std::vector<GradLogRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

// --- pipeline ---------------------------------------------------------------

inline FilteredSet filter_by_difficulty(const std::vector<GradLogRecord>& records, const FilterSpec& spec) {
  spec.validate();
  FilteredSet out;
  for (const auto& r : records) {
    if (r.pass1 < spec.delta2) {
      out.records.push_back(r);
      out.tags.push_back(Tag::hard);
      ++out.hard;
    } else if (r.pass1 > spec.delta1) {
      out.records.push_back(r);
      out.tags.push_back(Tag::easy);
      ++out.easy;
    } else {
      ++out.dropped;
    }
  }
  return out;
}

/// Uniform over the filtered records unless every record carries a mass, in
/// which case the masses are renormalised over the filtered set.
inline std::vector<double> prompt_mass(const FilteredSet& set) {
  const std::size_t n = set.records.size();
  bool all = n > 0;
  double total = 0.0;
  for (const auto& r : set.records) {
    all = all && r.mass.has_value();
    if (r.mass) total += *r.mass;
  }
  if (!all) return SuccessProfile::uniform_mass(n);
  if (!(total > 0.0)) throw DomainError("record masses sum to zero");
  std::vector<double> m;
  m.reserve(n);
  for (const auto& r : set.records) m.push_back(*r.mass / total);
  return m;
}

inline GradientTable to_gradient_table(const FilteredSet& set) {
  const std::size_t n = set.records.size();
  if (n == 0) throw DomainError("no records survived filtering");
  Matrix grads(static_cast<Eigen::Index>(n), set.records.front().grad.size());
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) {
    grads.row(static_cast<Eigen::Index>(i)) = set.records[i].grad.transpose();
    ids.push_back(set.records[i].prompt_id);
  }
  return GradientTable(std::move(ids), std::move(grads), prompt_mass(set));
}

inline SuccessProfile to_success_profile(const FilteredSet& set) {
  std::vector<double> probs;
  std::vector<std::string> ids;
  for (const auto& r : set.records) {
    probs.push_back(r.pass1);
    ids.push_back(r.prompt_id);
  }
  return SuccessProfile(std::move(probs), prompt_mass(set), std::move(ids));
}

/// Logs carry no policy, so G^2 defaults to max_i ||grad_i||^2 (a valid bound
/// on every agreement score) and F to G^2.
inline AssumptionConstants default_constants(const FilteredSet& set) {
  AssumptionConstants c;
  for (const auto& r : set.records) c.G2 = std::max(c.G2, r.grad.squaredNorm());
  c.F = c.G2;
  return c;
}

struct DiagnoseOptions {
  double margin = kDefaultMargin;
  std::optional<double> G2;
  std::optional<double> F;
};

inline DiagReport diagnose(const FilteredSet& set, int k, const DiagnoseOptions& options = {}) {
  detail::check_k(k);
  if (set.records.size() < 2) throw DomainError("diagnose needs at least 2 filtered records");
  const GradientTable table = to_gradient_table(set);
  const SuccessProfile profile = to_success_profile(set);
  const Vector a = agreement_scores(table);
  const auto mass = table.mass();

  DiagReport r;
  r.k = k;
  r.hard = set.hard;
  r.easy = set.easy;
  r.ratio = set.ratio();
  r.counts = set.counts_line();
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    DiagRow row;
    row.prompt_id = set.records[i].prompt_id;
    row.pass1 = set.records[i].pass1;
    row.agreement = a[static_cast<Eigen::Index>(i)];
    row.weight = wk(row.pass1, k);
    row.contribution = row.weight * row.agreement;
    row.tag = set.tags[i];
    r.unweighted_mean_agreement += mass[i] * row.agreement;
    r.inner_product += mass[i] * row.contribution;
    r.mean_weight += mass[i] * row.weight;
    r.contribution_sum += row.contribution;
    r.rows.push_back(std::move(row));
  }
  r.weighted_mean_agreement =
      r.mean_weight > 0.0 ? r.inner_product / r.mean_weight : std::numeric_limits<double>::quiet_NaN();
  r.mean_shift = r.weighted_mean_agreement - r.unweighted_mean_agreement;

  AssumptionConstants c = default_constants(set);
  if (options.G2) c.G2 = *options.G2;
  c.F = options.F.value_or(c.G2);
  r.conflict = conflict_report(table, profile, k, options.margin, c);
  return r;
}

inline nlohmann::json to_json(const DiagReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"prompt_id", row.prompt_id},
                    {"pass1", row.pass1},
                    {"agreement", row.agreement},
                    {"weight", row.weight},
                    {"contribution", row.contribution},
                    {"tag", to_string(row.tag)}});
  return {{"k", r.k},
          {"counts", {{"hard", r.hard}, {"easy", r.easy}, {"ratio", r.ratio}, {"summary", r.counts}}},
          {"unweighted_mean_agreement", r.unweighted_mean_agreement},
          {"weighted_mean_agreement", r.weighted_mean_agreement},
          {"mean_shift", r.mean_shift},
          {"mean_weight", r.mean_weight},
          {"inner_product", r.inner_product},
          {"contribution_sum", r.contribution_sum},
          {"conflict", passk::to_json(r.conflict)},
          {"rows", rows}};
}

// --- CSV outputs ------------------------------------------------------------

struct ScatterRow {
  std::string prompt_id;
  double agreement = 0.0;
  double weight = 0.0;
  double pass1 = 0.0;
  Tag tag = Tag::easy;
};

/// Weight-vs-agreement scatter data, coloured by pass1.
inline std::vector<ScatterRow> scatter_export(const FilteredSet& set, int k, const std::string& path) {
  const DiagReport report = diagnose(set, k);
  std::vector<ScatterRow> rows;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "prompt_id,agreement,weight,pass1,tag\n";
  for (const auto& r : report.rows) {
    rows.push_back({r.prompt_id, r.agreement, r.weight, r.pass1, r.tag});
    out << r.prompt_id << ',' << format_double(r.agreement) << ',' << format_double(r.weight) << ','
        << format_double(r.pass1) << ',' << to_string(r.tag) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path + "'");
  return rows;
}

inline std::vector<ScatterRow> read_scatter_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "prompt_id,agreement,weight,pass1,tag")
    throw ParseError(path + ": unexpected scatter header");
  std::vector<ScatterRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw ParseError(path + ":" + std::to_string(lineno) + ": expected 5 columns");
    try {
      rows.push_back({f[0], std::stod(f[1]), std::stod(f[2]), std::stod(f[3]), f[4] == "hard" ? Tag::hard : Tag::easy});
    } catch (const std::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline void write_rows_csv(const DiagReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "prompt_id,pass1,agreement,weight,contribution,tag\n";
  for (const auto& r : report.rows)
    out << r.prompt_id << ',' << format_double(r.pass1) << ',' << format_double(r.agreement) << ','
        << format_double(r.weight) << ',' << format_double(r.contribution) << ',' << to_string(r.tag) << '\n';
  if (!out) throw IoError("write failed for '" + path + "'");
}

// --- synthetic conflict logs ------------------------------------------------

/// Geometry of a synthetic log: easy prompts share a direction u, hard prompts
/// point along -u with a larger magnitude, plus isotropic noise. Middle-band
/// records (dropped by the default filter) carry random gradients.
struct SyntheticLogSpec {
  std::size_t easy = 464;
  std::size_t hard = 86;
  std::size_t middle = 50;
  Eigen::Index dim = 64;
  double easy_scale = 1.0;
  double hard_scale = 2.0;
  double noise = 0.05;
  std::uint64_t seed = 2024;
};

inline std::vector<GradLogRecord> make_synthetic_conflict_log(const SyntheticLogSpec& spec) {
  if (spec.dim < 1) throw DomainError("dimension must be >= 1");
  Rng dir_rng(spec.seed, std::string_view("direction"));
  Vector u(spec.dim);
  for (Eigen::Index j = 0; j < spec.dim; ++j) u[j] = dir_rng.normal();
  u /= u.norm();

  std::vector<GradLogRecord> out;
  const std::size_t total = spec.easy + spec.hard + spec.middle;
  out.reserve(total);
  for (std::size_t i = 0; i < total; ++i) {
    Rng rng(spec.seed, static_cast<std::uint64_t>(i));
    GradLogRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "q%05zu", i);
    r.prompt_id = id;
    Vector z(spec.dim);
    for (Eigen::Index j = 0; j < spec.dim; ++j) z[j] = rng.normal();
    const Vector noise = spec.noise * z;
    if (i < spec.easy) {
      r.pass1 = 0.86 + 0.135 * rng.uniform();
      r.grad = spec.easy_scale * u + noise;
      r.label = "easy";
    } else if (i < spec.easy + spec.hard) {
      r.pass1 = 0.005 + 0.09 * rng.uniform();
      r.grad = -spec.hard_scale * u + noise;
      r.label = "hard";
    } else {
      r.pass1 = 0.15 + 0.65 * rng.uniform();
      r.grad = z;
      r.label = "medium";
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace passk::diag
