// passk: reproducible experiments for pass@k policy optimization, prompt
// interference and pass@k / pass@1 gradient conflict.
//
//   passk toy-demo    two-prompt trade-off: one pass@k step lowers pass@1
//   passk heatmap     cosine kernel matrix of per-prompt gradients
//   passk trajectory  multi-step pass@k ascent with per-label tracking
//   passk kstar       conflict threshold in k and a sign sweep
//   passk diagnose    filtering + agreement analysis of a gradient log
//   passk synth-log   write a synthetic conflict gradient log

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "passk/conflict_analysis.hpp"
#include "passk/core_objectives.hpp"
#include "passk/format.hpp"
#include "passk/gradlog_diag.hpp"
#include "passk/interference.hpp"
#include "passk/optimizer.hpp"
#include "passk/toy_bandit.hpp"
#include "passk/toy_population.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using passk::format_double;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr double kRouteTolerance = 1e-10;

/// Raised when a run completes but an internal identity check fails.
struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json flags_of(const CLI::App& app) {
  json flags = json::object();
  for (const CLI::Option* opt : app.get_options()) {
    const std::string name = opt->get_lnames().empty() ? "" : opt->get_lnames().front();
    if (name.empty() || name == "help" || name == "config") continue;
    if (opt->count() > 0) {
      flags[name] = opt->as<std::string>();
    } else if (opt->get_type_size() == 0) {
      flags[name] = "false";
    } else {
      flags[name] = opt->get_default_str();
    }
  }
  return flags;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw passk::IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
}

void write_manifest(const fs::path& dir, const CLI::App& sub, const json& inputs, const json& outputs) {
  write_json(dir / "manifest.json", {{"tool", "passk"},
                                     {"version", kVersion},
                                     {"command", sub.get_name()},
                                     {"flags", flags_of(sub)},
                                     {"inputs", inputs},
                                     {"outputs", outputs}});
}

fs::path prepare_out(const std::string& dir) {
  fs::path p(dir);
  fs::create_directories(p);
  return p;
}

void print_kv(const std::string& key, double v) { std::cout << "  " << key << " = " << format_double(v) << '\n'; }

void check_routes(const passk::ConflictReport& r) {
  if (!r.routes_agree(kRouteTolerance))
    throw CheckFailure("inner-product routes disagree (relative discrepancy " + format_double(r.route_discrepancy()) +
                       ")");
}

passk::toy::Theta reference_theta() { return passk::toy::TwoPointSetup{}.reference_theta(); }

/// Flat `key = value` lines; '#' starts a comment; blank and [section] lines
/// are ignored.
std::vector<std::pair<std::string, std::string>> read_flat_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw passk::IoError("cannot open config '" + path + "'");
  auto trim = [](std::string t) {
    const auto b = t.find_first_not_of(" \t\r");
    const auto e = t.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : t.substr(b, e - b + 1);
  };
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw passk::ParseError(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    if (key.rfind("--", 0) == 0) key.erase(0, 2);
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

// --- toy-demo ---------------------------------------------------------------

struct ToyDemoArgs {
  double p_easy = 0.86;
  double p_hard = 0.10;
  double s_easy = -0.1;
  double s_hard = 0.1;
  int k = 10;
  double eta = 5.0;
  double margin = 1e-3;
  std::string out = "passk-out/toy-demo";
};

int run_toy_demo(const ToyDemoArgs& a, const CLI::App& sub) {
  using namespace passk::toy;
  if (!(a.eta > 0.0)) throw passk::DomainError("step size eta must be > 0");
  TwoPointSetup setup;
  setup.easy = make_prompt("x_e", a.s_easy, Difficulty::easy);
  setup.hard = make_prompt("x_h", a.s_hard, Difficulty::hard);
  setup.p_easy = a.p_easy;
  setup.p_hard = a.p_hard;
  const Theta theta = setup.reference_theta();
  const PromptBatch batch = setup.batch();

  const Vec2 ge = grad_success_prob(theta, setup.easy);
  const Vec2 gh = grad_success_prob(theta, setup.hard);
  const double pe = success_prob(theta, setup.easy);
  const double ph = success_prob(theta, setup.hard);
  const double cos_psi = passk::cosine(setup.easy.features, setup.hard.features);
  const double kappa = passk::kernel(ge, gh);
  const double cos_grad = passk::cosine(ge, gh);
  const double w_e = passk::wk(pe, a.k);
  const double w_h = passk::wk(ph, a.k);

  const auto constants = assumption_constants_uniform(batch);
  const auto report = conflict_report_at(batch, theta, a.k, a.margin, constants);
  const double j1 = objective(batch, theta, 1);
  const double jk = objective(batch, theta, a.k);
  const auto [theta_plus, after] = ascent_step(theta, batch, a.k, a.eta);
  const double j1_plus = after.J1_pop;
  const double jk_plus = after.Jk_pop;

  std::cout << "two-prompt trade-off (k=" << a.k << ", eta=" << format_double(a.eta) << ")\n";
  print_kv("theta_ref[0]", theta[0]);
  print_kv("theta_ref[1]", theta[1]);
  print_kv("p(x_e)", pe);
  print_kv("p(x_h)", ph);
  print_kv("cos(psi_e, psi_h)", cos_psi);
  print_kv("kappa(x_e, x_h)", kappa);
  print_kv("cos(grad p_e, grad p_h)", cos_grad);
  print_kv("w_e", w_e);
  print_kv("w_h", w_h);
  print_kv("<grad J_k, grad J_1>", report.inner_product);
  print_kv("cos(grad J_1, grad J_k)", report.cosine);
  print_kv("delta(theta)", report.delta_bound);
  std::cout << "  J_1: " << format_double(j1) << " -> " << format_double(j1_plus) << '\n';
  std::cout << "  J_" << a.k << ": " << format_double(jk) << " -> " << format_double(jk_plus) << '\n';

  const fs::path dir = prepare_out(a.out);
  json j = {{"theta_ref", {theta[0], theta[1]}},
            {"theta_plus", {theta_plus[0], theta_plus[1]}},
            {"p_easy", pe},
            {"p_hard", ph},
            {"cos_psi", cos_psi},
            {"kappa", kappa},
            {"cos_grad_p", cos_grad},
            {"w_easy", w_e},
            {"w_hard", w_h},
            {"cos_grad_J1_grad_Jk", report.cosine},
            {"J1_before", j1},
            {"J1_after", j1_plus},
            {"Jk_before", jk},
            {"Jk_after", jk_plus},
            {"k", a.k},
            {"eta", a.eta},
            {"conflict", passk::to_json(report)}};
  write_json(dir / "report.json", j);
  write_manifest(dir, sub, json::array(), {"report.json"});
  check_routes(report);
  return 0;
}

// --- heatmap ----------------------------------------------------------------

struct BanditArgs {
  std::uint64_t seed = 7;
  double separation = 0.2;
  double hard_fraction = 0.4;
  std::size_t n = 6000;

  passk::toy::BanditConfig config() const {
    passk::toy::BanditConfig c;
    c.seed = seed;
    c.separation = separation;
    c.hard_fraction = hard_fraction;
    return c;
  }
};

void add_bandit_flags(CLI::App* sub, BanditArgs& b) {
  sub->add_option("--seed", b.seed, "RNG seed")->envname("PASSK_SEED")->capture_default_str();
  sub->add_option("--separation", b.separation, "distance between easy/hard feature means")->capture_default_str();
  sub->add_option("--hard-fraction", b.hard_fraction, "probability of a hard prompt")->capture_default_str();
  sub->add_option("--n", b.n, "number of sampled prompts")->capture_default_str();
}

struct HeatmapArgs {
  BanditArgs bandit;
  std::size_t subsample = 200;
  double easy_share = 0.6;
  std::string out = "passk-out/heatmap";
};

int run_heatmap(const HeatmapArgs& a, const CLI::App& sub) {
  using namespace passk::toy;
  if (a.subsample < 1) throw passk::DomainError("subsample must be >= 1");
  const PromptBatch batch = sample_prompts(a.bandit.config(), a.bandit.n);
  const auto n_easy = static_cast<std::size_t>(std::llround(a.easy_share * static_cast<double>(a.subsample)));
  const std::size_t n_hard = a.subsample - n_easy;
  PromptBatch easy;
  PromptBatch hard;
  for (const auto& x : batch) {
    if (x.label == Difficulty::easy && easy.size() < n_easy) easy.push_back(x);
    if (x.label == Difficulty::hard && hard.size() < n_hard) hard.push_back(x);
  }
  if (easy.size() < n_easy || hard.size() < n_hard)
    throw passk::DomainError("batch too small for the requested subsample");
  PromptBatch sub_batch = easy;
  sub_batch.insert(sub_batch.end(), hard.begin(), hard.end());

  const Theta theta = reference_theta();
  const auto table = gradient_table(sub_batch, theta);
  const passk::Matrix cos = passk::kernel_matrix(table, true);

  double blocks[2][2] = {{0, 0}, {0, 0}};
  double counts[2][2] = {{0, 0}, {0, 0}};
  for (std::size_t i = 0; i < sub_batch.size(); ++i)
    for (std::size_t j = 0; j < sub_batch.size(); ++j) {
      const int li = sub_batch[i].label == Difficulty::hard;
      const int lj = sub_batch[j].label == Difficulty::hard;
      blocks[li][lj] += cos(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      counts[li][lj] += 1.0;
    }
  auto mean = [&](int i, int j) { return counts[i][j] > 0 ? blocks[i][j] / counts[i][j] : 0.0; };
  std::cout << "cosine kernel " << sub_batch.size() << "x" << sub_batch.size() << " (" << easy.size() << " easy, "
            << hard.size() << " hard)\n";
  print_kv("mean easy-easy", mean(0, 0));
  print_kv("mean hard-hard", mean(1, 1));
  print_kv("mean easy-hard", mean(0, 1));

  const fs::path dir = prepare_out(a.out);
  passk::write_matrix_csv((dir / "heatmap.csv").string(), table.ids(), cos);
  write_batch_jsonl(sub_batch, (dir / "prompts.jsonl").string());
  write_json(dir / "summary.json", {{"rows", sub_batch.size()},
                                    {"easy", easy.size()},
                                    {"hard", hard.size()},
                                    {"mean_easy_easy", mean(0, 0)},
                                    {"mean_hard_hard", mean(1, 1)},
                                    {"mean_easy_hard", mean(0, 1)}});
  write_manifest(dir, sub, json::array(), {"heatmap.csv", "prompts.jsonl", "summary.json"});
  return 0;
}

// --- trajectory -------------------------------------------------------------

struct TrajectoryArgs {
  BanditArgs bandit;
  int k = 5;
  double eta = 1.0;
  int steps = 100;
  double margin = passk::kDefaultMargin;
  bool certified = false;
  std::string out = "passk-out/trajectory";
};

int run_trajectory_cmd(const TrajectoryArgs& a, const CLI::App& sub) {
  using namespace passk::toy;
  if (!a.certified && !(a.eta > 0.0)) throw passk::DomainError("step size eta must be > 0");
  const PromptBatch batch = sample_prompts(a.bandit.config(), a.bandit.n);
  StepOptions options;
  options.margin = a.margin;
  const auto records = a.certified ? run_certified_trajectory(batch, reference_theta(), a.k, a.steps, options)
                                   : run_trajectory(batch, reference_theta(), a.k, a.eta, a.steps, options);
  const fs::path dir = prepare_out(a.out);
  write_trajectory_csv((dir / "trajectory.csv").string(), records);
  write_manifest(dir, sub, json::array(), {"trajectory.csv"});
  const auto& first = records.front();
  const auto& last = records.back();
  std::cout << "pass@" << a.k << " ascent, " << records.size() - 1 << " steps\n";
  std::cout << "  J_1 pop: " << format_double(first.J1_pop) << " -> " << format_double(last.J1_pop) << '\n';
  std::cout << "  J_" << a.k << " pop: " << format_double(first.Jk_pop) << " -> " << format_double(last.Jk_pop) << '\n';
  return 0;
}

// --- kstar ------------------------------------------------------------------

struct KStarArgs {
  double eps = 0.05;
  double separation = 0.5;
  double q = 0.1;
  double margin = 0.01;
  double G2 = 1.0;
  int k_max = 0;
  std::string out;
};

int run_kstar(const KStarArgs& a, const CLI::App& sub) {
  const double ks = passk::k_star(a.eps, a.separation, a.q, a.margin, a.G2);
  int k_max = a.k_max;
  if (k_max <= 0) k_max = std::isfinite(ks) ? std::max(2, 2 * static_cast<int>(std::ceil(ks))) : 64;
  k_max = std::min(k_max, passk::kMaxK);
  std::cout << "k* = " << format_double(ks) << '\n';
  std::cout << "k,conflict_bound,sign\n";
  json rows = json::array();
  int changes = 0;
  int prev = 0;
  for (int k = 1; k <= k_max; ++k) {
    const double b = passk::conflict_bound(k, a.eps, a.separation, a.q, a.margin, a.G2);
    const int sign = b > 0.0 ? 1 : -1;
    if (k > 1 && sign != prev) ++changes;
    prev = sign;
    std::cout << k << ',' << format_double(b) << ',' << (sign > 0 ? "conflict" : "none") << '\n';
    rows.push_back({{"k", k}, {"conflict_bound", b}, {"conflict", sign > 0}});
  }
  std::cout << "sign changes: " << changes << '\n';
  if (!a.out.empty()) {
    const fs::path dir = prepare_out(a.out);
    write_json(dir / "kstar.json", {{"k_star", ks}, {"sweep", rows}, {"sign_changes", changes}});
    write_manifest(dir, sub, json::array(), {"kstar.json"});
  }
  return 0;
}

// --- diagnose ---------------------------------------------------------------

struct DiagnoseArgs {
  std::string input;
  int k = 32;
  double delta1 = 0.85;
  double delta2 = 0.10;
  double margin = passk::kDefaultMargin;
  double G2 = 0.0;
  double F = 0.0;
  std::string out = "passk-out/diagnose";
};

int run_diagnose(const DiagnoseArgs& a, const CLI::App& sub) {
  using namespace passk::diag;
  FilterSpec spec{a.delta1, a.delta2};
  spec.validate();
  const auto records = load_gradlog(a.input);
  const FilteredSet set = filter_by_difficulty(records, spec);
  DiagnoseOptions opts;
  opts.margin = a.margin;
  if (a.G2 > 0.0) opts.G2 = a.G2;
  if (a.F > 0.0) opts.F = a.F;
  const DiagReport report = diagnose(set, a.k, opts);

  const fs::path dir = prepare_out(a.out);
  write_json(dir / "report.json", to_json(report));
  scatter_export(set, a.k, (dir / "scatter.csv").string());
  write_rows_csv(report, (dir / "rows.csv").string());
  write_manifest(dir, sub, json::array({a.input}), {"report.json", "scatter.csv", "rows.csv"});

  std::cout << set.counts_line() << " (" << set.dropped << " dropped)\n";
  print_kv("unweighted mean agreement", report.unweighted_mean_agreement);
  print_kv("weighted mean agreement", report.weighted_mean_agreement);
  print_kv("mean shift", report.mean_shift);
  print_kv("<grad J_k, grad J_1>", report.inner_product);

  check_routes(report.conflict);
  const double rel = std::abs(report.inner_product - report.conflict.inner_product) /
                     std::max(report.conflict.scale, std::numeric_limits<double>::min());
  if (rel > kRouteTolerance)
    throw CheckFailure("diagnose and conflict_report disagree on the inner product");
  return 0;
}

// --- synth-log --------------------------------------------------------------

struct SynthArgs {
  passk::diag::SyntheticLogSpec spec;
  std::string out = "synthetic_conflict.jsonl";
};

int run_synth(const SynthArgs& a) {
  const auto records = passk::diag::make_synthetic_conflict_log(a.spec);
  const fs::path path(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  passk::diag::write_gradlog(records, a.out);
  std::cout << "wrote " << records.size() << " records (d=" << a.spec.dim << ") to " << a.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pass@k / pass@1 gradient conflict laboratory"};
  app.name("passk");
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  ToyDemoArgs toy;
  auto* toy_cmd = app.add_subcommand("toy-demo", "two-prompt trade-off computation");
  toy_cmd->add_option("--p-easy", toy.p_easy, "target success probability of the easy prompt")->capture_default_str();
  toy_cmd->add_option("--p-hard", toy.p_hard, "target success probability of the hard prompt")->capture_default_str();
  toy_cmd->add_option("--s-easy", toy.s_easy, "scalar feature of the easy prompt")->capture_default_str();
  toy_cmd->add_option("--s-hard", toy.s_hard, "scalar feature of the hard prompt")->capture_default_str();
  toy_cmd->add_option("--k", toy.k, "pass@k order")->check(CLI::Range(1, passk::kMaxK))->capture_default_str();
  toy_cmd->add_option("--eta", toy.eta, "ascent step size")->capture_default_str();
  toy_cmd->add_option("--margin", toy.margin, "interference margin m")->capture_default_str();
  toy_cmd->add_option("--out", toy.out, "output directory")->capture_default_str();

  HeatmapArgs heat;
  auto* heat_cmd = app.add_subcommand("heatmap", "cosine kernel matrix of per-prompt gradients");
  add_bandit_flags(heat_cmd, heat.bandit);
  heat_cmd->add_option("--subsample", heat.subsample, "rows of the output matrix")->capture_default_str();
  heat_cmd->add_option("--easy-share", heat.easy_share, "share of easy prompts in the subsample")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  heat_cmd->add_option("--out", heat.out, "output directory")->capture_default_str();

  TrajectoryArgs traj;
  auto* traj_cmd = app.add_subcommand("trajectory", "pass@k ascent trajectory");
  add_bandit_flags(traj_cmd, traj.bandit);
  traj_cmd->add_option("--k", traj.k, "pass@k order")->check(CLI::Range(1, passk::kMaxK))->capture_default_str();
  traj_cmd->add_option("--eta", traj.eta, "step size")->capture_default_str();
  traj_cmd->add_option("--steps", traj.steps, "number of ascent steps")->check(CLI::PositiveNumber)->capture_default_str();
  traj_cmd->add_option("--margin", traj.margin, "interference margin m")->capture_default_str();
  traj_cmd->add_flag("--certified", traj.certified, "use the certified step size while delta(theta) > 0");
  traj_cmd->add_option("--out", traj.out, "output directory")->capture_default_str();

  KStarArgs ks;
  auto* ks_cmd = app.add_subcommand("kstar", "conflict threshold in k");
  ks_cmd->add_option("--eps", ks.eps, "max success probability on the interfering set")->capture_default_str();
  ks_cmd->add_option("--separation", ks.separation, "min success probability elsewhere")->capture_default_str();
  ks_cmd->add_option("--q", ks.q, "mass of the interfering set")->capture_default_str();
  ks_cmd->add_option("--margin", ks.margin, "interference margin m")->capture_default_str();
  ks_cmd->add_option("--G2", ks.G2, "squared score bound G^2")->capture_default_str();
  ks_cmd->add_option("--k-max", ks.k_max, "last k of the sweep (default 2*ceil(k*))")->capture_default_str();
  ks_cmd->add_option("--out", ks.out, "optional output directory");

  DiagnoseArgs dg;
  auto* dg_cmd = app.add_subcommand("diagnose", "agreement analysis of a per-prompt gradient log");
  dg_cmd->add_option("--input", dg.input, "JSONL gradient log")->required();
  dg_cmd->add_option("--k", dg.k, "pass@k order")->check(CLI::Range(1, passk::kMaxK))->capture_default_str();
  dg_cmd->add_option("--delta1", dg.delta1, "easy threshold (pass1 > delta1)")->capture_default_str();
  dg_cmd->add_option("--delta2", dg.delta2, "hard threshold (pass1 < delta2)")->capture_default_str();
  dg_cmd->add_option("--margin", dg.margin, "interference margin m")->capture_default_str();
  dg_cmd->add_option("--G2", dg.G2, "override G^2 (default max ||grad||^2)");
  dg_cmd->add_option("--F", dg.F, "override F (default G^2)");
  dg_cmd->add_option("--out", dg.out, "output directory")->capture_default_str();

  SynthArgs syn;
  auto* syn_cmd = app.add_subcommand("synth-log", "write a synthetic conflict gradient log");
  syn_cmd->add_option("--seed", syn.spec.seed, "RNG seed")->envname("PASSK_SEED")->capture_default_str();
  syn_cmd->add_option("--easy", syn.spec.easy, "easy records")->capture_default_str();
  syn_cmd->add_option("--hard", syn.spec.hard, "hard records")->capture_default_str();
  syn_cmd->add_option("--middle", syn.spec.middle, "middle-band records")->capture_default_str();
  syn_cmd->add_option("--dim", syn.spec.dim, "gradient dimension")->capture_default_str();
  syn_cmd->add_option("--noise", syn.spec.noise, "isotropic noise scale")->capture_default_str();
  syn_cmd->add_option("--out", syn.out, "output file")->capture_default_str();

  std::string config_path;
  for (auto* sub : {toy_cmd, heat_cmd, traj_cmd, ks_cmd, dg_cmd, syn_cmd})
    sub->add_option("--config", config_path, "flat key=value file mirroring flag names");

  std::vector<std::string> args(argv + 1, argv + argc);
  std::reverse(args.begin(), args.end());  // CLI11 consumes a reversed vector
  try {
    app.parse(args);
    // Second pass: flags the user did not give are filled from the config file.
    if (!config_path.empty()) {
      CLI::App* sub = app.get_subcommands().front();
      std::vector<std::string> extra;
      for (const auto& [key, value] : read_flat_config(config_path)) {
        const CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (opt == nullptr || key == "config")
          throw CLI::ValidationError("--config", "unknown key '" + key + "' in " + config_path);
        if (opt->count() > 0) continue;
        if (opt->get_type_size() == 0) {
          if (value == "true" || value == "1") extra.push_back("--" + key);
        } else {
          extra.push_back("--" + key + "=" + value);
        }
      }
      if (!extra.empty()) {
        std::vector<std::string> merged(argv + 1, argv + argc);
        merged.insert(merged.end(), extra.begin(), extra.end());
        std::reverse(merged.begin(), merged.end());
        app.clear();
        app.parse(merged);
      }
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "passk: error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*toy_cmd) return run_toy_demo(toy, *toy_cmd);
    if (*heat_cmd) return run_heatmap(heat, *heat_cmd);
    if (*traj_cmd) return run_trajectory_cmd(traj, *traj_cmd);
    if (*ks_cmd) return run_kstar(ks, *ks_cmd);
    if (*dg_cmd) return run_diagnose(dg, *dg_cmd);
    if (*syn_cmd) return run_synth(syn);
  } catch (const CheckFailure& e) {
    std::cerr << "passk: identity check failed: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "passk: error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
