#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "passk/interference.hpp"
#include "passk/toy_population.hpp"
#include "support.hpp"

using Catch::Approx;
using namespace passk;
using namespace passk::toy;

TEST_CASE("GradientTable validation", "[interference]") {
  Matrix g(2, 3);
  g << 1, 2, 3, 4, 5, 6;
  CHECK_NOTHROW(GradientTable({"a", "b"}, g, {0.25, 0.75}));
  CHECK_THROWS_AS(GradientTable({"a"}, g, {0.25, 0.75}), ShapeError);
  CHECK_THROWS_AS(GradientTable({"a", "b"}, g, {0.5, 0.6}), DomainError);
  g(1, 1) = NAN;
  CHECK_THROWS_AS(GradientTable({"a", "b"}, g, {0.5, 0.5}), DomainError);
}

TEST_CASE("mean gradient is the mass-weighted row sum", "[interference]") {
  Rng rng(1);
  const auto inst = testing::random_instance(rng, 30, 5);
  Vector expect = Vector::Zero(5);
  for (std::size_t i = 0; i < 30; ++i) expect += inst.table.mass()[i] * inst.table.row(i);
  CHECK((inst.table.mean_grad() - expect).norm() <= 1e-12);
}

TEST_CASE("kernel and cosine", "[interference]") {
  Vector g(3);
  g << 1.0, -2.0, 0.5;
  CHECK(kernel(g, g) == Approx(g.squaredNorm()).epsilon(1e-15));
  CHECK(cosine(g, g) == Approx(1.0).epsilon(1e-15));
  CHECK(cosine(g, Vector::Zero(3)) == 0.0);
  CHECK_THROWS_AS(kernel(g, Vector::Zero(2)), ShapeError);
}

TEST_CASE("two-point kernel", "[interference][golden]") {
  const TwoPointSetup s;
  const Theta t = s.reference_theta();
  const Vec2 ge = grad_success_prob(t, s.easy);
  const Vec2 gh = grad_success_prob(t, s.hard);
  const double kappa = kernel(ge, gh);
  CHECK(kappa == Approx(-0.01).margin(0.005));
  const double closed = -curvature(t, s.easy) * curvature(t, s.hard) * s.easy.features.dot(s.hard.features);
  CHECK(std::abs(kappa - closed) <= 1e-12);
  CHECK(kappa == Approx(-0.14 * 0.86 * 0.1 * 0.9 * 0.99).epsilon(1e-10));
  CHECK(cosine(s.easy.features, s.hard.features) == Approx(0.98).margin(0.005));
  CHECK(cosine(ge, gh) == Approx(-0.98).margin(0.01));
}

TEST_CASE("kernel_matrix", "[interference]") {
  Rng rng(2);
  auto inst = testing::random_instance(rng, 25, 4);
  const Matrix k = kernel_matrix(inst.table, false);
  const Matrix c = kernel_matrix(inst.table, true);
  REQUIRE(k.rows() == 25);
  CHECK((k - k.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((c - c.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
  for (Eigen::Index i = 0; i < 25; ++i) CHECK(c(i, i) == Approx(1.0).epsilon(1e-14));
  CHECK(c.cwiseAbs().maxCoeff() <= 1.0 + 1e-14);

  Matrix g(2, 2);
  g << 0.0, 0.0, 1.0, 1.0;
  const GradientTable z = GradientTable::uniform({"zero", "one"}, g);
  const Matrix cz = kernel_matrix(z, true);
  CHECK(cz(0, 0) == 0.0);
  CHECK(cz(0, 1) == 0.0);
  CHECK(cz(1, 1) == Approx(1.0));
}

TEST_CASE("toy heatmap sign pattern", "[interference]") {
  const auto batch = sample_prompts(BanditConfig{}, 6000);
  PromptBatch sub;
  std::size_t easy = 0;
  std::size_t hard = 0;
  for (const auto& x : batch) {
    if (x.label == Difficulty::easy && easy < 120) {
      sub.push_back(x);
      ++easy;
    } else if (x.label == Difficulty::hard && hard < 80) {
      sub.push_back(x);
      ++hard;
    }
  }
  REQUIRE(sub.size() == 200);
  const Matrix c = kernel_matrix(gradient_table(sub, TwoPointSetup{}.reference_theta()), true);
  std::size_t same_pos = 0, same = 0, cross_neg = 0, cross = 0;
  for (std::size_t i = 0; i < sub.size(); ++i)
    for (std::size_t j = 0; j < sub.size(); ++j) {
      const double v = c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      const bool psi_pos = sub[i].features.dot(sub[j].features) > 0;
      if (sub[i].label == sub[j].label) {
        ++same;
        same_pos += v > 0;
        if (psi_pos) REQUIRE(v > 0);
      } else {
        ++cross;
        cross_neg += v < 0;
        if (psi_pos) REQUIRE(v < 0);
      }
    }
  CHECK(static_cast<double>(same_pos) / same > 0.5);
  CHECK(static_cast<double>(cross_neg) / cross > 0.5);
}

TEST_CASE("agreement scores", "[interference]") {
  SECTION("single prompt") {
    Matrix g(1, 3);
    g << 1.0, 2.0, -2.0;
    const auto t = GradientTable::uniform({"a"}, g);
    CHECK(agreement_scores(t)[0] == Approx(9.0).epsilon(1e-15));
  }
  SECTION("two-point table, both routes") {
    const TwoPointSetup s;
    const auto t = gradient_table(s.batch(), s.reference_theta());
    const Vector a = agreement_scores(t);
    const Vector b = agreement_scores_via_kernel(t);
    CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SECTION("mean agreement equals the squared norm of the mean gradient") {
    Rng rng(3);
    for (int r = 0; r < 100; ++r) {
      const auto inst = testing::random_instance(rng, 1 + static_cast<std::size_t>(rng.uniform() * 60), 6);
      const Vector a = agreement_scores(inst.table);
      double m = 0.0;
      for (std::size_t i = 0; i < inst.table.size(); ++i) m += inst.table.mass()[i] * a[static_cast<Eigen::Index>(i)];
      const double n2 = inst.table.mean_grad().squaredNorm();
      REQUIRE(std::abs(m - n2) <= 1e-10 * std::max(n2, 1e-300) + 1e-15);
    }
  }
}

TEST_CASE("hard prompts in the overlap region have negative agreement", "[interference]") {
  const auto batch = sample_prompts(BanditConfig{}, 6000);
  const auto t = gradient_table(batch, TwoPointSetup{}.reference_theta());
  const Vector a = agreement_scores(t);
  std::size_t neg = 0;
  std::size_t overlap = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].label != Difficulty::hard || std::abs(batch[i].features[1]) > 0.5) continue;
    ++overlap;
    neg += a[static_cast<Eigen::Index>(i)] < 0;
  }
  REQUIRE(overlap > 100);
  CHECK(neg == overlap);
}

TEST_CASE("agreement bound |a| <= G ||grad J_1|| <= G^2", "[interference][property]") {
  const auto batch = sample_prompts(BanditConfig{}, 500);
  Rng rng(8);
  for (int r = 0; r < 20; ++r) {
    const Theta th{2 * rng.normal(), 2 * rng.normal()};
    const auto t = gradient_table(batch, th);
    const double G2 = assumption_constants_uniform(batch).G2;
    const Vector a = agreement_scores(t);
    const double gnorm = t.mean_grad().norm();
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      REQUIRE(std::abs(a[i]) <= std::sqrt(G2) * gnorm * (1 + 1e-12));
      REQUIRE(std::abs(a[i]) <= G2);
    }
  }
}

TEST_CASE("classify_interference", "[interference]") {
  SECTION("all scores positive") {
    Matrix g(3, 2);
    g << 1, 0, 0.5, 0.1, 0.8, -0.1;
    const auto t = GradientTable::uniform(testing::make_ids(3), g);
    const auto prof = SuccessProfile::uniform({0.2, 0.5, 0.9}, testing::make_ids(3));
    const auto a = classify_interference(t, prof, 1e-6, 4);
    CHECK(a.neg_set.empty());
    CHECK(a.q == 0.0);
    CHECK(a.w_minus == 0.0);
    CHECK(a.w_plus == Approx(mean_weight(prof, 4)).epsilon(1e-12));
  }
  SECTION("two-point table, m=0.001, k=10") {
    const TwoPointSetup s;
    const Theta th = s.reference_theta();
    const auto t = gradient_table(s.batch(), th);
    const auto prof = success_profile(s.batch(), th);
    const auto a = classify_interference(t, prof, 0.001, 10);
    const double we = wk(0.86, 10);
    const double wh = wk(0.10, 10);
    REQUIRE(a.neg_set.size() == 1);
    // grad J_1 points along the easy gradient, so the hard prompt interferes.
    CHECK(t.ids()[a.neg_set[0]] == "x_h");
    CHECK(a.q == 0.5);
    CHECK(a.w_minus + a.w_plus == Approx(0.5 * (we + wh)).epsilon(1e-12));
  }
  SECTION("margin above every |score|") {
    Rng rng(4);
    const auto inst = testing::random_instance(rng, 10, 3);
    const Vector s = agreement_scores(inst.table);
    const auto a = classify_interference(inst.table, inst.profile, s.cwiseAbs().maxCoeff() * 2, 3);
    CHECK(a.neg_set.empty());
  }
  SECTION("invalid margin and misaligned inputs") {
    Rng rng(5);
    const auto inst = testing::random_instance(rng, 4, 2);
    CHECK_THROWS_AS(classify_interference(inst.table, inst.profile, 0.0, 3), DomainError);
    const auto other = SuccessProfile::uniform({0.1, 0.2, 0.3, 0.4});
    CHECK_THROWS_AS(classify_interference(inst.table, other, 1e-6, 3), ShapeError);
  }
}

TEST_CASE("classification invariants", "[interference][property]") {
  Rng rng(6);
  for (int r = 0; r < 100; ++r) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 40);
    const auto inst = testing::random_instance(rng, n, 4);
    const int k = 1 + static_cast<int>(rng.uniform() * 20);
    const double m = 0.05 * rng.uniform() + 1e-9;
    const auto a = classify_interference(inst.table, inst.profile, m, k);
    // neg_set is exactly the thresholded set; W- + W+ = E[w].
    for (std::size_t i = 0; i < n; ++i) {
      const bool in = std::find(a.neg_set.begin(), a.neg_set.end(), i) != a.neg_set.end();
      REQUIRE(in == (a.scores[static_cast<Eigen::Index>(i)] <= -m));
    }
    REQUIRE(std::abs(a.w_minus + a.w_plus - mean_weight(inst.profile, k)) <= 1e-12 * k);

    // Permuting prompts leaves the set (by id) and the aggregates unchanged.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::vector<std::string> ids;
    std::vector<double> mass, probs;
    Matrix g(static_cast<Eigen::Index>(n), 4);
    for (std::size_t i = 0; i < n; ++i) {
      ids.push_back(inst.table.ids()[perm[i]]);
      mass.push_back(inst.table.mass()[perm[i]]);
      probs.push_back(inst.profile.probs()[perm[i]]);
      g.row(static_cast<Eigen::Index>(i)) = inst.table.grads().row(static_cast<Eigen::Index>(perm[i]));
    }
    const auto b = classify_interference(GradientTable(ids, g, mass), SuccessProfile(probs, mass, ids), m, k);
    std::vector<std::string> sa, sb;
    for (auto i : a.neg_set) sa.push_back(inst.table.ids()[i]);
    for (auto i : b.neg_set) sb.push_back(ids[i]);
    std::sort(sa.begin(), sa.end());
    std::sort(sb.begin(), sb.end());
    REQUIRE(sa == sb);
    REQUIRE(b.q == Approx(a.q).epsilon(1e-12).margin(1e-15));
    REQUIRE(b.w_minus == Approx(a.w_minus).epsilon(1e-12).margin(1e-15));
    REQUIRE(b.w_plus == Approx(a.w_plus).epsilon(1e-12).margin(1e-15));
  }
}

TEST_CASE("CSV export", "[interference][io]") {
  const auto dir = testing::scratch_dir("interference-io");
  Matrix m(2, 2);
  m << 1.0, 0.1, 0.1, 1.0 / 3.0;
  write_matrix_csv((dir / "m.csv").string(), {"a", "b"}, m);
  std::ifstream in(dir / "m.csv");
  std::string header, row1, row2;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  CHECK(header == "id,a,b");
  CHECK(row1 == "a,1,0.10000000000000001");
  CHECK(row2 == "b,0.10000000000000001,0.33333333333333331");
}
