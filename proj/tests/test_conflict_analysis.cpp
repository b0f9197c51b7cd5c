#include <catch_amalgamated.hpp>

#include <cmath>

#include "passk/conflict_analysis.hpp"
#include "passk/optimizer.hpp"
#include "passk/toy_population.hpp"
#include "support.hpp"

using Catch::Approx;
using namespace passk;

namespace {

AssumptionConstants unit_constants() { return {1.0, 1.0}; }

}  // namespace

TEST_CASE("k=1 report", "[conflict]") {
  Rng rng(1);
  const auto inst = testing::random_instance(rng, 20, 5);
  const auto r = conflict_report(inst.table, inst.profile, 1, kDefaultMargin, unit_constants());
  CHECK(r.inner_product == Approx(inst.table.mean_grad().squaredNorm()).epsilon(1e-12));
  CHECK(r.inner_product >= 0.0);
  CHECK(std::abs(r.covariance) <= 1e-15);
  CHECK(r.mean_weight == Approx(1.0).epsilon(1e-15));
  CHECK_FALSE(r.correlation.has_value());
  CHECK(r.routes_agree());
}

TEST_CASE("two-point report at k=10", "[conflict][golden]") {
  using namespace passk::toy;
  const TwoPointSetup s;
  const Theta th = s.reference_theta();
  const auto batch = s.batch();
  const auto r = conflict_report_at(batch, th, 10, 0.001, assumption_constants_uniform(batch));
  CHECK(r.cosine == Approx(-0.77).margin(0.05));
  CHECK(r.cosine == Approx(-0.76156199104813371).epsilon(1e-10));
  CHECK(r.routes_agree());
  CHECK(r.conflict_direct());
  // delta > 0 certifies inner <= -delta.
  CHECK(r.delta_bound > 0.0);
  CHECK(r.inner_product <= -r.delta_bound);
  REQUIRE(r.eta_max.has_value());
  CHECK(*r.eta_max * r.smoothness.C2 <= r.delta_bound * (1 + 1e-15));
  CHECK(*r.eta_max * r.smoothness.Lk <= 1.0 + 1e-15);
}

TEST_CASE("three routes agree on random tables", "[conflict][property]") {
  Rng rng(2, "routes");
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 100);
    const auto d = 1 + static_cast<Eigen::Index>(rng.uniform() * 16);
    const auto inst = testing::random_instance(rng, n, d);
    const int k = 1 + static_cast<int>(rng.uniform() * 64);
    const auto r = conflict_report(inst.table, inst.profile, k, kDefaultMargin, unit_constants());
    INFO("n=" << n << " d=" << d << " k=" << k);
    REQUIRE(r.routes_agree(1e-10));
    const bool c = r.conflict_direct();
    REQUIRE(r.conflict_weighted() == c);
    REQUIRE(r.conflict_covariance() == c);
    REQUIRE(r.conflict_reweighted() == c);
    if (auto cc = r.conflict_correlation()) REQUIRE(*cc == c);
    REQUIRE(std::abs(r.reweighted_mean_agreement * r.mean_weight - r.inner_product) <= 1e-10 * r.scale);
  }
}

TEST_CASE("50-prompt d=8 table", "[conflict]") {
  Rng rng(50);
  const auto inst = testing::random_instance(rng, 50, 8);
  const auto r = conflict_report(inst.table, inst.profile, 7, kDefaultMargin, unit_constants());
  CHECK(std::abs(r.weighted_form - r.cov_form) <= 1e-10 * r.scale);
  CHECK(std::abs(r.inner_product - r.weighted_form) <= 1e-10 * r.scale);
}

TEST_CASE("misaligned inputs are rejected", "[conflict]") {
  Rng rng(3);
  const auto inst = testing::random_instance(rng, 5, 2);
  const auto other = SuccessProfile::uniform({0.1, 0.2, 0.3, 0.4, 0.5});
  CHECK_THROWS_AS(conflict_report(inst.table, other, 3, kDefaultMargin, unit_constants()), ShapeError);
}

TEST_CASE("reweighted distribution", "[conflict]") {
  SECTION("uniform p leaves mass unchanged") {
    const SuccessProfile prof({0.3, 0.3, 0.3}, {0.2, 0.3, 0.5});
    const auto d = reweighted_distribution(prof, 6);
    CHECK(d[0] == Approx(0.2));
    CHECK(d[1] == Approx(0.3));
    CHECK(d[2] == Approx(0.5));
  }
  SECTION("k=1 is the identity") {
    const SuccessProfile prof({0.1, 0.9}, {0.25, 0.75});
    const auto d = reweighted_distribution(prof, 1);
    CHECK(d[0] == Approx(0.25).epsilon(1e-15));
    CHECK(d[1] == Approx(0.75).epsilon(1e-15));
  }
  SECTION("two-point pair at k=10") {
    const auto prof = SuccessProfile::uniform({0.86, 0.10});
    const auto d = reweighted_distribution(prof, 10);
    const double we = wk(0.86, 10);
    const double wh = wk(0.10, 10);
    CHECK(d[1] == Approx(wh / (we + wh)).epsilon(1e-14));
    CHECK(1.0 - d[1] == Approx(6e-8).margin(1e-8));
    CHECK(d[0] + d[1] == Approx(1.0).epsilon(1e-15));
  }
  SECTION("all weights zero") {
    const auto prof = SuccessProfile::uniform({1.0, 1.0});
    CHECK_THROWS_AS(reweighted_distribution(prof, 3), DomainError);
  }
}

TEST_CASE("delta_bound", "[conflict]") {
  SECTION("empty negative set gives no certificate") {
    AgreementProfile a;
    a.margin = 0.1;
    a.w_minus = 0.0;
    a.w_plus = 2.0;
    CHECK(delta_bound(a, 0.5) == -1.0);
  }
  SECTION("all weight on the negative set") {
    // Prompts 0,1 pull against prompts 2..5; the interfering ones have p=0,
    // the rest p=1, so every pass@k weight sits on the negative set.
    Matrix g(6, 2);
    g << -1, 0, -1, 0.2, 1, 0, 1, 0.1, 1, -0.1, 1, 0;
    const auto ids = testing::make_ids(6);
    const auto t = GradientTable::uniform(ids, g);
    const auto prof = SuccessProfile::uniform({0, 0, 1, 1, 1, 1}, ids);
    const double m = 0.1;
    const auto r = conflict_report(t, prof, 5, m, {2.0, 2.0});
    CHECK(r.q == Approx(2.0 / 6));
    CHECK(r.w_plus == 0.0);
    CHECK(r.delta_bound > 0.0);
    CHECK(r.inner_product <= -r.delta_bound);
  }
}

TEST_CASE("k_star", "[conflict]") {
  CHECK(k_star(0.0, 0.5, 0.5, 0.3, 0.3) == 1.0);
  CHECK(k_star(0.05, 0.5, 0.1, 0.01, 1.0) == Approx(1 + std::log(900.0) / std::log(0.95 / 0.5)).epsilon(1e-14));
  CHECK(k_star(0.4999999, 0.5, 0.1, 0.01, 1.0) > 1e6);
  CHECK_THROWS_AS(k_star(0.5, 0.5, 0.1, 0.01, 1.0), DomainError);
  CHECK_THROWS_AS(k_star(0.6, 0.5, 0.1, 0.01, 1.0), DomainError);
  CHECK_THROWS_AS(k_star(0.05, 0.5, 0.0, 0.01, 1.0), DomainError);
  CHECK_THROWS_AS(k_star(0.05, 0.5, 1.0, 0.01, 1.0), DomainError);
  CHECK_THROWS_AS(k_star(0.05, 0.5, 0.5, 0.0, 1.0), DomainError);
}

TEST_CASE("conflict_bound flips sign exactly past k*", "[conflict]") {
  const double eps = 0.05, sep = 0.5, q = 0.1, m = 0.01, G2 = 1.0;
  const double ks = k_star(eps, sep, q, m, G2);
  const int last = 2 * static_cast<int>(std::ceil(ks));
  for (int k = 2; k <= last; ++k) {
    INFO("k=" << k << " k*=" << ks);
    CHECK((conflict_bound(k, eps, sep, q, m, G2) > 0.0) == (k > ks));
  }
}

TEST_CASE("smoothness constants", "[conflict]") {
  auto s = smoothness_constants(1.0, 1.0, 3);
  CHECK(s.Lk == 12.0);
  CHECK(s.C2 == 9.0);
  s = smoothness_constants(0.7, 0.2, 1);
  CHECK(s.L1 == Approx(0.9));
  CHECK(s.Lk == Approx(0.9));
  double prev = 0.0;
  for (int k = 1; k < 50; ++k) {
    const double lk = smoothness_constants(0.3, 0.4, k).Lk;
    CHECK(lk > prev);
    prev = lk;
  }
  CHECK_THROWS_AS(smoothness_constants(0.0, 1.0, 2), DomainError);
}

TEST_CASE("max_safe_step", "[conflict]") {
  CHECK(max_safe_step(4.0, 4.0, 2.0) == 0.5);
  CHECK(max_safe_step(4.0, 4.0, 0.5) == 1.0);
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const double d = rng.uniform() + 1e-6, c2 = rng.uniform() * 10 + 1e-6, lk = rng.uniform() * 10 + 1e-6;
    const double eta = max_safe_step(d, c2, lk);
    CHECK(eta * c2 <= d * (1 + 1e-15));
    CHECK(eta * lk <= 1.0 + 1e-15);
  }
  CHECK_THROWS_AS(max_safe_step(0.0, 1.0, 1.0), DomainError);
  CHECK_THROWS_AS(max_safe_step(-1.0, 1.0, 1.0), DomainError);
}

TEST_CASE("inner_product_k_m", "[conflict]") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const auto inst = testing::random_instance(rng, 2 + static_cast<std::size_t>(rng.uniform() * 40), 6);
    const int k = 1 + static_cast<int>(rng.uniform() * 20);
    const int m = 1 + static_cast<int>(rng.uniform() * 20);
    const auto r = inner_product_k_m(inst.table, inst.profile, k, m);
    const double scale = std::sqrt(inner_product_k_m(inst.table, inst.profile, k, k).direct *
                                   inner_product_k_m(inst.table, inst.profile, m, m).direct);
    REQUIRE(std::abs(r.double_sum - r.direct) <= 1e-9 * std::max(scale, 1e-300));
    const auto same = inner_product_k_m(inst.table, inst.profile, k, k);
    REQUIRE(same.direct >= 0.0);
    REQUIRE(same.direct == Approx(passk_gradient(inst.table, inst.profile, k).squaredNorm()).epsilon(1e-12));
  }
  // Nonnegative kernel (all gradients in the positive orthant) => nonnegative product.
  for (int t = 0; t < 50; ++t) {
    Matrix g(10, 3);
    for (Eigen::Index i = 0; i < 10; ++i)
      for (Eigen::Index j = 0; j < 3; ++j) g(i, j) = rng.uniform();
    std::vector<double> p(10);
    for (auto& v : p) v = rng.uniform();
    const auto ids = testing::make_ids(10);
    const auto r = inner_product_k_m(GradientTable::uniform(ids, g), SuccessProfile::uniform(p, ids),
                                     1 + static_cast<int>(rng.uniform() * 30), 1 + static_cast<int>(rng.uniform() * 30));
    REQUIRE(r.double_sum >= 0.0);
    REQUIRE(r.direct >= 0.0);
  }
}

TEST_CASE("smoothness certificate on the toy bandit", "[conflict][property]") {
  using namespace passk::toy;
  const auto batch = sample_prompts(BanditConfig{}, 300);
  const auto c = assumption_constants_uniform(batch);
  Rng rng(6, "smooth");
  for (int t = 0; t < 100; ++t) {
    const Theta a{2 * rng.normal(), 2 * rng.normal()};
    const Theta b = a + Theta{rng.normal(), rng.normal()};
    const int k = 1 + static_cast<int>(rng.uniform() * 10);
    const double lk = smoothness_constants(c.G2, c.F, k).Lk;
    const double lhs = std::abs(objective(batch, b, k) - objective(batch, a, k) -
                                objective_gradient(batch, a, k).dot(b - a));
    REQUIRE(lhs <= 0.5 * lk * (b - a).squaredNorm());
  }
}

TEST_CASE("degradation certificate on the two-point batch", "[conflict]") {
  using namespace passk::toy;
  const TwoPointSetup s;
  const auto batch = s.batch();
  const Theta th = s.reference_theta();
  for (int k : {5, 10}) {
    const auto r = conflict_report_at(batch, th, k, 0.001, assumption_constants_uniform(batch));
    REQUIRE(r.delta_bound > 0.0);
    const double eta = max_safe_step(r.delta_bound, r.smoothness.C2, r.smoothness.Lk);
    const auto [next, rec] = ascent_step(th, batch, k, eta);
    const double j1 = objective(batch, th, 1);
    const double jk = objective(batch, th, k);
    CHECK(rec.J1_pop < j1);
    CHECK(rec.J1_pop < j1 - eta * r.delta_bound + r.smoothness.C2 * eta * eta);
    CHECK(rec.Jk_pop >= jk + 0.5 * eta * r.gradk_norm_sq);
  }
}

TEST_CASE("report JSON carries every route", "[conflict]") {
  Rng rng(7);
  const auto inst = testing::random_instance(rng, 8, 3);
  const auto r = conflict_report(inst.table, inst.profile, 4, kDefaultMargin, unit_constants());
  const auto j = to_json(r);
  CHECK(j.at("routes").at("direct").get<double>() == r.inner_product);
  CHECK(j.at("routes").at("weighted_agreement").get<double>() == r.weighted_form);
  CHECK(j.at("routes").at("covariance_decomposition").get<double>() == r.cov_form);
  CHECK(j.contains("delta_bound"));
  CHECK(j.contains("Lk"));
}
