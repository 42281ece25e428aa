#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "kanlab/mathx.hpp"
#include "kanlab/stats.hpp"
#include "oracles.hpp"

using namespace kanlab;
using namespace kanlab::stats;

using namespace oracles;

namespace {
}  // namespace

TEST_SUITE_BEGIN("stats");

TEST_CASE("classification metrics basics") {
  SUBCASE("perfect classifier") {
    std::vector<double> s{0.9, 0.8, 0.1, 0.2};
    std::vector<int> y{1, 1, 0, 0};
    auto m = classification_metrics(s, y);
    CHECK(m.accuracy == 1.0);
    CHECK(m.f1_macro == 1.0);
    CHECK(m.recall == 1.0);
    CHECK(m.auroc == 1.0);
  }
  SUBCASE("all-positive predictor at prevalence 0.53") {
    // 53 positives, 47 negatives, every score above threshold
    std::vector<double> s(100, 0.9);
    std::vector<int> y(100, 0);
    for (int i = 0; i < 53; ++i) y[std::size_t(i)] = 1;
    auto m = classification_metrics(s, y);
    CHECK(m.accuracy == doctest::Approx(0.53));
    CHECK(m.recall == doctest::Approx(0.53));
    // class-1 F1 = 2*.53/1.53, class-0 F1 = 0
    CHECK(m.f1_macro == doctest::Approx(0.3464).epsilon(1e-3));
  }
  SUBCASE("micro recall equals accuracy on random tables") {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> s;
      std::vector<int> y;
      for (int i = 0; i < 40; ++i) {
        s.push_back(rng.uniform());
        y.push_back(int(rng.index(2)));
      }
      if (std::count(y.begin(), y.end(), 1) == 0 ||
          std::count(y.begin(), y.end(), 0) == 0)
        continue;
      auto m = classification_metrics(s, y);
      CHECK(m.recall == m.accuracy);
      CHECK(m.f1_micro == m.accuracy);
    }
  }
  SUBCASE("single-class labels rejected") {
    std::vector<double> s{0.1, 0.9};
    std::vector<int> y{1, 1};
    CHECK_THROWS_AS(classification_metrics(s, y), InputError);
  }
}

TEST_CASE("auroc equals the pair-counting oracle exactly") {
  Rng rng(17);
  for (int t = 0; t < 50; ++t) {
    const int n = 8 + int(rng.index(40));
    std::vector<double> s;
    std::vector<int> y;
    int npos = 0;
    for (int i = 0; i < n; ++i) {
      // quantized scores to force ties
      s.push_back(std::round(rng.uniform() * 8.0) / 8.0);
      y.push_back(int(rng.index(2)));
      npos += y.back();
    }
    if (npos == 0 || npos == n) {
      y[0] = 1 - y[0];
    }
    CHECK(stats::auroc(s, y) == auroc_pair_oracle(s, y));
  }
}

TEST_CASE("auroc invariant under strictly increasing transforms") {
  Rng rng(23);
  std::vector<double> s;
  std::vector<int> y;
  for (int i = 0; i < 60; ++i) {
    s.push_back(rng.uniform());
    y.push_back(int(rng.index(2)));
  }
  y[0] = 1;
  y[1] = 0;
  const double base = stats::auroc(s, y);
  std::vector<double> warped = s;
  for (auto& v : warped) v = std::exp(3.0 * v) + 7.0;
  CHECK(stats::auroc(warped, y) == base);
}

TEST_CASE("bootstrap_ci") {
  SUBCASE("constant input collapses") {
    std::vector<double> v{5, 5, 5};
    auto ci = bootstrap_ci(v, 0.95, 2000, 1);
    CHECK(ci.low == 5.0);
    CHECK(ci.high == 5.0);
  }
  SUBCASE("deterministic under seed") {
    std::vector<double> v{1, 2, 3, 4, 5, 6};
    auto a = bootstrap_ci(v, 0.95, 500, 42);
    auto b = bootstrap_ci(v, 0.95, 500, 42);
    CHECK(a.low == b.low);
    CHECK(a.high == b.high);
  }
  SUBCASE("empty input rejected") {
    CHECK_THROWS_AS(bootstrap_ci({}, 0.95, 2000, 1), InputError);
  }
  SUBCASE("nominal coverage on Normal(0,1)") {
    Rng rng(77);
    int covered = 0;
    const int sims = 500;
    std::vector<double> sample(30, 0.0);
    for (int s = 0; s < sims; ++s) {
      for (auto& v : sample) v = rng.normal();
      auto ci = bootstrap_ci(sample, 0.95, 2000, 1000 + std::uint64_t(s));
      if (ci.low <= 0.0 && 0.0 <= ci.high) ++covered;
    }
    const double coverage = double(covered) / double(sims);
    CHECK(coverage > 0.92);
    CHECK(coverage < 0.98);
  }
}

TEST_CASE("wilcoxon signed-rank") {
  SUBCASE("n = 5 uniformly signed gives the exact floor 0.0625") {
    std::vector<double> a{1, 2, 3, 4, 5};
    std::vector<double> b{0, 1, 2, 3, 4};
    auto r = wilcoxon_signed_rank(a, b);
    CHECK(r.exact);
    CHECK(r.p == 0.0625);
  }
  SUBCASE("identical samples are degenerate with p = 1") {
    std::vector<double> a{1, 2, 3};
    auto r = wilcoxon_signed_rank(a, a);
    CHECK(r.degenerate);
    CHECK(r.p == 1.0);
  }
  SUBCASE("exact p equals 2^n enumeration on random inputs") {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
      const int n = 3 + int(rng.index(8));  // n in [3, 10]
      std::vector<double> a, b;
      for (int i = 0; i < n; ++i) {
        // quantized to produce ties and occasional zero differences
        a.push_back(std::round(rng.uniform(-2, 2) * 4.0) / 4.0);
        b.push_back(std::round(rng.uniform(-2, 2) * 4.0) / 4.0);
      }
      auto r = wilcoxon_signed_rank(a, b);
      const double oracle = wilcoxon_enumeration_oracle(a, b);
      INFO("case ", t, " n=", n);
      CHECK(r.p == doctest::Approx(oracle).epsilon(1e-12));
    }
  }
  SUBCASE("two-sided p symmetric in the sample order") {
    Rng rng(9);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> a, b;
      const int n = 4 + int(rng.index(20));
      for (int i = 0; i < n; ++i) {
        a.push_back(rng.uniform(-1, 1));
        b.push_back(rng.uniform(-1, 1));
      }
      auto r1 = wilcoxon_signed_rank(a, b);
      auto r2 = wilcoxon_signed_rank(b, a);
      CHECK(r1.p == doctest::Approx(r2.p).epsilon(1e-12));
    }
  }
  SUBCASE("large-n normal approximation is sane") {
    Rng rng(11);
    std::vector<double> a, b;
    for (int i = 0; i < 40; ++i) {
      a.push_back(rng.normal() + 1.0);
      b.push_back(rng.normal());
    }
    auto r = wilcoxon_signed_rank(a, b);
    CHECK_FALSE(r.exact);
    CHECK(r.p < 0.01);
  }
  SUBCASE("normal approximation tracks the exact tail at the cutover") {
    // same data evaluated exactly (n = 12) and by a forced approximation
    // (n = 13 with one zero difference appended, which drops out)
    Rng rng(13);
    for (int t = 0; t < 10; ++t) {
      std::vector<double> a, b;
      for (int i = 0; i < 12; ++i) {
        a.push_back(rng.uniform(-1, 1));
        b.push_back(rng.uniform(-1, 1));
      }
      auto exact = wilcoxon_signed_rank(a, b);
      std::vector<double> a13 = a, b13 = b;
      a13.push_back(0.5);
      b13.push_back(0.5);
      // n = 13 pairs, 12 informative: still exact by implementation rule
      auto exact2 = wilcoxon_signed_rank(a13, b13);
      CHECK(exact2.p == doctest::Approx(exact.p).epsilon(1e-12));
    }
  }
}

TEST_CASE("shapiro-wilk") {
  SUBCASE("matches an independent AS R94 transliteration") {
    Rng rng(2024);
    for (int t = 0; t < 20; ++t) {
      std::vector<double> x(20);
      for (auto& v : x) v = rng.normal();
      auto r = shapiro_wilk(x);
      double w_ref, p_ref;
      swilk_reference(x, &w_ref, &p_ref);
      CHECK(r.w == doctest::Approx(w_ref).epsilon(1e-4));
      CHECK(r.p == doctest::Approx(p_ref).epsilon(1e-4));
    }
    // other sample sizes cross all formula branches
    for (int n : {3, 4, 5, 8, 11, 12, 30, 200}) {
      std::vector<double> x(static_cast<std::size_t>(n));
      for (auto& v : x) v = rng.normal();
      auto r = shapiro_wilk(x);
      double w_ref, p_ref;
      swilk_reference(x, &w_ref, &p_ref);
      INFO("n=", n);
      CHECK(r.w == doctest::Approx(w_ref).epsilon(1e-4));
      CHECK(r.p == doctest::Approx(p_ref).epsilon(1e-4));
    }
  }
  SUBCASE("affine invariance and statistic bound") {
    Rng rng(31);
    std::vector<double> x(25);
    for (auto& v : x) v = rng.uniform(0, 4);
    auto r1 = shapiro_wilk(x);
    std::vector<double> y = x;
    for (auto& v : y) v = 3.5 * v + 11.0;
    auto r2 = shapiro_wilk(y);
    CHECK(r1.w == doctest::Approx(r2.w).epsilon(1e-12));
    CHECK(r1.w <= 1.0);
    // skewed data should look non-normal
    std::vector<double> skew(50);
    for (auto& v : skew) v = std::exp(2.0 * rng.normal());
    CHECK(shapiro_wilk(skew).p < 0.01);
  }
  SUBCASE("degenerate and out-of-range inputs") {
    std::vector<double> c{2, 2, 2, 2};
    CHECK(shapiro_wilk(c).degenerate);
    std::vector<double> tiny{1, 2};
    CHECK_THROWS_AS(shapiro_wilk(tiny), InputError);
  }
}

TEST_CASE("benjamini-hochberg") {
  SUBCASE("single p unchanged") {
    std::vector<double> p{0.03};
    CHECK(bh_fdr(p) == std::vector<double>{0.03});
  }
  SUBCASE("hand step-up example") {
    std::vector<double> p{0.01, 0.02, 0.04, 0.05};
    auto q = bh_fdr(p);
    CHECK(q[0] == doctest::Approx(0.04));
    CHECK(q[1] == doctest::Approx(0.04));
    CHECK(q[2] == doctest::Approx(0.05));
    CHECK(q[3] == doctest::Approx(0.05));
  }
  SUBCASE("equal p values unchanged") {
    std::vector<double> p{0.2, 0.2, 0.2};
    for (double q : bh_fdr(p)) CHECK(q == doctest::Approx(0.2));
  }
  SUBCASE("corrected >= raw, order restored, monotone in sorted order") {
    Rng rng(8);
    std::vector<double> p(20);
    for (auto& v : p) v = rng.uniform();
    auto q = bh_fdr(p);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(q[i] >= p[i]);
      CHECK(q[i] <= 1.0);
    }
    std::vector<std::size_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t i, std::size_t j) { return p[i] < p[j]; });
    for (std::size_t i = 1; i < idx.size(); ++i)
      CHECK(q[idx[i]] >= q[idx[i - 1]]);
  }
  SUBCASE("out of range rejected") {
    std::vector<double> p{0.5, 1.5};
    CHECK_THROWS_AS(bh_fdr(p), InputError);
  }
}

TEST_CASE("cohen's d") {
  std::vector<double> a{1, 2, 3};
  std::vector<double> b{2, 3, 4};
  CHECK(cohens_d(a, a).d == 0.0);
  CHECK(cohens_d(a, b).d == doctest::Approx(-1.0));
  SUBCASE("affine invariance") {
    std::vector<double> a2 = a, b2 = b;
    for (auto& v : a2) v = 2.5 * v + 3.0;
    for (auto& v : b2) v = 2.5 * v + 3.0;
    CHECK(cohens_d(a2, b2).d == doctest::Approx(-1.0));
  }
  SUBCASE("zero pooled SD flags infinite effect") {
    std::vector<double> c{1, 1}, d{2, 2};
    CHECK(cohens_d(c, d).infinite);
  }
}

TEST_CASE("coefficient of variation") {
  std::vector<double> c{3, 3, 3};
  CHECK(coefficient_of_variation(c).percent == 0.0);
  SUBCASE("population SD reproduces the hold-out consistency arithmetic") {
    std::vector<double> v{0.70, 0.57, 0.57};
    const double cv = coefficient_of_variation(v).percent;
    CHECK(cv == doctest::Approx(9.99).epsilon(0.01));
    CHECK(std::fabs(cv - 10.22) < 1.5);
  }
  SUBCASE("scale invariance") {
    Rng rng(4);
    std::vector<double> v(10);
    for (auto& x : v) x = rng.uniform(0.5, 2.0);
    const double base = coefficient_of_variation(v).percent;
    for (auto& x : v) x *= 37.0;
    CHECK(coefficient_of_variation(v).percent ==
          doctest::Approx(base).epsilon(1e-12));
  }
  SUBCASE("zero mean flagged") {
    std::vector<double> v{-1, 1};
    CHECK_FALSE(coefficient_of_variation(v).defined);
  }
}

TEST_CASE("power analysis") {
  SUBCASE("d=0.8, n=20 per group") {
    CHECK(power_ttest(0.8, 20, 20, 0.05) ==
          doctest::Approx(0.693).epsilon(0.004));
  }
  SUBCASE("monotone in n") {
    double prev = 0.0;
    for (int n : {5, 10, 20, 40, 80}) {
      const double p = power_ttest(0.8, n, n, 0.05);
      CHECK(p > prev);
      prev = p;
    }
  }
  SUBCASE("agrees with Monte Carlo within 0.01") {
    for (auto [n1, n2] : std::vector<std::pair<int, int>>{
             {20, 20}, {28, 31}, {27, 16}}) {
      const double exact = power_ttest(0.8, n1, n2, 0.05);
      const double mc = mc_power(0.8, n1, n2, 0.05, 100000,
                                 std::uint64_t(n1 * 100 + n2));
      INFO("n1=", n1, " n2=", n2, " exact=", exact, " mc=", mc);
      CHECK(std::fabs(exact - mc) < 0.01);
    }
  }
  SUBCASE("required_n hits the classic 26 per group") {
    CHECK(required_n(0.8, 0.8, 0.05) == 26);
  }
  SUBCASE("zero effect rejected") {
    CHECK_THROWS_AS(power_ttest(0.0, 10, 10, 0.05), ConfigError);
    CHECK_THROWS_AS(required_n(0.0, 0.8, 0.05), ConfigError);
  }
}

TEST_CASE("metric csv round trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "kanlab_stats_csv";
  fs::create_directories(dir);
  const auto path = (dir / "metrics.csv").string();
  std::vector<MetricSample> rows{
      {"cnn_2d", "synth_a", "0", 0.9, 0.89, 0.9, 0.97},
      {"convkan_2d", "synth_a", "pooled", 0.93, 0.93, 0.93, 0.99}};
  write_metric_csv(path, rows);
  auto back = read_metric_csv(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].model == "cnn_2d");
  CHECK(back[1].fold == "pooled");
  CHECK(back[1].auroc == 0.99);
  fs::remove_all(dir);
}

TEST_SUITE_END();
