#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "s2ip/errors.hpp"
#include "s2ip/preprocess.hpp"

using namespace s2ip;

namespace {

std::vector<double> random_series(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::uniform_real_distribution<double> off(-100.0, 100.0);
  const double base = off(rng);
  std::vector<double> x(n);
  for (double& v : x) v = base + d(rng);
  return x;
}

// Straight-line classical decomposition: explicit padded copy, explicit phase buckets.
DecompositionResult oracle_classical(const std::vector<double>& x, std::size_t period, std::size_t window) {
  const std::size_t n = x.size();
  const std::size_t h = window / 2;
  std::vector<double> padded;
  for (std::size_t i = 0; i < h; ++i) padded.push_back(x.front());
  padded.insert(padded.end(), x.begin(), x.end());
  for (std::size_t i = 0; i < h; ++i) padded.push_back(x.back());
  DecompositionResult r;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < window; ++j) s += padded[i + j];
    r.trend.push_back(s / static_cast<double>(window));
  }
  std::vector<std::vector<double>> buckets(period);
  for (std::size_t i = 0; i < n; ++i) buckets[i % period].push_back(x[i] - r.trend[i]);
  std::vector<double> means;
  double grand = 0.0;
  for (auto& b : buckets) {
    double s = 0.0;
    for (double v : b) s += v;
    means.push_back(s / static_cast<double>(b.size()));
    grand += means.back();
  }
  grand /= static_cast<double>(period);
  for (std::size_t i = 0; i < n; ++i) {
    r.seasonal.push_back(means[i % period] - grand);
    r.residual.push_back(x[i] - r.trend[i] - r.seasonal[i]);
  }
  return r;
}

}  // namespace

TEST_CASE("revin normalize goldens") {
  {
    auto r = revin_normalize(std::vector<double>{5, 5, 5, 5}, {});
    for (double v : r.values) CHECK(v == 0.0);
  }
  {
    auto r = revin_normalize(std::vector<double>{1, 2, 3, 4}, {1.0, 0.0, 1e-8});
    const std::vector<double> expected{-1.3416, -0.4472, 0.4472, 1.3416};
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.values[i] == doctest::Approx(expected[i]).epsilon(1e-4));
    CHECK(r.state.mean == 2.5);
    CHECK(r.state.variance == 1.25);
  }
  {
    auto r = revin_normalize(std::vector<double>{1, 2}, {2.0, 1.0, 1e-14});
    CHECK(r.values[0] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(r.values[1] == doctest::Approx(3.0).epsilon(1e-9));
  }
  CHECK_THROWS_AS(revin_normalize(std::vector<double>{1}, {}), ValidationError);
  CHECK_THROWS_AS(revin_normalize(std::vector<double>{1, 2}, {1.0, 0.0, 0.0}), ValidationError);
}

TEST_CASE("revin denormalize goldens") {
  RevInState s{2.5, 1.25, 1.0, 0.0, 0.0};
  CHECK(revin_denormalize(std::vector<double>{0.4472}, s)[0] == doctest::Approx(3.0).epsilon(1e-4));
  RevInState b{7.0, 3.0, 0.5, 2.0, 1e-5};
  auto fixed = revin_denormalize(std::vector<double>{2.0, 2.0}, b);
  CHECK(fixed[0] == doctest::Approx(7.0).epsilon(1e-15));
  CHECK(fixed[1] == doctest::Approx(7.0).epsilon(1e-15));
  RevInState singular{0.0, 1.0, 0.0, 0.0, 1e-5};
  CHECK_THROWS(revin_denormalize(std::vector<double>{1.0}, singular));
}

TEST_CASE("revin round trip on random windows") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> g(0.2, 3.0), b(-2.0, 2.0), scale(1e-3, 1e3);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t tau = 8 + rng() % 505;
    auto x = random_series(rng, tau, scale(rng));
    auto r = revin_normalize(x, {g(rng), b(rng), 1e-5});
    auto back = revin_denormalize(r.values, r.state);
    double worst = 0.0;
    for (std::size_t i = 0; i < tau; ++i) worst = std::max(worst, std::abs(back[i] - x[i]));
    CHECK(worst <= 1e-9);
  }
}

TEST_CASE("constant series decomposes to (c, 0, 0)") {
  for (auto method : {DecompositionMethod::classical, DecompositionMethod::stl}) {
    std::vector<double> x(48, 3.25);
    DecompositionOptions o;
    o.period = 12;
    o.trend_window = 13;
    o.method = method;
    auto r = decompose(x, o);
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(r.trend[i] == doctest::Approx(3.25).epsilon(1e-12));
      CHECK(std::abs(r.seasonal[i]) <= 1e-12);
      CHECK(std::abs(r.residual[i]) <= 1e-12);
    }
  }
}

TEST_CASE("alternating series matches the straight-line classical oracle") {
  std::vector<double> x{0, 1, 0, 1, 0, 1, 0, 1};
  DecompositionOptions o;
  o.period = 2;
  o.trend_window = 3;
  auto r = decompose(x, o);
  auto want = oracle_classical(x, 2, 3);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(r.trend[i] == doctest::Approx(want.trend[i]).epsilon(1e-14));
    CHECK(r.seasonal[i] == doctest::Approx(want.seasonal[i]).epsilon(1e-14));
  }
  CHECK(r.seasonal[0] < 0.0);
  CHECK(r.seasonal[1] == doctest::Approx(-r.seasonal[0]).epsilon(1e-14));
  for (std::size_t i = 2; i + 2 < x.size(); ++i) CHECK(std::abs(r.residual[i]) < 0.2);
}

TEST_CASE("classical decomposition equals the oracle on random input") {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 16 + rng() % 200;
    const std::size_t period = 2 + rng() % (n / 2 - 1);
    std::size_t window = 1 + 2 * (rng() % ((n - 1) / 2 + 1));
    if (window > n) window -= 2;
    auto x = random_series(rng, n);
    DecompositionOptions o;
    o.period = period;
    o.trend_window = window;
    auto r = decompose(x, o);
    auto want = oracle_classical(x, period, window);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(r.trend[i] - want.trend[i]) <= 1e-9);
      CHECK(std::abs(r.seasonal[i] - want.seasonal[i]) <= 1e-9);
    }
  }
}

TEST_CASE("additivity and zero-sum seasonality") {
  std::mt19937_64 rng(23);
  for (auto method : {DecompositionMethod::classical, DecompositionMethod::stl}) {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 32 + rng() % 97;
      auto x = random_series(rng, n, 5.0);
      DecompositionOptions o;
      o.period = 2 + rng() % (n / 2 - 1);
      o.trend_window = 25;
      o.method = method;
      o.stl_outer_iterations = trial % 2;
      auto r = decompose(x, o);
      for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(r.trend[i] + r.seasonal[i] + r.residual[i] - x[i]) <= 1e-9);
      if (method == DecompositionMethod::classical) {
        for (std::size_t start = 0; start + o.period <= n; start += o.period) {
          double s = 0.0;
          for (std::size_t i = start; i < start + o.period; ++i) s += r.seasonal[i];
          CHECK(std::abs(s) <= 1e-6);
        }
      }
    }
  }
}

TEST_CASE("stl recovers a clean seasonal pattern") {
  const std::size_t period = 12;
  std::vector<double> x(120), season(120);
  for (std::size_t i = 0; i < x.size(); ++i) {
    season[i] = std::sin(2.0 * M_PI * static_cast<double>(i) / period);
    x[i] = 0.05 * static_cast<double>(i) + season[i];
  }
  DecompositionOptions o;
  o.period = period;
  o.trend_window = 23;
  o.method = DecompositionMethod::stl;
  auto r = decompose(x, o);
  double worst = 0.0;
  for (std::size_t i = period; i + period < x.size(); ++i) worst = std::max(worst, std::abs(r.seasonal[i] - season[i]));
  CHECK(worst < 0.05);
}

TEST_CASE("decomposition argument validation") {
  std::vector<double> x(20, 1.0);
  DecompositionOptions o;
  o.trend_window = 5;
  o.period = 1;
  CHECK_THROWS_AS(decompose(x, o), ValidationError);
  o.period = 11;
  CHECK_THROWS_AS(decompose(x, o), ValidationError);
  o.period = 10;
  o.trend_window = 4;
  CHECK_THROWS_AS(decompose(x, o), ValidationError);
  o.trend_window = 21;
  CHECK_THROWS_AS(decompose(x, o), ValidationError);
}

TEST_CASE("patch counts and layout") {
  CHECK(PatchSpec{16, 8}.count(512) == 64);
  CHECK(PatchSpec{16, 8}.count(16) == 2);
  CHECK(PatchSpec{16, 8}.count(96) == 12);
  std::vector<double> x(96);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  Matrix p = patch(x, {16, 8});
  CHECK(p.rows == 12);
  for (std::size_t j = 0; j < 16; ++j) {
    CHECK(p(0, j) == static_cast<double>(j));
    CHECK(p(1, j) == static_cast<double>(8 + j));
  }
  // last row reaches into the replicated tail
  CHECK(p(11, 15) == 95.0);
  Matrix edge = patch(std::vector<double>(x.begin(), x.begin() + 16), {16, 8});
  CHECK(edge.rows == 2);
  for (std::size_t j = 8; j < 16; ++j) CHECK(edge(1, j) == 15.0);
  CHECK_THROWS_AS(patch(std::vector<double>(8, 0.0), {16, 8}), ValidationError);
}

TEST_CASE("patch rows are verbatim slices of the padded source") {
  std::mt19937_64 rng(24);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t len = 1 + rng() % 32;
    const std::size_t stride = 1 + rng() % len;
    const std::size_t tau = len + rng() % 200;
    auto x = random_series(rng, tau);
    Matrix p = patch(x, {len, stride});
    REQUIRE(p.rows == (tau - len) / stride + 2);
    for (std::size_t k = 0; k < p.rows; ++k) {
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t src = k * stride + j;
        CHECK(p(k, j) == (src < tau ? x[src] : x.back()));
      }
    }
  }
}

TEST_CASE("meta-token layout") {
  Matrix a(2, 3, 1.0), b(2, 3, 2.0), c(2, 3, 3.0);
  MetaToken m = build_meta_token(a, b, c, {});
  CHECK(m.values.rows == 2);
  CHECK(m.values.cols == 9);
  CHECK(m.n_patches == 2);
  const std::vector<double> row{1, 1, 1, 2, 2, 2, 3, 3, 3};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 9; ++j) CHECK(m.values(r, j) == row[j]);
  Matrix z(64, 16, 0.0);
  MetaToken big = build_meta_token(z, z, z, {});
  CHECK(big.values.rows == 64);
  CHECK(big.values.cols == 48);
  for (double v : big.values.data) CHECK(v == 0.0);
  CHECK_THROWS_AS(build_meta_token(a, Matrix(2, 4), c, {}), ValidationError);
}

TEST_CASE("meta-token binary dump") {
  Matrix a(2, 2, 1.5), b(2, 2, -2.0), c(2, 2, 0.25);
  MetaToken m = build_meta_token(a, b, c, {});
  std::stringstream ss;
  write_meta_token(ss, m);
  const std::string bytes = ss.str();
  CHECK(bytes.size() == 16 + 2 * 6 * 8);
  CHECK(bytes.substr(0, 8) == std::string("S2IPMTK\0", 8));
  std::stringstream in(bytes);
  CHECK(read_meta_token(in) == m.values);
  std::stringstream bad("NOTATOKEN_______");
  CHECK_THROWS(read_meta_token(bad));
}
