#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "s2ip/errors.hpp"
#include "s2ip/evaluation.hpp"

using namespace s2ip;

namespace {

using Vec = std::vector<double>;

Vec random_vec(std::mt19937_64& rng, std::size_t n, double lo = -5.0, double hi = 5.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vec v(n);
  for (double& x : v) x = u(rng);
  return v;
}

// Sample autocorrelation written out from its definition.
double acf_oracle(const Vec& x, std::size_t k) {
  double m = 0.0;
  for (double v : x) m += v;
  m /= static_cast<double>(x.size());
  double c0 = 0.0, ck = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) c0 += (x[i] - m) * (x[i] - m);
  for (std::size_t i = 0; i + k < x.size(); ++i) ck += (x[i] - m) * (x[i + k] - m);
  return ck / c0;
}

Vec tile(const Vec& pattern, std::size_t times) {
  Vec out;
  for (std::size_t i = 0; i < times; ++i) out.insert(out.end(), pattern.begin(), pattern.end());
  return out;
}

Window make_window(Vec input, Vec target, std::size_t channel = 0) {
  Window w;
  w.channel = channel;
  w.input = std::move(input);
  w.target = std::move(target);
  return w;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("mse and mae goldens") {
  auto e = mse_mae(Vec{1, 2, 3}, Vec{1, 2, 3});
  CHECK(e.mse == 0.0);
  CHECK(e.mae == 0.0);
  e = mse_mae(Vec{0, 0}, Vec{1, 1});
  CHECK(e.mse == 1.0);
  CHECK(e.mae == 1.0);
  e = mse_mae(Vec{1, 2, 3}, Vec{2, 2, 2});
  CHECK(e.mse == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(e.mae == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(mse_mae(Vec{1, 2}, Vec{1}), ValidationError);
  CHECK_THROWS_AS(mse_mae(Vec{}, Vec{}), ValidationError);
}

TEST_CASE("smape goldens") {
  CHECK(smape(Vec{3, 4}, Vec{3, 4}) == 0.0);
  CHECK(smape(Vec{1, 1}, Vec{2, 2}) == doctest::Approx(66.6667).epsilon(1e-6));
  CHECK(smape(Vec{0}, Vec{0}) == 0.0);
  CHECK(smape(Vec{0, 1}, Vec{0, 3}) == doctest::Approx(50.0));
  CHECK(smape(Vec{1}, Vec{-1}) == doctest::Approx(200.0));
}

TEST_CASE("mape and mase goldens") {
  CHECK(mape(Vec{2, 4}, Vec{1, 5}).value() == doctest::Approx(37.5));
  CHECK_FALSE(mape(Vec{0, 4}, Vec{1, 5}).has_value());
  CHECK(mase(Vec{5}, Vec{6}, Vec{1, 2, 3, 4}, 1).value() == doctest::Approx(1.0));
  CHECK(mase(Vec{5, 7}, Vec{5, 7}, Vec{1, 2, 3, 4}, 1).value() == 0.0);
  CHECK_FALSE(mase(Vec{5}, Vec{6}, Vec{2, 2, 2, 2}, 1).has_value());
  CHECK(mase(Vec{5}, Vec{7}, Vec{1, 5, 2, 8, 4}, 2).value() == doctest::Approx(2.0 / ((1.0 + 3.0 + 2.0) / 3.0)));
  CHECK_THROWS_AS(mase(Vec{5}, Vec{6}, Vec{1, 2}, 2), ValidationError);
}

TEST_CASE("metric properties on random inputs") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> shift(-100, 100);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t h = 1 + rng() % 30;
    Vec y = random_vec(rng, h), yhat = random_vec(rng, h);
    if (trial % 7 == 0) y[0] = yhat[0] = 0.0;
    const double s1 = smape(y, yhat);
    CHECK(s1 == smape(yhat, y));
    CHECK(s1 >= 0.0);
    CHECK(s1 <= 200.0 + 1e-12);
    const double c = shift(rng);
    Vec ys = y, yhats = yhat;
    for (auto& v : ys) v += c;
    for (auto& v : yhats) v += c;
    auto a = mse_mae(y, yhat), b = mse_mae(ys, yhats);
    CHECK(a.mse == doctest::Approx(b.mse).epsilon(1e-9));
    CHECK(a.mae == doctest::Approx(b.mae).epsilon(1e-9));
    Vec hist = random_vec(rng, 30);
    CHECK(smape(y, y) == 0.0);
    CHECK(mase(y, y, hist, 1 + rng() % 5).value() == 0.0);
    CHECK(mse_mae(y, y).mse == 0.0);
  }
}

TEST_CASE("autocorrelation matches its definition") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    Vec x = random_vec(rng, 10 + rng() % 50);
    const std::size_t k = rng() % 8;
    CHECK(autocorrelation(x, k) == doctest::Approx(acf_oracle(x, k)).epsilon(1e-12));
  }
  CHECK(autocorrelation(Vec{1, 2, 3}, 0) == doctest::Approx(1.0));
  CHECK(autocorrelation(Vec{4, 4, 4}, 1) == 0.0);
}

TEST_CASE("seasonality test follows the acf threshold") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t s = 2 + rng() % 10;
    const std::size_t n = 3 * s + rng() % 40;
    Vec x = random_vec(rng, n);
    if (trial % 2 == 0)
      for (std::size_t i = 0; i < n; ++i) x[i] += 4.0 * std::sin(2.0 * M_PI * static_cast<double>(i) / s);
    double acc = 0.0;
    for (std::size_t i = 1; i < s; ++i) acc += acf_oracle(x, i) * acf_oracle(x, i);
    const bool want = std::abs(acf_oracle(x, s)) > 1.645 * std::sqrt((1.0 + 2.0 * acc) / static_cast<double>(n));
    CHECK(seasonality_test(x, s) == want);
  }
  CHECK_FALSE(seasonality_test(tile({10, 20}, 4), 4));  // fewer than three periods
  CHECK_FALSE(seasonality_test(tile({10, 20, 30}, 4), 1));
}

TEST_CASE("seasonal indices by hand") {
  Vec idx = seasonal_indices(tile({10, 20}, 4), 4);
  const Vec want{2.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0, 4.0 / 3.0};
  for (std::size_t i = 0; i < 4; ++i) CHECK(idx[i] == doctest::Approx(want[i]).epsilon(1e-14));
  Vec odd = seasonal_indices(tile({1, 2, 3}, 3), 3);
  CHECK(odd[0] == doctest::Approx(0.5));
  CHECK(odd[1] == doctest::Approx(1.0));
  CHECK(odd[2] == doctest::Approx(1.5));
  CHECK_THROWS_AS(seasonal_indices(Vec{1, 2, 3}, 2), ValidationError);
}

TEST_CASE("naive2 forecasts") {
  CHECK(naive2_forecast(Vec{1, 2, 3}, 1, 4) == Vec{3, 3, 3, 3});
  CHECK(naive2_forecast(Vec{1, 2, 3}, 1, 0).empty());

  Naive2Options forced;
  forced.mode = Naive2Mode::force_seasonal;
  Vec f = naive2_forecast(tile({10, 20}, 4), 4, 6, forced);
  const Vec want{10, 20, 10, 20, 10, 20};
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(f[i] == doctest::Approx(want[i]).epsilon(1e-12));
  // the same series is too short for the automatic test
  CHECK(naive2_forecast(tile({10, 20}, 4), 4, 2) == Vec{20, 20});

  Vec season = tile({10, 20, 30, 20}, 4);
  REQUIRE(seasonality_test(season, 4));
  Vec g = naive2_forecast(season, 4, 5);
  const Vec want2{10, 20, 30, 20, 10};
  for (std::size_t i = 0; i < want2.size(); ++i) CHECK(g[i] == doctest::Approx(want2[i]).epsilon(1e-12));

  Naive2Options plain;
  plain.mode = Naive2Mode::force_naive;
  CHECK(naive2_forecast(season, 4, 2, plain) == Vec{20, 20});

  // non-positive seasonal indices fall back to the naive forecast
  CHECK(naive2_forecast(tile({-10, 20}, 4), 2, 2, forced) == Vec{20, 20});
  CHECK_THROWS_AS(naive2_forecast(Vec{1, 2}, 4, 2), ValidationError);
}

TEST_CASE("owa goldens") {
  CHECK(owa(12.0, 0.8, 12.0, 0.8).value() == 1.0);
  CHECK(owa(24.0, 1.6, 12.0, 0.8).value() == 2.0);
  CHECK(owa(5.0, 3.0, 10.0, 2.0).value() == 1.0);
  CHECK_FALSE(owa(1.0, 1.0, 0.0, 1.0).has_value());
  CHECK_FALSE(owa(1.0, 1.0, 1.0, 0.0).has_value());
}

TEST_CASE("evaluate aggregates over windows") {
  std::vector<Window> ws{make_window({1, 2, 3}, {0, 0}), make_window({1, 2, 3}, {0, 0}, 1)};
  int call = 0;
  Forecaster f = [&](const Window&) { return ++call == 1 ? Vec{1, 1} : Vec{std::sqrt(3.0), std::sqrt(3.0)}; };
  Evaluation e = evaluate(ws, f, {});
  CHECK(e.report.mse == doctest::Approx(2.0));
  CHECK(e.report.windows == 2);
  CHECK(e.report.horizon == 2);
  CHECK_FALSE(e.report.smape.has_value());
  CHECK(e.per_window[1].channel == 1);

  Forecaster oracle = [](const Window& w) { return w.target; };
  Evaluation perfect = evaluate(ws, oracle, {});
  CHECK(perfect.report.mse == 0.0);
  CHECK(perfect.report.mae == 0.0);
  CHECK_THROWS_AS(evaluate(std::vector<Window>{}, oracle, {}), ValidationError);
}

TEST_CASE("naive2 against itself has owa 1") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Window> ws;
    for (int i = 0; i < 5; ++i) {
      Vec hist = random_vec(rng, 24, 1.0, 10.0);
      for (std::size_t t = 0; t < hist.size(); ++t) hist[t] += 3.0 * std::sin(2.0 * M_PI * t / 6.0);
      ws.push_back(make_window(hist, random_vec(rng, 6, 1.0, 10.0)));
    }
    EvaluationOptions o;
    o.mode = MetricsMode::short_horizon;
    o.seasonality = 6;
    Forecaster n2 = [&](const Window& w) { return naive2_forecast(w.input, 6, w.target.size(), o.naive2); };
    Evaluation e = evaluate(ws, n2, o);
    REQUIRE(e.report.owa.has_value());
    CHECK(*e.report.owa == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("short mode maps back through the scaler") {
  std::vector<std::int64_t> ts{0, 1, 2, 3};
  SeriesFrame train(ts, Vec{10, 20, 30, 40}, {"x"});
  Standardizer sc = Standardizer::fit(train);
  std::vector<Window> ws{make_window({-1, 0, 1, 0, -1, 0, 1, 0}, {0.5, 1.0})};
  EvaluationOptions o;
  o.mode = MetricsMode::short_horizon;
  o.seasonality = 2;
  o.inverse = &sc;
  Forecaster f = [](const Window&) { return Vec{0.0, 0.0}; };
  Evaluation e = evaluate(ws, f, o);
  Vec y{sc.inverse(0, 0.5), sc.inverse(0, 1.0)}, yhat{sc.inverse(0, 0.0), sc.inverse(0, 0.0)};
  CHECK(e.report.smape.value() == doctest::Approx(smape(y, yhat)).epsilon(1e-12));
  CHECK(e.report.mse == doctest::Approx(mse_mae(y, yhat).mse).epsilon(1e-12));
  CHECK(e.report.seasonality == 2);
}

TEST_CASE("aggregation equals a recomputation from the per-window dump") {
  std::mt19937_64 rng(5);
  std::vector<Window> ws;
  for (int i = 0; i < 40; ++i) {
    Vec hist = random_vec(rng, 30, 1.0, 9.0);
    if (i % 5 == 0) std::fill(hist.begin(), hist.end(), 3.0);  // MASE undefined here
    ws.push_back(make_window(hist, random_vec(rng, 8, 1.0, 9.0), i % 3));
  }
  EvaluationOptions o;
  o.mode = MetricsMode::short_horizon;
  o.seasonality = 4;
  std::mt19937_64 frng(6);
  Forecaster f = [&](const Window& w) {
    Vec out = w.target;
    std::normal_distribution<double> n(0.0, 0.7);
    for (double& v : out) v += n(frng);
    return out;
  };
  Evaluation e = evaluate(ws, f, o);
  const auto path = (std::filesystem::temp_directory_path() / "s2ip_windows.csv").string();
  write_window_metrics(path, e.per_window, o.mode);
  auto rows = read_csv(path);
  REQUIRE(rows.size() == 41);
  CHECK(rows[0] == std::vector<std::string>{"window_id", "channel", "mse", "mae", "smape", "mase"});
  double mse = 0.0, mae = 0.0, sm = 0.0, ms = 0.0;
  std::size_t defined = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(std::stoul(rows[i][0]) == i - 1);
    CHECK(std::stoul(rows[i][1]) == (i - 1) % 3);
    mse += std::stod(rows[i][2]);
    mae += std::stod(rows[i][3]);
    sm += std::stod(rows[i][4]);
    if (!rows[i][5].empty()) {
      ms += std::stod(rows[i][5]);
      ++defined;
    }
  }
  CHECK(defined == 32);
  CHECK(e.report.mse == doctest::Approx(mse / 40).epsilon(1e-14));
  CHECK(e.report.mae == doctest::Approx(mae / 40).epsilon(1e-14));
  CHECK(e.report.smape.value() == doctest::Approx(sm / 40).epsilon(1e-14));
  CHECK(e.report.mase.value() == doctest::Approx(ms / defined).epsilon(1e-14));

  write_metric_report(path, e.report);
  auto summary = read_csv(path);
  CHECK(summary[0].size() == 9);
  CHECK(std::stod(summary[1][0]) == e.report.mse);
  CHECK(summary[1][6] == "8");
  std::filesystem::remove(path);
}

TEST_CASE("metrics mode names") {
  CHECK(parse_metrics_mode("short") == MetricsMode::short_horizon);
  CHECK(to_string(MetricsMode::long_horizon) == "long");
  CHECK_THROWS_AS(parse_metrics_mode("medium"), ValidationError);
}
