#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s2ip/model.hpp"
#include "s2ip/series_data.hpp"

namespace s2ip {

struct ErrorPair {
  double mse = 0.0;
  double mae = 0.0;
};

ErrorPair mse_mae(std::span<const double> y, std::span<const double> yhat);
// 200/H * sum |y - yhat| / (|y| + |yhat|); terms with a zero denominator count as 0.
double smape(std::span<const double> y, std::span<const double> yhat);
// 100/H * sum |y - yhat| / |y|; absent if any actual is zero.
std::optional<double> mape(std::span<const double> y, std::span<const double> yhat);
// Mean absolute error over the in-sample seasonal-naive MAE of `insample`.
// Absent when that denominator is zero.
std::optional<double> mase(std::span<const double> y, std::span<const double> yhat, std::span<const double> insample,
                           std::size_t s);

double autocorrelation(std::span<const double> x, std::size_t lag);
// |acf(s)| > z * sqrt((1 + 2 sum_{i<s} acf(i)^2) / n). False when s < 2 or n < 3s.
bool seasonality_test(std::span<const double> insample, std::size_t s, double z = 1.645);

enum class Naive2Mode { automatic, force_seasonal, force_naive };

struct Naive2Options {
  double z = 1.645;
  Naive2Mode mode = Naive2Mode::automatic;
};

// Multiplicative seasonal indices from a centered moving average of order s
// (2 x s when s is even).
std::vector<double> seasonal_indices(std::span<const double> insample, std::size_t s);

// Last value repeated H times, seasonally adjusted when the test passes.
std::vector<double> naive2_forecast(std::span<const double> insample, std::size_t s, std::size_t horizon,
                                    const Naive2Options& options = {});

// (smape / naive2_smape + mase / naive2_mase) / 2; absent on a zero denominator.
std::optional<double> owa(double model_smape, double model_mase, double naive2_smape, double naive2_mase);

enum class MetricsMode { long_horizon, short_horizon };

std::string to_string(MetricsMode m);
MetricsMode parse_metrics_mode(const std::string& s);

struct MetricReport {
  double mse = 0.0;
  double mae = 0.0;
  std::optional<double> smape;
  std::optional<double> mape;
  std::optional<double> mase;
  std::optional<double> owa;
  std::size_t horizon = 0;
  std::size_t seasonality = 0;
  std::size_t windows = 0;
};

struct WindowMetrics {
  std::size_t window_id = 0;
  std::size_t channel = 0;
  double mse = 0.0;
  double mae = 0.0;
  std::optional<double> smape;
  std::optional<double> mase;
};

struct EvaluationOptions {
  MetricsMode mode = MetricsMode::long_horizon;
  std::size_t seasonality = 24;
  Naive2Options naive2;
  // Short mode only: maps inputs, targets and forecasts back to the raw scale.
  const Standardizer* inverse = nullptr;
};

struct Evaluation {
  MetricReport report;
  std::vector<WindowMetrics> per_window;
};

using Forecaster = std::function<std::vector<double>(const Window&)>;

// Means over windows (channels are already flattened into windows). In short
// mode SMAPE/MAPE/MASE average over the windows where they are defined and OWA
// compares those means with the Naive2 means on the same windows.
Evaluation evaluate(std::span<const Window> windows, const Forecaster& forecaster, const EvaluationOptions& options);
Evaluation evaluate_model(const ForecastModel& model, std::span<const Window> windows,
                          const EvaluationOptions& options);

std::string metric_csv_header();
std::string metric_csv_row(const MetricReport& report);
void write_metric_report(const std::string& path, const MetricReport& report);
void write_window_metrics(const std::string& path, std::span<const WindowMetrics> rows, MetricsMode mode);

}  // namespace s2ip
