#include "s2ip/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "s2ip/errors.hpp"

namespace s2ip {

namespace {

void check_lengths(std::span<const double> y, std::span<const double> yhat, const char* name) {
  if (y.size() != yhat.size()) {
    throw ValidationError(std::string(name) + ": length mismatch (" + std::to_string(y.size()) + " vs " +
                          std::to_string(yhat.size()) + ")");
  }
  if (y.empty()) throw ValidationError(std::string(name) + ": empty input");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

ErrorPair mse_mae(std::span<const double> y, std::span<const double> yhat) {
  check_lengths(y, yhat, "mse_mae");
  ErrorPair e;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - yhat[i];
    e.mse += d * d;
    e.mae += std::abs(d);
  }
  e.mse /= static_cast<double>(y.size());
  e.mae /= static_cast<double>(y.size());
  return e;
}

double smape(std::span<const double> y, std::span<const double> yhat) {
  check_lengths(y, yhat, "smape");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double den = std::abs(y[i]) + std::abs(yhat[i]);
    if (den > 0.0) s += std::abs(y[i] - yhat[i]) / den;
  }
  return 200.0 * s / static_cast<double>(y.size());
}

std::optional<double> mape(std::span<const double> y, std::span<const double> yhat) {
  check_lengths(y, yhat, "mape");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 0.0) return std::nullopt;
    s += std::abs((y[i] - yhat[i]) / y[i]);
  }
  return 100.0 * s / static_cast<double>(y.size());
}

std::optional<double> mase(std::span<const double> y, std::span<const double> yhat, std::span<const double> insample,
                           std::size_t s) {
  check_lengths(y, yhat, "mase");
  if (s < 1 || insample.size() <= s) {
    throw ValidationError("mase: in-sample length " + std::to_string(insample.size()) +
                          " must exceed the seasonality " + std::to_string(s));
  }
  double den = 0.0;
  for (std::size_t t = s; t < insample.size(); ++t) den += std::abs(insample[t] - insample[t - s]);
  den /= static_cast<double>(insample.size() - s);
  if (!(den > 0.0)) return std::nullopt;
  return mse_mae(y, yhat).mae / den;
}

double autocorrelation(std::span<const double> x, std::size_t lag) {
  const std::size_t n = x.size();
  if (n == 0 || lag >= n) return 0.0;
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < n; ++i) den += (x[i] - m) * (x[i] - m);
  for (std::size_t i = lag; i < n; ++i) num += (x[i] - m) * (x[i - lag] - m);
  return den > 0.0 ? num / den : 0.0;
}

bool seasonality_test(std::span<const double> insample, std::size_t s, double z) {
  const std::size_t n = insample.size();
  if (s < 2 || n < 3 * s) return false;
  double acc = 0.0;
  for (std::size_t i = 1; i < s; ++i) {
    const double r = autocorrelation(insample, i);
    acc += r * r;
  }
  const double limit = z * std::sqrt((1.0 + 2.0 * acc) / static_cast<double>(n));
  return std::abs(autocorrelation(insample, s)) > limit;
}

std::vector<double> seasonal_indices(std::span<const double> x, std::size_t s) {
  const std::size_t n = x.size();
  if (s < 2 || n < 2 * s) {
    throw ValidationError("seasonal indices need at least two full periods (" + std::to_string(2 * s) + " values)");
  }
  const std::size_t half = s / 2;
  std::vector<double> sum(s, 0.0);
  std::vector<std::size_t> count(s, 0);
  for (std::size_t t = half; t + half < n; ++t) {
    double ma = 0.0;
    if (s % 2 == 0) {
      ma = 0.5 * x[t - half] + 0.5 * x[t + half];
      for (std::size_t j = t - half + 1; j < t + half; ++j) ma += x[j];
    } else {
      for (std::size_t j = t - half; j <= t + half; ++j) ma += x[j];
    }
    ma /= static_cast<double>(s);
    sum[t % s] += x[t] / ma;
    count[t % s] += 1;
  }
  std::vector<double> idx(s);
  for (std::size_t p = 0; p < s; ++p) idx[p] = sum[p] / static_cast<double>(count[p]);
  const double total = std::accumulate(idx.begin(), idx.end(), 0.0);
  for (double& v : idx) v *= static_cast<double>(s) / total;
  return idx;
}

std::vector<double> naive2_forecast(std::span<const double> insample, std::size_t s, std::size_t horizon,
                                    const Naive2Options& options) {
  if (insample.empty() || insample.size() < std::max<std::size_t>(s, 1)) {
    throw ValidationError("naive2: in-sample length must be at least max(s, 1)");
  }
  if (horizon == 0) return {};
  bool seasonal = false;
  switch (options.mode) {
    case Naive2Mode::automatic:
      seasonal = seasonality_test(insample, s, options.z);
      break;
    case Naive2Mode::force_seasonal:
      seasonal = s >= 2 && insample.size() >= 2 * s;
      break;
    case Naive2Mode::force_naive:
      break;
  }
  const std::size_t n = insample.size();
  if (seasonal) {
    std::vector<double> idx = seasonal_indices(insample, s);
    const bool usable = std::all_of(idx.begin(), idx.end(), [](double v) { return std::isfinite(v) && v > 0.0; });
    if (usable) {
      const double level = insample[n - 1] / idx[(n - 1) % s];
      std::vector<double> out(horizon);
      for (std::size_t h = 0; h < horizon; ++h) out[h] = level * idx[(n + h) % s];
      return out;
    }
  }
  return std::vector<double>(horizon, insample[n - 1]);
}

std::optional<double> owa(double model_smape, double model_mase, double naive2_smape, double naive2_mase) {
  if (naive2_smape == 0.0 || naive2_mase == 0.0) return std::nullopt;
  return 0.5 * (model_smape / naive2_smape + model_mase / naive2_mase);
}

std::string to_string(MetricsMode m) { return m == MetricsMode::short_horizon ? "short" : "long"; }

MetricsMode parse_metrics_mode(const std::string& s) {
  if (s == "long") return MetricsMode::long_horizon;
  if (s == "short") return MetricsMode::short_horizon;
  throw ValidationError("unknown metrics mode '" + s + "' (expected long or short)");
}

Evaluation evaluate(std::span<const Window> windows, const Forecaster& forecaster, const EvaluationOptions& options) {
  if (windows.empty()) throw ValidationError("evaluate: no test windows");
  const bool short_mode = options.mode == MetricsMode::short_horizon;
  Evaluation ev;
  MetricReport& r = ev.report;
  r.horizon = windows.front().target.size();
  r.seasonality = short_mode ? options.seasonality : 0;
  r.windows = windows.size();

  double smape_sum = 0.0, mape_sum = 0.0, mase_sum = 0.0, n2_smape_sum = 0.0, n2_mase_sum = 0.0;
  std::size_t smape_n = 0, mape_n = 0, mase_n = 0;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const Window& w = windows[i];
    std::vector<double> yhat = forecaster(w);
    std::vector<double> y = w.target;
    std::vector<double> hist = w.input;
    if (short_mode && options.inverse != nullptr) {
      for (double& v : yhat) v = options.inverse->inverse(w.channel, v);
      for (double& v : y) v = options.inverse->inverse(w.channel, v);
      for (double& v : hist) v = options.inverse->inverse(w.channel, v);
    }
    const ErrorPair e = mse_mae(y, yhat);
    WindowMetrics wm{i, w.channel, e.mse, e.mae, std::nullopt, std::nullopt};
    r.mse += e.mse;
    r.mae += e.mae;
    if (short_mode) {
      wm.smape = smape(y, yhat);
      wm.mase = mase(y, yhat, hist, options.seasonality);
      smape_sum += *wm.smape;
      ++smape_n;
      if (auto m = mape(y, yhat)) {
        mape_sum += *m;
        ++mape_n;
      }
      if (wm.mase) {
        const auto n2 = naive2_forecast(hist, options.seasonality, y.size(), options.naive2);
        mase_sum += *wm.mase;
        n2_smape_sum += smape(y, n2);
        n2_mase_sum += *mase(y, n2, hist, options.seasonality);
        ++mase_n;
      }
    }
    ev.per_window.push_back(wm);
  }
  r.mse /= static_cast<double>(windows.size());
  r.mae /= static_cast<double>(windows.size());
  if (short_mode) {
    r.smape = smape_sum / static_cast<double>(smape_n);
    if (mape_n > 0) r.mape = mape_sum / static_cast<double>(mape_n);
    if (mase_n > 0) {
      const double k = static_cast<double>(mase_n);
      r.mase = mase_sum / k;
      // OWA over the windows where MASE is defined, for both forecasters.
      double model_smape = 0.0;
      for (const auto& wm : ev.per_window)
        if (wm.mase) model_smape += *wm.smape;
      r.owa = owa(model_smape / k, mase_sum / k, n2_smape_sum / k, n2_mase_sum / k);
    }
  }
  return ev;
}

Evaluation evaluate_model(const ForecastModel& model, std::span<const Window> windows,
                          const EvaluationOptions& options) {
  return evaluate(windows, [&model](const Window& w) { return model.predict(w.input, w.channel); }, options);
}

std::string metric_csv_header() { return "mse,mae,smape,mape,mase,owa,horizon,seasonality,windows"; }

std::string metric_csv_row(const MetricReport& r) {
  return fmt(r.mse) + ',' + fmt(r.mae) + ',' + fmt(r.smape) + ',' + fmt(r.mape) + ',' + fmt(r.mase) + ',' +
         fmt(r.owa) + ',' + std::to_string(r.horizon) + ',' + std::to_string(r.seasonality) + ',' +
         std::to_string(r.windows);
}

void write_metric_report(const std::string& path, const MetricReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << metric_csv_header() << '\n' << metric_csv_row(report) << '\n';
}

void write_window_metrics(const std::string& path, std::span<const WindowMetrics> rows, MetricsMode mode) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  const bool short_mode = mode == MetricsMode::short_horizon;
  out << "window_id,channel,mse,mae" << (short_mode ? ",smape,mase" : "") << '\n';
  for (const auto& w : rows) {
    out << w.window_id << ',' << w.channel << ',' << fmt(w.mse) << ',' << fmt(w.mae);
    if (short_mode) out << ',' << fmt(w.smape) << ',' << fmt(w.mase);
    out << '\n';
  }
}

}  // namespace s2ip
