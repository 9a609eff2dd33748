#include "s2ip/preprocess.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>

#include "s2ip/errors.hpp"

namespace s2ip {

// ---------------------------------------------------------------------------
// RevIN

double RevInState::stddev() const { return std::sqrt(variance + epsilon); }

RevInState revin_statistics(std::span<const double> x, const RevInParams& params) {
  if (x.size() < 2) throw ValidationError("instance normalization needs at least two samples");
  if (!(params.epsilon > 0.0)) throw ValidationError("instance normalization epsilon must be positive");
  const double n = static_cast<double>(x.size());
  const double mu = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  return {mu, var, params.gamma, params.beta, params.epsilon};
}

RevInResult revin_normalize(std::span<const double> x, const RevInParams& params) {
  RevInResult out{{}, revin_statistics(x, params)};
  const double sd = out.state.stddev();
  out.values.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.values[i] = params.gamma * (x[i] - out.state.mean) / sd + params.beta;
  }
  return out;
}

std::vector<double> revin_denormalize(std::span<const double> y, const RevInState& state) {
  if (state.gamma == 0.0) throw ValidationError("cannot invert instance normalization with gamma = 0");
  const double sd = state.stddev();
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = (y[i] - state.beta) / state.gamma * sd + state.mean;
  return out;
}

// ---------------------------------------------------------------------------
// Decomposition

std::string to_string(DecompositionMethod m) { return m == DecompositionMethod::stl ? "stl" : "classical"; }

DecompositionMethod parse_decomposition_method(const std::string& s) {
  if (s == "classical") return DecompositionMethod::classical;
  if (s == "stl") return DecompositionMethod::stl;
  throw ValidationError("unknown decomposition method '" + s + "' (expected classical or stl)");
}

std::vector<double> centered_moving_average(std::span<const double> x, std::size_t window) {
  const std::size_t n = x.size();
  const std::size_t half = window / 2;
  std::vector<double> out(n);
  auto value_at = [&](std::ptrdiff_t i) {
    const std::ptrdiff_t clamped = std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1);
    return x[static_cast<std::size_t>(clamped)];
  };
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::ptrdiff_t k = -static_cast<std::ptrdiff_t>(half); k <= static_cast<std::ptrdiff_t>(half); ++k) {
      s += value_at(static_cast<std::ptrdiff_t>(i) + k);
    }
    out[i] = s / static_cast<double>(2 * half + 1);
  }
  return out;
}

namespace {

void validate_decomposition(std::size_t n, const DecompositionOptions& o) {
  if (o.period < 2 || o.period > n / 2) {
    throw ValidationError("decomposition period " + std::to_string(o.period) + " must lie in [2, " +
                          std::to_string(n / 2) + "]");
  }
  if (o.trend_window % 2 == 0 || o.trend_window > n) {
    throw ValidationError("trend window " + std::to_string(o.trend_window) + " must be odd and at most " +
                          std::to_string(n));
  }
  if (o.method == DecompositionMethod::stl && (o.stl_seasonal_window < 3 || o.stl_seasonal_window % 2 == 0)) {
    throw ValidationError("STL seasonal window must be odd and at least 3");
  }
}

DecompositionResult classical(std::span<const double> x, const DecompositionOptions& o) {
  const std::size_t n = x.size();
  DecompositionResult r;
  r.trend = centered_moving_average(x, o.trend_window);
  std::vector<double> phase_sum(o.period, 0.0);
  std::vector<std::size_t> phase_count(o.period, 0);
  for (std::size_t i = 0; i < n; ++i) {
    phase_sum[i % o.period] += x[i] - r.trend[i];
    ++phase_count[i % o.period];
  }
  std::vector<double> phase_mean(o.period);
  for (std::size_t p = 0; p < o.period; ++p) phase_mean[p] = phase_sum[p] / static_cast<double>(phase_count[p]);
  const double offset = std::accumulate(phase_mean.begin(), phase_mean.end(), 0.0) / static_cast<double>(o.period);
  for (double& m : phase_mean) m -= offset;
  r.seasonal.resize(n);
  r.residual.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.seasonal[i] = phase_mean[i % o.period];
    r.residual[i] = x[i] - r.trend[i] - r.seasonal[i];
  }
  return r;
}

// Degree-1 loess evaluated at `at`. `xs` are sorted abscissae.
double loess_point(std::span<const double> xs, std::span<const double> ys, std::span<const double> robust,
                   std::size_t q, double at, std::vector<double>& scratch) {
  const std::size_t n = xs.size();
  scratch.resize(n);
  for (std::size_t i = 0; i < n; ++i) scratch[i] = std::abs(xs[i] - at);
  double lambda = 0.0;
  if (q <= n) {
    std::vector<double> d = scratch;
    std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(q - 1), d.end());
    lambda = d[q - 1];
  } else {
    lambda = *std::max_element(scratch.begin(), scratch.end()) * static_cast<double>(q) / static_cast<double>(n);
  }
  lambda = std::max(lambda, 1e-12);
  double sw = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = scratch[i] / lambda;
    double w = 0.0;
    if (u < 1.0) {
      const double t = 1.0 - u * u * u;
      w = t * t * t;
    }
    w *= robust[i];
    scratch[i] = w;
    sw += w;
    sx += w * xs[i];
    sy += w * ys[i];
  }
  if (sw <= 0.0) {
    // Every neighbour was down-weighted to zero; fall back to the plain mean.
    return std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(n);
  }
  const double xbar = sx / sw;
  const double ybar = sy / sw;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += scratch[i] * (xs[i] - xbar) * (xs[i] - xbar);
    sxy += scratch[i] * (xs[i] - xbar) * (ys[i] - ybar);
  }
  const double range = xs.back() - xs.front();
  if (sxx <= 1e-12 * std::max(1.0, range * range)) return ybar;
  return ybar + sxy / sxx * (at - xbar);
}

std::vector<double> moving_average(std::span<const double> x, std::size_t w) {
  std::vector<double> out(x.size() - w + 1);
  double s = std::accumulate(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(w), 0.0);
  out[0] = s / static_cast<double>(w);
  for (std::size_t i = 1; i < out.size(); ++i) {
    s += x[i + w - 1] - x[i - 1];
    out[i] = s / static_cast<double>(w);
  }
  return out;
}

std::size_t next_odd(std::size_t v) { return v % 2 == 0 ? v + 1 : v; }

// Seasonal-trend decomposition by loess (Cleveland et al.), without the jump
// optimizations: every smoother is evaluated at every point.
DecompositionResult stl(std::span<const double> y, const DecompositionOptions& o) {
  const std::size_t n = y.size();
  const std::size_t np = o.period;
  const std::size_t ns = o.stl_seasonal_window;
  const std::size_t nt = o.trend_window;
  const std::size_t nl = next_odd(np);
  const std::size_t inner = std::max<std::size_t>(1, o.stl_inner_iterations);

  std::vector<double> trend(n, 0.0);
  std::vector<double> seasonal(n, 0.0);
  std::vector<double> robust(n, 1.0);
  std::vector<double> scratch;

  std::vector<double> positions(n);
  std::iota(positions.begin(), positions.end(), 0.0);

  for (std::size_t outer = 0; outer <= o.stl_outer_iterations; ++outer) {
    for (std::size_t it = 0; it < inner; ++it) {
      std::vector<double> detrended(n);
      for (std::size_t i = 0; i < n; ++i) detrended[i] = y[i] - trend[i];

      // Cycle-subseries smoothing, extended by one period on each side.
      std::vector<double> cycle(n + 2 * np, 0.0);
      for (std::size_t phase = 0; phase < np; ++phase) {
        std::vector<double> xs, ys, ws;
        for (std::size_t i = phase; i < n; i += np) {
          xs.push_back(static_cast<double>(xs.size()));
          ys.push_back(detrended[i]);
          ws.push_back(robust[i]);
        }
        const std::size_t m = xs.size();
        for (std::ptrdiff_t j = -1; j <= static_cast<std::ptrdiff_t>(m); ++j) {
          const double v = loess_point(xs, ys, ws, ns, static_cast<double>(j), scratch);
          // Subseries position j sits at time phase + j*np; shift by np into `cycle`.
          const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(phase) + j * static_cast<std::ptrdiff_t>(np) +
                                   static_cast<std::ptrdiff_t>(np);
          if (t >= 0 && t < static_cast<std::ptrdiff_t>(n + 2 * np)) cycle[static_cast<std::size_t>(t)] = v;
        }
      }

      // Low-pass filter of the cycle series.
      auto low = moving_average(moving_average(moving_average(cycle, np), np), 3);
      std::vector<double> ones(n, 1.0);
      std::vector<double> lowpass(n);
      for (std::size_t i = 0; i < n; ++i) lowpass[i] = loess_point(positions, low, ones, nl, positions[i], scratch);

      for (std::size_t i = 0; i < n; ++i) seasonal[i] = cycle[i + np] - lowpass[i];

      std::vector<double> deseasonalized(n);
      for (std::size_t i = 0; i < n; ++i) deseasonalized[i] = y[i] - seasonal[i];
      for (std::size_t i = 0; i < n; ++i) {
        trend[i] = loess_point(positions, deseasonalized, robust, nt, positions[i], scratch);
      }
    }
    if (outer == o.stl_outer_iterations) break;
    std::vector<double> abs_res(n);
    for (std::size_t i = 0; i < n; ++i) abs_res[i] = std::abs(y[i] - trend[i] - seasonal[i]);
    std::vector<double> sorted = abs_res;
    std::sort(sorted.begin(), sorted.end());
    const double median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
    const double h = 6.0 * median;
    for (std::size_t i = 0; i < n; ++i) {
      if (h <= 0.0) {
        robust[i] = 1.0;
        continue;
      }
      const double u = abs_res[i] / h;
      robust[i] = u < 1.0 ? (1.0 - u * u) * (1.0 - u * u) : 0.0;
    }
  }

  DecompositionResult r;
  r.trend = std::move(trend);
  r.seasonal = std::move(seasonal);
  r.residual.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.residual[i] = y[i] - r.trend[i] - r.seasonal[i];
  return r;
}

}  // namespace

DecompositionResult decompose(std::span<const double> x, const DecompositionOptions& options) {
  validate_decomposition(x.size(), options);
  DecompositionResult r = options.method == DecompositionMethod::stl ? stl(x, options) : classical(x, options);
  r.period = options.period;
  r.trend_window = options.trend_window;
  r.method = options.method;
  return r;
}

// ---------------------------------------------------------------------------
// Patching

std::size_t PatchSpec::count(std::size_t series_length) const {
  validate(series_length);
  return (series_length - length) / stride + 2;
}

void PatchSpec::validate(std::size_t series_length) const {
  if (length == 0 || stride == 0) throw ValidationError("patch length and stride must be positive");
  if (stride > length) throw ValidationError("patch stride must not exceed patch length");
  if (length > series_length) {
    throw ValidationError("patch length " + std::to_string(length) + " exceeds series length " +
                          std::to_string(series_length));
  }
}

Matrix patch(std::span<const double> component, const PatchSpec& spec) {
  const std::size_t rows = spec.count(component.size());
  std::vector<double> padded(component.begin(), component.end());
  padded.insert(padded.end(), spec.stride, component.back());
  Matrix out(rows, spec.length);
  for (std::size_t k = 0; k < rows; ++k) {
    std::copy_n(padded.begin() + static_cast<std::ptrdiff_t>(k * spec.stride), spec.length, out.row(k).begin());
  }
  return out;
}

MetaToken build_meta_token(const Matrix& trend, const Matrix& seasonal, const Matrix& residual,
                           const RevInState& revin) {
  if (trend.rows != seasonal.rows || trend.rows != residual.rows || trend.cols != seasonal.cols ||
      trend.cols != residual.cols) {
    throw ValidationError("meta-token components must share one shape");
  }
  const std::size_t lp = trend.cols;
  MetaToken token;
  token.n_patches = trend.rows;
  token.revin = revin;
  token.values = Matrix(trend.rows, 3 * lp);
  for (std::size_t r = 0; r < trend.rows; ++r) {
    auto dst = token.values.row(r);
    std::copy(trend.row(r).begin(), trend.row(r).end(), dst.begin());
    std::copy(seasonal.row(r).begin(), seasonal.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(lp));
    std::copy(residual.row(r).begin(), residual.row(r).end(), dst.begin() + static_cast<std::ptrdiff_t>(2 * lp));
  }
  return token;
}

namespace {

constexpr char kMetaMagic[8] = {'S', '2', 'I', 'P', 'M', 'T', 'K', '\0'};

template <typename T>
T little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

}  // namespace

void write_meta_token(std::ostream& out, const MetaToken& token) {
  out.write(kMetaMagic, sizeof kMetaMagic);
  const std::uint32_t rows = little(static_cast<std::uint32_t>(token.values.rows));
  const std::uint32_t cols = little(static_cast<std::uint32_t>(token.values.cols));
  out.write(reinterpret_cast<const char*>(&rows), 4);
  out.write(reinterpret_cast<const char*>(&cols), 4);
  for (double v : token.values.data) {
    const double le = little(v);
    out.write(reinterpret_cast<const char*>(&le), 8);
  }
}

Matrix read_meta_token(std::istream& in) {
  char magic[8];
  std::uint32_t rows = 0, cols = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&rows), 4);
  in.read(reinterpret_cast<char*>(&cols), 4);
  if (!in || std::memcmp(magic, kMetaMagic, 8) != 0) throw LoadError("not a meta-token dump");
  Matrix m(little(rows), little(cols));
  for (double& v : m.data) {
    double le = 0.0;
    in.read(reinterpret_cast<char*>(&le), 8);
    v = little(le);
  }
  if (!in) throw LoadError("truncated meta-token dump");
  return m;
}

}  // namespace s2ip
