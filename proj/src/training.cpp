#include "s2ip/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "s2ip/errors.hpp"

namespace s2ip {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValidationError("train.learning_rate must be > 0");
  if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ValidationError("train.adam_beta1 and train.adam_beta2 must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ValidationError("train.adam_eps must be > 0");
  if (!(clip_norm >= 0.0)) throw ValidationError("train.clip_norm must be >= 0");
  if (!(min_delta >= 0.0)) throw ValidationError("train.min_delta must be >= 0");
}

void TrainConfig::bind(ConfigBinder& b) {
  b.bind("train.learning_rate", learning_rate);
  b.bind("train.epochs", epochs);
  b.bind("train.batch_size", batch_size);
  b.bind("train.early_stop_patience", early_stop_patience);
  b.bind("train.min_delta", min_delta);
  b.bind(
      "train.seed", [this] { return std::to_string(seed); },
      [this](const std::string& s) {
        if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
          throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
        }
        seed = std::stoull(s);
      });
  b.bind("train.adam_beta1", adam_beta1);
  b.bind("train.adam_beta2", adam_beta2);
  b.bind("train.adam_eps", adam_eps);
  b.bind("train.clip_norm", clip_norm);
  b.bind("train.max_steps", max_steps);
}

void adam_step(std::span<const NamedParameter> params, AdamState& state, const TrainConfig& config) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].tensor.numel(), 0.0);
      state.v[i].assign(params[i].tensor.numel(), 0.0);
    }
  }
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    double sq = 0.0;
    bool finite = true;
    for (double g : p.tensor.grad()) {
      finite = finite && std::isfinite(g);
      sq += g * g;
    }
    if (!finite) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%g", std::sqrt(sq));
      throw NumericError("non-finite gradient in parameter '" + p.name + "' (grad norm " + buf + ")");
    }
  }
  state.step += 1;
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    if (!t.has_grad()) {
      // Zero gradient: moments decay, the step is m_hat / (sqrt(v_hat) + eps).
      for (std::size_t j = 0; j < t.numel(); ++j) {
        state.m[i][j] *= b1;
        state.v[i][j] *= b2;
      }
    } else {
      const auto g = t.grad();
      for (std::size_t j = 0; j < t.numel(); ++j) {
        state.m[i][j] = b1 * state.m[i][j] + (1.0 - b1) * g[j];
        state.v[i][j] = b2 * state.v[i][j] + (1.0 - b2) * g[j] * g[j];
      }
    }
    auto w = t.mutable_data();
    for (std::size_t j = 0; j < t.numel(); ++j) {
      const double m_hat = state.m[i][j] / c1;
      const double v_hat = state.v[i][j] / c2;
      if (m_hat != 0.0) w[j] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_eps);
    }
    t.clear_grad();
  }
}

double clip_grad_norm(std::span<const NamedParameter> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& p : params) {
      Tensor t = p.tensor;
      if (!t.has_grad()) continue;
      for (double& g : t.mutable_grad()) g *= f;
    }
  }
  return norm;
}

void TrainReport::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,train_loss,val_mse,train_mse\n";
  char buf[64];
  for (std::size_t e = 0; e < train_loss.size(); ++e) {
    out << (e + 1) << ',';
    std::snprintf(buf, sizeof buf, "%.17g", train_loss[e]);
    out << buf << ',';
    if (e < val_mse.size()) {
      std::snprintf(buf, sizeof buf, "%.17g", val_mse[e]);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "%.17g", train_mse[e]);
    out << ',' << buf << '\n';
  }
}

double mean_squared_error(const ForecastModel& model, std::span<const Window> windows) {
  if (windows.empty()) throw ValidationError("mean_squared_error: no windows");
  double total = 0.0;
  for (const auto& w : windows) {
    const auto y = model.predict(w.input, w.channel);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += (y[i] - w.target[i]) * (y[i] - w.target[i]);
    total += s / static_cast<double>(y.size());
  }
  return total / static_cast<double>(windows.size());
}

namespace {

using Snapshot = std::vector<std::vector<double>>;

Snapshot snapshot(const std::vector<NamedParameter>& params) {
  Snapshot s;
  for (const auto& p : params) s.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return s;
}

void restore(const std::vector<NamedParameter>& params, const Snapshot& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    std::copy(s[i].begin(), s[i].end(), t.mutable_data().begin());
    t.clear_grad();
  }
}

}  // namespace

TrainReport train(ForecastModel& model, std::span<const Window> train_windows, std::span<const Window> val_windows,
                  const TrainConfig& config) {
  config.validate();
  if (train_windows.empty()) throw ValidationError("train: no training windows");
  const auto start = std::chrono::steady_clock::now();
  const auto params = model.parameters();
  const double lambda = model.config().lambda;
  AdamState adam;
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train_windows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainReport report;
  Snapshot best = snapshot(params);
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t bad = 0;
  bool capped = false;

  for (std::size_t epoch = 1; epoch <= config.epochs && !capped; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    double mse_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t end = std::min(order.size(), b + config.batch_size);
      std::vector<const Window*> batch;
      for (std::size_t i = b; i < end; ++i) batch.push_back(&train_windows[order[i]]);
      double loss_value = 0.0;
      LossParts parts;
      {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = model.joint_loss(std::span<const Window* const>(batch), lambda, &parts);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          restore(params, best);
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(report.steps + 1));
        }
        tape.backward(loss);
      }
      try {
        if (config.clip_norm > 0.0) clip_grad_norm(params, config.clip_norm);
        adam_step(params, adam, config);
      } catch (const NumericError&) {
        restore(params, best);
        throw;
      }
      loss_sum += loss_value;
      mse_sum += parts.mse;
      ++batches;
      ++report.steps;
      if (config.max_steps > 0 && report.steps >= config.max_steps) {
        capped = true;
        break;
      }
    }
    report.train_loss.push_back(loss_sum / static_cast<double>(batches));
    report.train_mse.push_back(mse_sum / static_cast<double>(batches));
    if (!val_windows.empty()) {
      const double v = mean_squared_error(model, val_windows);
      report.val_mse.push_back(v);
      if (v < best_val - config.min_delta) {
        best_val = v;
        report.best_epoch = epoch;
        best = snapshot(params);
        bad = 0;
      } else if (++bad > config.early_stop_patience) {
        break;
      }
    }
  }
  if (!val_windows.empty() && report.best_epoch > 0) restore(params, best);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

namespace {

constexpr char kMagic[] = "S2IP1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

}  // namespace

void save_checkpoint(const ForecastModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(kMagic, kMagicLen);
  const std::string text = model.config().to_text();
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  std::vector<NamedTensor> records;
  for (const auto& p : model.named_tensors()) records.push_back({p.name, p.tensor});
  write_named_tensors(out, records);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

ForecastModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path);
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (in.gcount() != static_cast<std::streamsize>(kMagicLen)) throw LoadError("checkpoint " + path + " is truncated");
  if (std::string(magic, kMagicLen) != kMagic) {
    throw LoadError("checkpoint " + path + " has an unknown version header");
  }
  const std::uint64_t len = read_u64(in);
  if (len > (1u << 24)) throw LoadError("checkpoint " + path + " has an implausible config length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (in.gcount() != static_cast<std::streamsize>(len)) throw LoadError("checkpoint " + path + " is truncated");
  ModelConfig config;
  try {
    config = ModelConfig::from_text(text);
  } catch (const std::invalid_argument& e) {
    throw LoadError("checkpoint " + path + " has an invalid config: " + e.what());
  }
  auto records = read_named_tensors(in);
  ForecastModel model(config);
  model.load_tensors(records);
  return model;
}

}  // namespace s2ip
