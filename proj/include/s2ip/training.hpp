#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s2ip/config.hpp"
#include "s2ip/model.hpp"
#include "s2ip/series_data.hpp"
#include "s2ip/tensor.hpp"

namespace s2ip {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  std::size_t early_stop_patience = 5;
  double min_delta = 0.0;
  std::uint64_t seed = 7;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  std::size_t max_steps = 0;  // 0: no cap

  void validate() const;
  void bind(ConfigBinder& binder);
};

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One Adam update with bias correction over `params`, then clears their
// gradients. A parameter without a gradient is treated as having a zero one.
// Throws NumericError naming the parameter if any gradient is non-finite;
// nothing is updated in that case.
void adam_step(std::span<const NamedParameter> params, AdamState& state, const TrainConfig& config);

// Rescales gradients so their global L2 norm is at most `max_norm`; returns the
// norm before clipping.
double clip_grad_norm(std::span<const NamedParameter> params, double max_norm);

struct TrainReport {
  std::vector<double> train_loss;  // mean joint loss per epoch
  std::vector<double> train_mse;   // its forecast-error term
  std::vector<double> val_mse;     // empty when there is no validation set
  std::size_t best_epoch = 0;      // 1-based; 0 when nothing was selected
  std::size_t steps = 0;
  double seconds = 0.0;

  std::size_t epochs_run() const { return train_loss.size(); }
  void write_csv(const std::string& path) const;
};

// Mean over windows of the per-window MSE of model.predict.
double mean_squared_error(const ForecastModel& model, std::span<const Window> windows);

// Minimizes the joint loss with Adam. Windows are shuffled every epoch with a
// generator seeded by config.seed. With a non-empty validation set the
// parameters of the best validation epoch are restored at the end, and
// training stops once `early_stop_patience` consecutive epochs have failed to
// improve on it by more than `min_delta`.
TrainReport train(ForecastModel& model, std::span<const Window> train_windows, std::span<const Window> val_windows,
                  const TrainConfig& config);

// "S2IP1\n", u64 config length, config text, then the named tensors.
void save_checkpoint(const ForecastModel& model, const std::string& path);
ForecastModel load_checkpoint(const std::string& path);

}  // namespace s2ip
