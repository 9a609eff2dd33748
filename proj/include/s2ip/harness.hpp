#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "s2ip/config.hpp"
#include "s2ip/evaluation.hpp"
#include "s2ip/model.hpp"
#include "s2ip/series_data.hpp"
#include "s2ip/training.hpp"

namespace s2ip {

// Sum of sinusoids plus a linear trend plus Gaussian noise. Channel c shifts
// every sinusoid's phase by c * pi / 3.
struct SyntheticSpec {
  std::size_t length = 2000;
  std::size_t channels = 2;
  std::vector<std::size_t> periods{24, 96};
  std::vector<double> amplitudes{1.0, 0.5};
  double slope = 0.01;
  double noise = 0.1;
  std::uint64_t seed = 7;

  void validate() const;
};

SeriesFrame generate_synthetic(const SyntheticSpec& spec);

struct RunConfig {
  std::string data_path;  // empty: synthetic data
  MissingPolicy missing = MissingPolicy::reject;
  SyntheticSpec synth;
  SplitSpec split;
  ModelConfig model = desk_scale_config();  // model.window is the WindowSpec of the run
  TrainConfig train;
  MetricsMode metrics_mode = MetricsMode::long_horizon;
  std::size_t seasonality = 24;
  double naive2_z = 1.645;
  std::size_t eval_stride = 1;
  bool standardize = true;  // global z-scoring with train-split statistics
  std::string out_dir = "s2ip_out";
  std::string checkpoint;  // empty: <out_dir>/model.ckpt
  std::size_t repeats = 1;
  std::vector<double> ablate_lambda;
  std::vector<std::size_t> ablate_prompt_k;
  std::vector<std::size_t> ablate_n_anchors;
  std::vector<std::size_t> ablate_horizons;  // empty: model horizon only

  void bind(ConfigBinder& binder);
  void validate() const;
  std::string to_text() const;
  std::string checkpoint_path() const;
  // Sets model.seed, train.seed and synth.seed.
  void set_seed(std::uint64_t seed);

  bool operator==(const RunConfig& other) const { return to_text() == other.to_text(); }
};

// Strict: unknown keys and malformed values raise ValidationError/ParseError
// naming the key.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);

enum class Command { train, evaluate, forecast, ablate, gen_data, export_embeddings };

std::string to_string(Command c);
Command parse_command(const std::string& s);

struct PreparedData {
  SeriesFrame full;  // standardized when the run standardizes
  SeriesFrame train;
  SeriesFrame val;
  SeriesFrame test;
  Standardizer scaler;
  std::vector<Window> train_windows;
  std::vector<Window> val_windows;
  std::vector<Window> test_windows;
  std::vector<std::string> warnings;
};

SeriesFrame load_frame(const RunConfig& config);
// Splits, truncates for few-shot, standardizes and windows. `config.model`
// must already carry the data's channel count.
PreparedData prepare_data(const RunConfig& config, const SeriesFrame& frame);

// The model config with n_channels taken from the data.
ModelConfig model_config_for(const RunConfig& config, const SeriesFrame& frame);

struct TrainOutcome {
  ForecastModel model;
  TrainReport report;
  PreparedData data;
};

TrainOutcome train_pipeline(const RunConfig& config);
Evaluation evaluate_pipeline(const ForecastModel& model, const PreparedData& data, const RunConfig& config);

struct AblationRow {
  std::string cell;      // table9 | lambda | prompt_k | n_anchors
  std::string setting;   // e.g. prompt+decomposition, or the swept value
  std::size_t horizon = 0;
  MetricReport metrics;  // averaged over repeats
  double final_train_loss = 0.0;
};

std::vector<AblationRow> run_ablation(const RunConfig& config, std::ostream* log = nullptr);
void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

// Executes one CLI command; artifacts land in config.out_dir. Returns the
// process exit status.
int run(Command command, const RunConfig& config, std::ostream& log);

}  // namespace s2ip
