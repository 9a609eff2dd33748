#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "s2ip/backbone.hpp"
#include "s2ip/config.hpp"
#include "s2ip/preprocess.hpp"
#include "s2ip/semantic_prompt.hpp"
#include "s2ip/series_data.hpp"
#include "s2ip/tensor.hpp"

namespace s2ip {

struct ModelConfig {
  WindowSpec window;
  PatchSpec patch;
  // When disabled the whole normalized window is fed as the trend block and
  // the seasonal/residual blocks are zero.
  bool decomposition_enabled = true;
  DecompositionOptions decomposition;
  BackboneConfig backbone;
  TrainabilityPolicy policy;
  std::size_t prompt_k = 4;  // 0 disables prompting
  std::size_t n_anchors = 32;
  std::size_t vocab_size = 256;
  std::size_t vocab_clusters = 8;
  std::string embedding_path;  // empty: synthetic vocabulary
  double lambda = 0.01;
  bool include_prompt_in_output = false;
  Pooling pooling = Pooling::mean;
  std::size_t n_channels = 1;
  double revin_eps = 1e-5;
  std::uint64_t seed = 7;

  void validate() const;
  std::size_t n_patches() const { return patch.count(window.lookback); }
  std::size_t sequence_length() const { return prompt_k + n_patches(); }

  // Registers every field under its dotted key (window.*, patch.*, ...).
  void bind(ConfigBinder& binder);
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  bool operator==(const ModelConfig& other) const { return to_text() == other.to_text(); }
};

// Defaults sized for a laptop run on the synthetic dataset.
ModelConfig desk_scale_config();

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

// Tokenization output. `gamma`/`beta` are the channel's RevIN parameters as
// (1)-shaped tape tensors; `revin` records their values with the instance
// statistics.
struct Embedding {
  Tensor ts_embed;  // N_P x D
  RevInState revin;
  Tensor gamma;
  Tensor beta;
};

struct Forecast {
  Tensor yhat;        // tau', denormalized
  Tensor components;  // 3 tau' pre-denormalization output, blocks trend | seasonal | residual
  PromptSelection selection;
  Tensor ts_embed;
  Tensor prompted;  // (K + N_P) x D backbone input
  RevInState revin;
};

struct LossParts {
  double mse = 0.0;
  double alignment = 0.0;  // batch mean, before scaling by lambda
};

// Splits a 3H-vector into three H blocks, sums them and inverts RevIN.
std::vector<double> recombine_and_denormalize(std::span<const double> y_out, const RevInState& state);
// Differentiable form; gamma/beta are (1)-shaped tensors.
Tensor recombine_and_denormalize(const Tensor& y_out, const RevInState& state, const Tensor& gamma,
                                 const Tensor& beta);

class ForecastModel {
 public:
  ForecastModel() = default;
  explicit ForecastModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  AnchorBank& anchor_bank() { return bank_; }
  const AnchorBank& anchor_bank() const { return bank_; }

  // Every tensor of the model, frozen ones included, under stable names.
  std::vector<NamedParameter> named_tensors() const;
  // Tensors the optimizer updates.
  std::vector<NamedParameter> parameters() const;
  void load_tensors(const std::vector<NamedTensor>& records);

  // RevIN -> decomposition -> patching -> meta-token -> projection g.
  Embedding tokenize_and_embed(std::span<const double> x, std::size_t channel) const;
  MetaToken meta_token(std::span<const double> x, std::size_t channel) const;

  Tensor anchors() const { return bank_.derive(); }

  // Pass `anchors` to reuse one derivation across a batch. `training` enables
  // backbone dropout.
  Forecast forward_forecast(std::span<const double> x, std::size_t channel, const Tensor* anchors = nullptr,
                            bool training = false) const;
  std::vector<double> predict(std::span<const double> x, std::size_t channel) const;

  // MSE(yhat, target) averaged over batch and horizon, minus lambda times the
  // batch-mean alignment term. `parts` receives the two terms' values.
  Tensor joint_loss(std::span<const Window* const> batch, double lambda, LossParts* parts = nullptr) const;
  Tensor joint_loss(std::span<const Window> batch, double lambda, LossParts* parts = nullptr) const;

  ForecastModel clone() const;

 private:
  void check_input(std::span<const double> x, std::size_t channel) const;

  ModelConfig config_;
  Tensor proj_weight_;  // 3 L_P x D
  Tensor proj_bias_;    // D
  AnchorBank bank_;
  Backbone backbone_;
  Tensor out_weight_;  // (rows * D) x 3 tau'
  Tensor out_bias_;    // 3 tau'
  Tensor revin_gamma_;  // n_channels
  Tensor revin_beta_;   // n_channels
};

}  // namespace s2ip
