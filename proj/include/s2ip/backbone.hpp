#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "s2ip/tensor.hpp"

namespace s2ip {

struct BackboneConfig {
  std::size_t embed_dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 64;
  std::size_t ffn_mult = 4;
  double dropout = 0.0;
  double layer_norm_eps = 1e-5;

  void validate() const;
  // Six-layer GPT2-small width, for users with time to spare.
  static BackboneConfig gpt2_small_6();

  bool operator==(const BackboneConfig&) const = default;
};

// Which parameter groups the optimizer may touch. The default freezes
// attention and feed-forward weights and tunes positional embeddings and
// layer norms.
struct TrainabilityPolicy {
  bool positional_embedding = true;
  bool layer_norms = true;
  bool attention = false;
  bool ffn = false;

  static TrainabilityPolicy frozen_transformer() { return {}; }
  static TrainabilityPolicy none() { return {false, false, false, false}; }
  static TrainabilityPolicy all() { return {true, true, true, true}; }

  bool operator==(const TrainabilityPolicy&) const = default;
};

enum class ParameterGroup { positional, layer_norm, attention, ffn };

struct BackboneParameter {
  std::string name;
  ParameterGroup group;
  Tensor tensor;
};

// Pre-norm causal transformer: positional embeddings, n_layers blocks of
// (LN -> multi-head causal self-attention -> residual, LN -> GELU FFN ->
// residual), final LN. No token embedding: inputs arrive already embedded.
class Backbone {
 public:
  Backbone() = default;
  // weights ~ N(0, 0.02), biases 0, layer-norm gains 1, positional table ~ N(0, 0.02)
  static Backbone init(const BackboneConfig& config, std::uint64_t seed);
  // Weight file of named tensors; names are listed by named_parameters().
  static Backbone load(const BackboneConfig& config, const std::string& path);

  const BackboneConfig& config() const { return config_; }

  // (B x L x D) or (L x D) in, same shape out. Dropout is active only when
  // `training` is set and the configured rate is non-zero.
  Tensor forward(const Tensor& embeddings, bool training = false) const;

  // Sets requires_grad on every tensor according to the policy and returns
  // the trainable ones.
  std::vector<Tensor> trainable_parameters(const TrainabilityPolicy& policy);
  void apply_policy(const TrainabilityPolicy& policy);

  const std::vector<BackboneParameter>& named_parameters() const { return params_; }
  std::vector<NamedTensor> named_tensors() const;
  void load_weights(const std::vector<NamedTensor>& records, const std::string& prefix = "");
  std::size_t parameter_count() const;
  static std::size_t expected_parameter_count(const BackboneConfig& config);

  // Deep copy with independent parameter storage.
  Backbone clone() const;

 private:
  struct Layer {
    Tensor ln1_gain, ln1_bias;
    Tensor qkv_weight, qkv_bias;
    Tensor proj_weight, proj_bias;
    Tensor ln2_gain, ln2_bias;
    Tensor fc_weight, fc_bias;
    Tensor out_weight, out_bias;
  };

  void allocate(std::uint64_t seed);
  void index_parameters();
  Tensor attention(const Tensor& x, const Layer& layer, std::size_t batch, std::size_t len, bool training) const;
  Tensor maybe_dropout(const Tensor& x, bool training) const;

  BackboneConfig config_;
  Tensor positional_;
  std::vector<Layer> layers_;
  Tensor final_gain_, final_bias_;
  std::vector<BackboneParameter> params_;
  mutable std::mt19937_64 dropout_rng_;
};

}  // namespace s2ip
