#include "s2ip/backbone.hpp"

#include <cmath>
#include <map>

#include "s2ip/errors.hpp"

namespace s2ip {

void BackboneConfig::validate() const {
  if (embed_dim == 0 || n_heads == 0 || n_layers == 0 || max_seq_len == 0 || ffn_mult == 0) {
    throw ValidationError("backbone dimensions must be positive");
  }
  if (embed_dim % n_heads != 0) {
    throw ValidationError("backbone.embed_dim (" + std::to_string(embed_dim) + ") must be divisible by backbone.n_heads (" +
                          std::to_string(n_heads) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("backbone.dropout must lie in [0, 1)");
  if (!(layer_norm_eps > 0.0)) throw ValidationError("backbone.layer_norm_eps must be positive");
}

BackboneConfig BackboneConfig::gpt2_small_6() { return {768, 6, 12, 1024, 4, 0.0, 1e-5}; }

namespace {

Tensor normal_tensor(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

Backbone Backbone::init(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Backbone b;
  b.config_ = config;
  b.allocate(seed);
  return b;
}

void Backbone::allocate(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.embed_dim;
  const std::size_t h = config_.ffn_mult * d;
  constexpr double kStd = 0.02;
  positional_ = normal_tensor({config_.max_seq_len, d}, rng, kStd);
  layers_.clear();
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    Layer l;
    l.ln1_gain = Tensor::full({d}, 1.0);
    l.ln1_bias = Tensor::zeros({d});
    l.qkv_weight = normal_tensor({d, 3 * d}, rng, kStd);
    l.qkv_bias = Tensor::zeros({3 * d});
    l.proj_weight = normal_tensor({d, d}, rng, kStd);
    l.proj_bias = Tensor::zeros({d});
    l.ln2_gain = Tensor::full({d}, 1.0);
    l.ln2_bias = Tensor::zeros({d});
    l.fc_weight = normal_tensor({d, h}, rng, kStd);
    l.fc_bias = Tensor::zeros({h});
    l.out_weight = normal_tensor({h, d}, rng, kStd);
    l.out_bias = Tensor::zeros({d});
    layers_.push_back(std::move(l));
  }
  final_gain_ = Tensor::full({d}, 1.0);
  final_bias_ = Tensor::zeros({d});
  dropout_rng_.seed(seed ^ 0x9e3779b97f4a7c15ULL);
  index_parameters();
}

void Backbone::index_parameters() {
  params_.clear();
  params_.push_back({"pos_embed", ParameterGroup::positional, positional_});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layer." + std::to_string(i) + ".";
    Layer& l = layers_[i];
    params_.push_back({p + "ln1.gain", ParameterGroup::layer_norm, l.ln1_gain});
    params_.push_back({p + "ln1.bias", ParameterGroup::layer_norm, l.ln1_bias});
    params_.push_back({p + "attn.qkv.weight", ParameterGroup::attention, l.qkv_weight});
    params_.push_back({p + "attn.qkv.bias", ParameterGroup::attention, l.qkv_bias});
    params_.push_back({p + "attn.proj.weight", ParameterGroup::attention, l.proj_weight});
    params_.push_back({p + "attn.proj.bias", ParameterGroup::attention, l.proj_bias});
    params_.push_back({p + "ln2.gain", ParameterGroup::layer_norm, l.ln2_gain});
    params_.push_back({p + "ln2.bias", ParameterGroup::layer_norm, l.ln2_bias});
    params_.push_back({p + "ffn.fc.weight", ParameterGroup::ffn, l.fc_weight});
    params_.push_back({p + "ffn.fc.bias", ParameterGroup::ffn, l.fc_bias});
    params_.push_back({p + "ffn.proj.weight", ParameterGroup::ffn, l.out_weight});
    params_.push_back({p + "ffn.proj.bias", ParameterGroup::ffn, l.out_bias});
  }
  params_.push_back({"ln_f.gain", ParameterGroup::layer_norm, final_gain_});
  params_.push_back({"ln_f.bias", ParameterGroup::layer_norm, final_bias_});
}

Backbone Backbone::load(const BackboneConfig& config, const std::string& path) {
  Backbone b = init(config, 0);
  b.load_weights(load_named_tensors(path));
  return b;
}

void Backbone::load_weights(const std::vector<NamedTensor>& records, const std::string& prefix) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& r : records) by_name[r.name] = &r.tensor;
  for (auto& p : params_) {
    const std::string full = prefix + p.name;
    auto it = by_name.find(full);
    if (it == by_name.end()) throw LoadError("weight file is missing tensor '" + full + "'");
    const Tensor& src = *it->second;
    if (src.shape() != p.tensor.shape()) {
      throw LoadError("tensor '" + full + "' has shape " + shape_string(src.shape()) + ", expected " +
                      shape_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    std::copy(src.data().begin(), src.data().end(), dst.begin());
  }
}

std::vector<NamedTensor> Backbone::named_tensors() const {
  std::vector<NamedTensor> out;
  for (const auto& p : params_) out.push_back({p.name, p.tensor});
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t Backbone::expected_parameter_count(const BackboneConfig& c) {
  const std::size_t d = c.embed_dim;
  const std::size_t f = c.ffn_mult;
  const std::size_t attn = 4 * d * d + 4 * d;
  const std::size_t ffn = 2 * f * d * d + f * d + d;
  const std::size_t norms = 4 * d;
  return c.n_layers * (attn + ffn + norms) + 2 * d + c.max_seq_len * d;
}

void Backbone::apply_policy(const TrainabilityPolicy& policy) {
  for (auto& p : params_) {
    bool on = false;
    switch (p.group) {
      case ParameterGroup::positional:
        on = policy.positional_embedding;
        break;
      case ParameterGroup::layer_norm:
        on = policy.layer_norms;
        break;
      case ParameterGroup::attention:
        on = policy.attention;
        break;
      case ParameterGroup::ffn:
        on = policy.ffn;
        break;
    }
    p.tensor.set_requires_grad(on);
  }
}

std::vector<Tensor> Backbone::trainable_parameters(const TrainabilityPolicy& policy) {
  apply_policy(policy);
  std::vector<Tensor> out;
  for (auto& p : params_) {
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  }
  return out;
}

Backbone Backbone::clone() const {
  Backbone b;
  b.config_ = config_;
  b.positional_ = positional_.clone();
  for (const auto& l : layers_) {
    b.layers_.push_back({l.ln1_gain.clone(), l.ln1_bias.clone(), l.qkv_weight.clone(), l.qkv_bias.clone(),
                         l.proj_weight.clone(), l.proj_bias.clone(), l.ln2_gain.clone(), l.ln2_bias.clone(),
                         l.fc_weight.clone(), l.fc_bias.clone(), l.out_weight.clone(), l.out_bias.clone()});
  }
  b.final_gain_ = final_gain_.clone();
  b.final_bias_ = final_bias_.clone();
  b.dropout_rng_ = dropout_rng_;
  b.index_parameters();
  return b;
}

Tensor Backbone::maybe_dropout(const Tensor& x, bool training) const {
  if (!training || config_.dropout <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - config_.dropout);
  std::vector<double> mask(x.numel());
  const double s = 1.0 / (1.0 - config_.dropout);
  for (double& m : mask) m = keep(dropout_rng_) ? s : 0.0;
  return x * Tensor::from(x.shape(), std::move(mask));
}

Tensor Backbone::attention(const Tensor& x, const Layer& l, std::size_t batch, std::size_t len,
                           bool training) const {
  const std::size_t d = config_.embed_dim;
  const std::size_t heads = config_.n_heads;
  const std::size_t dh = d / heads;
  Tensor qkv = matmul(x, l.qkv_weight) + l.qkv_bias;  // B x L x 3D
  auto split_heads = [&](std::size_t part) {
    Tensor t = slice(qkv, -1, part * d, d);
    t = reshape(t, {batch, len, heads, dh});
    t = permute(t, {0, 2, 1, 3});
    return reshape(t, {batch * heads, len, dh});
  };
  Tensor q = split_heads(0);
  Tensor k = split_heads(1);
  Tensor v = split_heads(2);
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor weights = maybe_dropout(softmax(causal_mask(scores), -1), training);
  Tensor y = matmul(weights, v);  // (B*H) x L x dh
  y = reshape(y, {batch, heads, len, dh});
  y = permute(y, {0, 2, 1, 3});
  y = reshape(y, {batch, len, d});
  return matmul(y, l.proj_weight) + l.proj_bias;
}

Tensor Backbone::forward(const Tensor& embeddings, bool training) const {
  const bool unbatched = embeddings.rank() == 2;
  if (!unbatched && embeddings.rank() != 3) {
    throw ShapeError("backbone input must be (L x D) or (B x L x D), got " + shape_string(embeddings.shape()));
  }
  const std::size_t batch = unbatched ? 1 : embeddings.dim(0);
  const std::size_t len = embeddings.dim(-2);
  const std::size_t d = embeddings.dim(-1);
  if (d != config_.embed_dim) {
    throw ShapeError("backbone input width " + std::to_string(d) + " does not match embed_dim " +
                     std::to_string(config_.embed_dim));
  }
  if (len > config_.max_seq_len) {
    throw ValidationError("sequence length " + std::to_string(len) + " exceeds backbone.max_seq_len " +
                          std::to_string(config_.max_seq_len));
  }
  Tensor pos = slice(positional_, 0, 0, len);
  Tensor h = reshape(embeddings, {batch, len, d});
  if (batch == 1) {
    h = reshape(reshape(embeddings, {len, d}) + pos, {1, len, d});
  } else {
    h = h + stack(std::vector<Tensor>(batch, pos));
  }
  h = maybe_dropout(h, training);
  for (const auto& l : layers_) {
    h = h + maybe_dropout(attention(layer_norm(h, l.ln1_gain, l.ln1_bias, config_.layer_norm_eps), l, batch, len, training),
                          training);
    Tensor m = layer_norm(h, l.ln2_gain, l.ln2_bias, config_.layer_norm_eps);
    Tensor f = matmul(gelu(matmul(m, l.fc_weight) + l.fc_bias), l.out_weight) + l.out_bias;
    h = h + maybe_dropout(f, training);
  }
  h = layer_norm(h, final_gain_, final_bias_, config_.layer_norm_eps);
  return unbatched ? reshape(h, {len, d}) : h;
}

}  // namespace s2ip
