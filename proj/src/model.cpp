#include "s2ip/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "s2ip/errors.hpp"

namespace s2ip {

namespace {

void bind_seed(ConfigBinder& b, const std::string& key, std::uint64_t& field) {
  b.bind(
      key, [&field] { return std::to_string(field); },
      [&field](const std::string& s) {
        if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
          throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
        }
        field = std::stoull(s);
      });
}

Tensor normal_parameter(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

}  // namespace

void ModelConfig::bind(ConfigBinder& b) {
  b.bind("window.lookback", window.lookback);
  b.bind("window.horizon", window.horizon);
  b.bind("window.stride", window.stride);
  b.bind("patch.length", patch.length);
  b.bind("patch.stride", patch.stride);
  b.bind("decomposition.enabled", decomposition_enabled);
  b.bind(
      "decomposition.method", [this] { return to_string(decomposition.method); },
      [this](const std::string& s) { decomposition.method = parse_decomposition_method(s); });
  b.bind("decomposition.period", decomposition.period);
  b.bind("decomposition.trend_window", decomposition.trend_window);
  b.bind("decomposition.stl_seasonal_window", decomposition.stl_seasonal_window);
  b.bind("decomposition.stl_inner_iterations", decomposition.stl_inner_iterations);
  b.bind("decomposition.stl_outer_iterations", decomposition.stl_outer_iterations);
  b.bind("backbone.embed_dim", backbone.embed_dim);
  b.bind("backbone.n_layers", backbone.n_layers);
  b.bind("backbone.n_heads", backbone.n_heads);
  b.bind("backbone.max_seq_len", backbone.max_seq_len);
  b.bind("backbone.ffn_mult", backbone.ffn_mult);
  b.bind("backbone.dropout", backbone.dropout);
  b.bind("backbone.layer_norm_eps", backbone.layer_norm_eps);
  b.bind("policy.positional_embedding", policy.positional_embedding);
  b.bind("policy.layer_norms", policy.layer_norms);
  b.bind("policy.attention", policy.attention);
  b.bind("policy.ffn", policy.ffn);
  b.bind("model.prompt_k", prompt_k);
  b.bind("model.n_anchors", n_anchors);
  b.bind("model.vocab_size", vocab_size);
  b.bind("model.vocab_clusters", vocab_clusters);
  b.bind("model.embedding_path", embedding_path);
  b.bind("model.lambda", lambda);
  b.bind("model.include_prompt_in_output", include_prompt_in_output);
  b.bind(
      "model.pooling", [this] { return to_string(pooling); },
      [this](const std::string& s) { pooling = parse_pooling(s); });
  b.bind("model.n_channels", n_channels);
  b.bind("model.revin_eps", revin_eps);
  bind_seed(b, "model.seed", seed);
}

void ModelConfig::validate() const {
  window.validate();
  patch.validate(window.lookback);
  backbone.validate();
  if (decomposition_enabled) {
    const auto& d = decomposition;
    if (d.period < 2 || d.period > window.lookback / 2) {
      throw ValidationError("decomposition.period (" + std::to_string(d.period) + ") must lie in [2, lookback/2]");
    }
    if (d.trend_window % 2 == 0 || d.trend_window > window.lookback) {
      throw ValidationError("decomposition.trend_window must be odd and at most the lookback");
    }
    if (d.method == DecompositionMethod::stl && (d.stl_seasonal_window < 3 || d.stl_seasonal_window % 2 == 0)) {
      throw ValidationError("decomposition.stl_seasonal_window must be odd and at least 3");
    }
  }
  if (n_anchors < 1 || n_anchors > vocab_size / 2) {
    throw ValidationError("model.n_anchors (" + std::to_string(n_anchors) + ") must lie in [1, vocab_size/2]");
  }
  if (prompt_k > n_anchors) {
    throw ValidationError("model.prompt_k (" + std::to_string(prompt_k) + ") must not exceed model.n_anchors (" +
                          std::to_string(n_anchors) + ")");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("model.lambda must be finite and >= 0");
  if (vocab_clusters < 1) throw ValidationError("model.vocab_clusters must be positive");
  if (n_channels < 1) throw ValidationError("model.n_channels must be positive");
  if (!(revin_eps > 0.0)) throw ValidationError("model.revin_eps must be positive");
  if (sequence_length() > backbone.max_seq_len) {
    throw ValidationError("prompt length plus patch count (" + std::to_string(sequence_length()) +
                          ") exceeds backbone.max_seq_len (" + std::to_string(backbone.max_seq_len) + ")");
  }
}

std::string ModelConfig::to_text() const {
  ModelConfig copy = *this;
  ConfigBinder b;
  copy.bind(b);
  return b.serialize();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  ConfigBinder b;
  c.bind(b);
  b.apply(parse_key_values(text));
  c.validate();
  return c;
}

ModelConfig desk_scale_config() {
  ModelConfig c;
  c.window = {96, 24, 8};
  c.patch = {16, 8};
  c.decomposition.period = 24;
  c.decomposition.trend_window = 25;
  c.backbone.embed_dim = 32;
  c.backbone.n_layers = 2;
  c.backbone.n_heads = 4;
  c.backbone.max_seq_len = 32;
  c.prompt_k = 4;
  c.n_anchors = 32;
  c.vocab_size = 256;
  c.n_channels = 2;
  return c;
}

std::vector<double> recombine_and_denormalize(std::span<const double> y_out, const RevInState& state) {
  if (y_out.size() % 3 != 0) {
    throw ShapeError("output length " + std::to_string(y_out.size()) + " is not divisible by 3");
  }
  const std::size_t h = y_out.size() / 3;
  std::vector<double> sum(h);
  for (std::size_t i = 0; i < h; ++i) sum[i] = y_out[i] + y_out[h + i] + y_out[2 * h + i];
  return revin_denormalize(sum, state);
}

Tensor recombine_and_denormalize(const Tensor& y_out, const RevInState& state, const Tensor& gamma,
                                 const Tensor& beta) {
  if (y_out.rank() != 1 || y_out.numel() % 3 != 0) {
    throw ShapeError("output of shape " + shape_string(y_out.shape()) + " is not a vector divisible by 3");
  }
  const std::size_t h = y_out.numel() / 3;
  Tensor s = slice(y_out, 0, 0, h) + slice(y_out, 0, h, h) + slice(y_out, 0, 2 * h, h);
  return add_scalar(scale((s - beta) / gamma, state.stddev()), state.mean);
}

ForecastModel::ForecastModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.backbone.embed_dim;
  const std::size_t width = 3 * config_.patch.length;

  EmbeddingMatrix e;
  if (config_.embedding_path.empty()) {
    e = EmbeddingMatrix::synthetic(config_.vocab_size, d, config_.vocab_clusters, config_.seed + 1);
  } else {
    e = EmbeddingMatrix::load(config_.embedding_path);
    if (e.dim() != d || e.vocab_size() != config_.vocab_size) {
      throw ValidationError("embedding file " + config_.embedding_path + " has shape " +
                            shape_string(e.values().shape()) + ", expected [" + std::to_string(config_.vocab_size) +
                            "," + std::to_string(d) + "]");
    }
  }
  bank_ = AnchorBank(std::move(e), config_.n_anchors, config_.seed + 2);
  backbone_ = Backbone::init(config_.backbone, config_.seed);
  backbone_.apply_policy(config_.policy);

  std::mt19937_64 rng(config_.seed + 3);
  proj_weight_ = normal_parameter({width, d}, rng, 1.0 / std::sqrt(static_cast<double>(width)));
  proj_bias_ = Tensor::parameter({d}, std::vector<double>(d, 0.0));
  const std::size_t rows = config_.include_prompt_in_output ? config_.sequence_length() : config_.n_patches();
  const std::size_t out = 3 * config_.window.horizon;
  out_weight_ = normal_parameter({rows * d, out}, rng, 0.02);
  out_bias_ = Tensor::parameter({out}, std::vector<double>(out, 0.0));
  revin_gamma_ = Tensor::parameter({config_.n_channels}, std::vector<double>(config_.n_channels, 1.0));
  revin_beta_ = Tensor::parameter({config_.n_channels}, std::vector<double>(config_.n_channels, 0.0));
}

std::vector<NamedParameter> ForecastModel::named_tensors() const {
  std::vector<NamedParameter> out{{"g.weight", proj_weight_},
                                  {"g.bias", proj_bias_},
                                  {"anchor.E", bank_.embedding().values()},
                                  {"anchor.map", bank_.map_weights()}};
  for (const auto& p : backbone_.named_parameters()) out.push_back({"backbone." + p.name, p.tensor});
  out.push_back({"head.weight", out_weight_});
  out.push_back({"head.bias", out_bias_});
  out.push_back({"revin.gamma", revin_gamma_});
  out.push_back({"revin.beta", revin_beta_});
  return out;
}

std::vector<NamedParameter> ForecastModel::parameters() const {
  std::vector<NamedParameter> out;
  for (auto& p : named_tensors()) {
    if (p.tensor.requires_grad()) out.push_back(std::move(p));
  }
  return out;
}

void ForecastModel::load_tensors(const std::vector<NamedTensor>& records) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& r : records) {
    if (!by_name.emplace(r.name, &r.tensor).second) throw LoadError("duplicate tensor '" + r.name + "'");
  }
  auto own = named_tensors();
  for (const auto& p : own) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw LoadError("checkpoint is missing tensor '" + p.name + "'");
    if (it->second->shape() != p.tensor.shape()) {
      throw LoadError("tensor '" + p.name + "' has shape " + shape_string(it->second->shape()) +
                      ", configuration expects " + shape_string(p.tensor.shape()));
    }
  }
  if (by_name.size() != own.size()) {
    for (const auto& r : records) {
      const bool known = std::any_of(own.begin(), own.end(), [&](const NamedParameter& p) { return p.name == r.name; });
      if (!known) throw LoadError("checkpoint has unexpected tensor '" + r.name + "'");
    }
  }
  for (auto& p : own) {
    Tensor t = p.tensor;
    const auto src = by_name.at(p.name)->data();
    // E is frozen but still a leaf, so it can be written in place.
    auto dst = t.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void ForecastModel::check_input(std::span<const double> x, std::size_t channel) const {
  if (x.size() != config_.window.lookback) {
    throw ShapeError("input window has " + std::to_string(x.size()) + " steps, expected " +
                     std::to_string(config_.window.lookback));
  }
  if (channel >= config_.n_channels) {
    throw ValidationError("channel " + std::to_string(channel) + " out of range for " +
                          std::to_string(config_.n_channels) + " channels");
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw ValidationError("input window contains a non-finite value");
  }
}

namespace {

struct UnitToken {
  Matrix values;  // meta-token of the z-scored window (gamma 1, beta 0)
  RevInState stats;
};

UnitToken unit_meta_token(std::span<const double> x, const ModelConfig& c) {
  RevInResult z = revin_normalize(x, {1.0, 0.0, c.revin_eps});
  Matrix tre, sea, res;
  if (c.decomposition_enabled) {
    DecompositionResult d = decompose(z.values, c.decomposition);
    tre = patch(d.trend, c.patch);
    sea = patch(d.seasonal, c.patch);
    res = patch(d.residual, c.patch);
  } else {
    tre = patch(z.values, c.patch);
    sea = Matrix(tre.rows, tre.cols);
    res = sea;
  }
  MetaToken m = build_meta_token(tre, sea, res, z.state);
  return {std::move(m.values), z.state};
}

}  // namespace

// Decomposition commutes with the affine map gamma*z + beta (the constant goes
// entirely to the trend), so the token of the RevIN output is
// gamma * token(z) + beta on the trend block.
Embedding ForecastModel::tokenize_and_embed(std::span<const double> x, std::size_t channel) const {
  check_input(x, channel);
  UnitToken u = unit_meta_token(x, config_);
  const std::size_t rows = u.values.rows;
  const std::size_t cols = u.values.cols;
  const std::size_t lp = config_.patch.length;
  std::vector<double> mask(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < lp; ++j) mask[r * cols + j] = 1.0;

  Embedding out;
  out.gamma = index_select(revin_gamma_, {channel});
  out.beta = index_select(revin_beta_, {channel});
  Tensor meta = Tensor::from({rows, cols}, std::move(u.values.data)) * out.gamma +
                Tensor::from({rows, cols}, std::move(mask)) * out.beta;
  out.ts_embed = matmul(meta, proj_weight_) + proj_bias_;
  out.revin = u.stats;
  out.revin.gamma = out.gamma.item();
  out.revin.beta = out.beta.item();
  return out;
}

MetaToken ForecastModel::meta_token(std::span<const double> x, std::size_t channel) const {
  check_input(x, channel);
  UnitToken u = unit_meta_token(x, config_);
  const double g = revin_gamma_[channel];
  const double b = revin_beta_[channel];
  MetaToken m;
  m.values = std::move(u.values);
  for (std::size_t r = 0; r < m.values.rows; ++r) {
    for (std::size_t j = 0; j < m.values.cols; ++j) {
      double& v = m.values(r, j);
      v = g * v + (j < config_.patch.length ? b : 0.0);
    }
  }
  m.n_patches = m.values.rows;
  m.revin = u.stats;
  m.revin.gamma = g;
  m.revin.beta = b;
  return m;
}

Forecast ForecastModel::forward_forecast(std::span<const double> x, std::size_t channel, const Tensor* anchors,
                                         bool training) const {
  Embedding emb = tokenize_and_embed(x, channel);
  Forecast f;
  f.ts_embed = emb.ts_embed;
  f.revin = emb.revin;
  const std::size_t k = config_.prompt_k;
  const std::size_t np = config_.n_patches();
  const std::size_t d = config_.backbone.embed_dim;
  Tensor z = emb.ts_embed;
  if (k > 0) {
    Tensor a = anchors != nullptr ? *anchors : bank_.derive();
    bool degenerate = false;
    Tensor scores = anchor_scores(emb.ts_embed.detach(), a.detach(), config_.pooling, &degenerate);
    f.selection = select_topk(scores.data(), k);
    f.selection.degenerate = degenerate;
    z = prefix_concat(index_select(a, f.selection.indices), emb.ts_embed);
  }
  f.prompted = z;
  Tensor h = backbone_.forward(z, training);
  if (!config_.include_prompt_in_output && k > 0) h = slice(h, 0, k, np);
  Tensor flat = reshape(h, {1, h.dim(0) * d});
  f.components = reshape(matmul(flat, out_weight_) + out_bias_, {3 * config_.window.horizon});
  f.yhat = recombine_and_denormalize(f.components, f.revin, emb.gamma, emb.beta);
  return f;
}

std::vector<double> ForecastModel::predict(std::span<const double> x, std::size_t channel) const {
  Tape::Scope no_record(nullptr);
  return forward_forecast(x, channel).yhat.to_vector();
}

Tensor ForecastModel::joint_loss(std::span<const Window* const> batch, double lambda, LossParts* parts) const {
  if (batch.empty()) throw ValidationError("joint_loss: empty batch");
  if (!(lambda >= 0.0)) throw ValidationError("joint_loss: lambda must be >= 0");
  const bool prompting = config_.prompt_k > 0;
  Tensor a = prompting ? bank_.derive() : Tensor();
  Tensor mse_total;
  Tensor align_total;
  for (const Window* w : batch) {
    if (w->target.size() != config_.window.horizon) {
      throw ShapeError("target has " + std::to_string(w->target.size()) + " steps, expected " +
                       std::to_string(config_.window.horizon));
    }
    Forecast f = forward_forecast(w->input, w->channel, prompting ? &a : nullptr, true);
    Tensor err = mean(square(f.yhat - Tensor::from({w->target.size()}, w->target)));
    mse_total = mse_total.defined() ? mse_total + err : err;
    if (prompting && (lambda > 0.0 || parts != nullptr)) {
      Tensor al = alignment_term(f.ts_embed, f.selection, a, config_.pooling);
      align_total = align_total.defined() ? align_total + al : al;
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  Tensor loss = scale(mse_total, inv);
  if (parts != nullptr) {
    parts->mse = loss.item();
    parts->alignment = align_total.defined() ? align_total.item() * inv : 0.0;
  }
  if (align_total.defined() && lambda > 0.0) loss = loss - scale(align_total, lambda * inv);
  return loss;
}

Tensor ForecastModel::joint_loss(std::span<const Window> batch, double lambda, LossParts* parts) const {
  std::vector<const Window*> ptrs;
  ptrs.reserve(batch.size());
  for (const auto& w : batch) ptrs.push_back(&w);
  return joint_loss(std::span<const Window* const>(ptrs), lambda, parts);
}

ForecastModel ForecastModel::clone() const {
  ForecastModel m;
  m.config_ = config_;
  m.proj_weight_ = proj_weight_.clone();
  m.proj_bias_ = proj_bias_.clone();
  m.bank_ = bank_.clone();
  m.backbone_ = backbone_.clone();
  m.out_weight_ = out_weight_.clone();
  m.out_bias_ = out_bias_.clone();
  m.revin_gamma_ = revin_gamma_.clone();
  m.revin_beta_ = revin_beta_.clone();
  return m;
}

}  // namespace s2ip
