#include "s2ip/semantic_prompt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "s2ip/errors.hpp"

namespace s2ip {

EmbeddingMatrix::EmbeddingMatrix(Tensor values) : values_(std::move(values)) {
  if (values_.rank() != 2 || values_.dim(0) < 1 || values_.dim(1) < 1) {
    throw ShapeError("embedding matrix must be V x D with V, D >= 1");
  }
  for (double v : values_.data()) {
    if (!std::isfinite(v)) throw ValidationError("embedding matrix contains a non-finite entry");
  }
  values_.set_requires_grad(false);
}

EmbeddingMatrix EmbeddingMatrix::synthetic(std::size_t vocab_size, std::size_t dim, std::size_t clusters,
                                           std::uint64_t seed, double spread) {
  if (vocab_size == 0 || dim == 0 || clusters == 0) throw ValidationError("synthetic vocabulary sizes must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<double> centres(clusters * dim);
  for (double& c : centres) c = unit(rng);
  std::vector<double> values(vocab_size * dim);
  for (std::size_t v = 0; v < vocab_size; ++v) {
    const std::size_t c = v % clusters;
    for (std::size_t j = 0; j < dim; ++j) values[v * dim + j] = centres[c * dim + j] + spread * unit(rng);
  }
  return EmbeddingMatrix(Tensor::from({vocab_size, dim}, std::move(values)));
}

EmbeddingMatrix EmbeddingMatrix::load(const std::string& path) {
  auto records = load_named_tensors(path);
  for (auto& r : records) {
    if (r.name == "E") return EmbeddingMatrix(r.tensor);
  }
  throw LoadError("embedding file " + path + " has no record named 'E'");
}

void EmbeddingMatrix::save(const std::string& path) const { save_named_tensors(path, {{"E", values_}}); }

Tensor derive_anchors(const EmbeddingMatrix& embedding, const Tensor& map_weights) {
  if (map_weights.rank() != 2 || map_weights.dim(1) != embedding.vocab_size()) {
    throw ShapeError("anchor map of shape " + shape_string(map_weights.shape()) + " does not match vocabulary size " +
                     std::to_string(embedding.vocab_size()));
  }
  return matmul(map_weights, embedding.values());
}

AnchorBank::AnchorBank(EmbeddingMatrix embedding, std::size_t n_anchors, std::uint64_t seed)
    : embedding_(std::move(embedding)) {
  const std::size_t vocab = embedding_.vocab_size();
  if (n_anchors < 1 || n_anchors > vocab / 2) {
    throw ValidationError("model.n_anchors (" + std::to_string(n_anchors) + ") must lie in [1, V/2] with V = " +
                          std::to_string(vocab));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(vocab);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::normal_distribution<double> noise(0.0, 0.01);
  std::vector<double> w(n_anchors * vocab);
  for (double& x : w) x = noise(rng);
  for (std::size_t m = 0; m < n_anchors; ++m) w[m * vocab + order[m]] += 1.0;
  map_weights_ = Tensor::parameter({n_anchors, vocab}, std::move(w));
}

AnchorBank::AnchorBank(EmbeddingMatrix embedding, Tensor map_weights)
    : embedding_(std::move(embedding)), map_weights_(std::move(map_weights)) {
  if (map_weights_.rank() != 2 || map_weights_.dim(1) != embedding_.vocab_size()) {
    throw ShapeError("anchor map does not match vocabulary size");
  }
}

AnchorBank AnchorBank::clone() const {
  AnchorBank b;
  b.embedding_ = embedding_;  // frozen, safe to share
  b.map_weights_ = map_weights_.clone();
  return b;
}

std::string to_string(Pooling p) { return p == Pooling::per_patch ? "per_patch" : "mean"; }

Pooling parse_pooling(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "per_patch") return Pooling::per_patch;
  throw ValidationError("unknown pooling '" + s + "' (expected mean or per_patch)");
}

ScoreResult pool_and_score(std::span<const double> ts_embed, std::size_t rows, std::span<const double> anchor) {
  const std::size_t d = anchor.size();
  if (rows == 0 || ts_embed.size() != rows * d) throw ShapeError("pool_and_score: embedding width does not match anchor");
  std::vector<double> pooled(d, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) pooled[j] += ts_embed[r * d + j];
  for (double& p : pooled) p /= static_cast<double>(rows);
  double dot = 0.0, np = 0.0, na = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    dot += pooled[j] * anchor[j];
    np += pooled[j] * pooled[j];
    na += anchor[j] * anchor[j];
  }
  np = std::sqrt(np);
  na = std::sqrt(na);
  if (np < kDegenerateNorm || na < kDegenerateNorm) return {0.0, true};
  return {std::clamp(dot / (np * na), -1.0, 1.0), false};
}

namespace {

// Row norms of a (R x D) tensor, with rows below the degeneracy threshold
// replaced by 1 so the division is finite; `mask` is 0 for those rows.
Tensor safe_row_norms(const Tensor& m, std::vector<double>& mask) {
  Tensor norms = sqrt(sum_axis(square(m), 1));
  const auto nv = norms.data();
  mask.assign(nv.size(), 1.0);
  std::vector<double> pad(nv.size(), 0.0);
  bool any = false;
  for (std::size_t i = 0; i < nv.size(); ++i) {
    if (nv[i] < kDegenerateNorm) {
      mask[i] = 0.0;
      pad[i] = 1.0;
      any = true;
    }
  }
  if (!any) return norms;
  return norms + Tensor::from(norms.shape(), std::move(pad));
}

}  // namespace

Tensor anchor_scores(const Tensor& ts_embed, const Tensor& anchors, Pooling pooling, bool* degenerate) {
  if (ts_embed.rank() != 2 || anchors.rank() != 2 || ts_embed.dim(1) != anchors.dim(1)) {
    throw ShapeError("anchor_scores: shapes " + shape_string(ts_embed.shape()) + " and " +
                     shape_string(anchors.shape()) + " do not agree");
  }
  const std::size_t n_anchors = anchors.dim(0);
  const std::size_t d = anchors.dim(1);
  std::vector<double> anchor_mask;
  Tensor anchor_norms = safe_row_norms(anchors, anchor_mask);
  Tensor scores;
  std::vector<double> mask = anchor_mask;
  if (pooling == Pooling::mean) {
    Tensor pooled = reshape(mean_axis(ts_embed, 0), {1, d});
    std::vector<double> pooled_mask;
    Tensor pooled_norm = safe_row_norms(pooled, pooled_mask);
    if (pooled_mask[0] == 0.0) std::fill(mask.begin(), mask.end(), 0.0);
    Tensor dots = reshape(matmul(anchors, transpose(pooled)), {n_anchors});
    scores = dots / anchor_norms / pooled_norm;
  } else {
    std::vector<double> row_mask;
    Tensor row_norms = safe_row_norms(ts_embed, row_mask);
    Tensor cos = matmul(ts_embed, transpose(anchors)) / anchor_norms;  // N_P x V'
    cos = transpose(cos) / row_norms;                                    // V' x N_P
    cos = cos * Tensor::from({row_mask.size()}, row_mask);
    scores = mean_axis(cos, 1);
    if (std::all_of(row_mask.begin(), row_mask.end(), [](double m) { return m == 0.0; })) {
      std::fill(mask.begin(), mask.end(), 0.0);
    }
  }
  const bool any_degenerate = std::any_of(mask.begin(), mask.end(), [](double m) { return m == 0.0; });
  if (degenerate != nullptr) *degenerate = any_degenerate;
  if (any_degenerate) scores = scores * Tensor::from({n_anchors}, std::move(mask));
  return scores;
}

PromptSelection select_topk(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw ValidationError("prompt k (" + std::to_string(k) + ") must lie in [1, " + std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  PromptSelection sel;
  sel.k = k;
  sel.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  for (std::size_t i : sel.indices) sel.scores.push_back(scores[i]);
  return sel;
}

PromptSelection retrieve_topk(const Tensor& ts_embed, const Tensor& anchors, std::size_t k, Pooling pooling) {
  if (k < 1 || k > anchors.dim(0)) {
    throw ValidationError("prompt k (" + std::to_string(k) + ") must lie in [1, " + std::to_string(anchors.dim(0)) +
                          "]");
  }
  bool degenerate = false;
  Tensor scores = anchor_scores(ts_embed.detach(), anchors.detach(), pooling, &degenerate);
  PromptSelection sel = select_topk(scores.data(), k);
  sel.degenerate = degenerate;
  return sel;
}

PromptSelection retrieve_topk(const Tensor& ts_embed, const AnchorBank& bank, std::size_t k, Pooling pooling) {
  return retrieve_topk(ts_embed, bank.derive().detach(), k, pooling);
}

Tensor prefix_concat(const Tensor& selected_anchors, const Tensor& ts_embed) {
  if (!selected_anchors.defined() || selected_anchors.numel() == 0) return ts_embed;
  if (selected_anchors.rank() != 2 || ts_embed.rank() != 2 || selected_anchors.dim(1) != ts_embed.dim(1)) {
    throw ShapeError("prefix_concat: anchors " + shape_string(selected_anchors.shape()) + " and embeddings " +
                     shape_string(ts_embed.shape()) + " differ in width");
  }
  return concat({selected_anchors, ts_embed}, 0);
}

Tensor alignment_term(const Tensor& ts_embed, const PromptSelection& selection, const Tensor& anchors,
                      Pooling pooling) {
  if (selection.indices.empty()) return Tensor::scalar(0.0);
  Tensor chosen = index_select(anchors, selection.indices);
  return sum(anchor_scores(ts_embed, chosen, pooling));
}

}  // namespace s2ip
