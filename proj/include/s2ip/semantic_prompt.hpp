#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "s2ip/tensor.hpp"

namespace s2ip {

// Frozen word-embedding table E (V x D).
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  explicit EmbeddingMatrix(Tensor values);

  // Gaussian mixture: `clusters` centres ~ N(0, 1), members = centre + N(0, spread^2).
  static EmbeddingMatrix synthetic(std::size_t vocab_size, std::size_t dim, std::size_t clusters, std::uint64_t seed,
                                   double spread = 0.3);
  // Named-tensor file holding a single record "E".
  static EmbeddingMatrix load(const std::string& path);
  void save(const std::string& path) const;

  const Tensor& values() const { return values_; }
  std::size_t vocab_size() const { return values_.dim(0); }
  std::size_t dim() const { return values_.dim(1); }

 private:
  Tensor values_;
};

// anchors = map_weights . E; differentiable in map_weights.
Tensor derive_anchors(const EmbeddingMatrix& embedding, const Tensor& map_weights);

// Learned compression of the vocabulary into V' anchors.
class AnchorBank {
 public:
  AnchorBank() = default;
  // Requires 1 <= n_anchors <= V/2. Each row starts as a one-hot on a distinct
  // random vocabulary item plus N(0, 0.01^2) noise.
  AnchorBank(EmbeddingMatrix embedding, std::size_t n_anchors, std::uint64_t seed);
  AnchorBank(EmbeddingMatrix embedding, Tensor map_weights);

  const EmbeddingMatrix& embedding() const { return embedding_; }
  const Tensor& map_weights() const { return map_weights_; }
  Tensor& map_weights() { return map_weights_; }
  std::size_t n_anchors() const { return map_weights_.dim(0); }

  Tensor derive() const { return derive_anchors(embedding_, map_weights_); }
  AnchorBank clone() const;

 private:
  EmbeddingMatrix embedding_;
  Tensor map_weights_;
};

enum class Pooling {
  mean,       // cosine against the mean of the patch embeddings
  per_patch,  // mean over patches of per-patch cosines
};

std::string to_string(Pooling p);
Pooling parse_pooling(const std::string& s);

// Norms below this are treated as zero; the score is then 0.
inline constexpr double kDegenerateNorm = 1e-12;

struct ScoreResult {
  double score = 0.0;
  bool degenerate = false;
};

// Cosine between the row-mean of `ts_embed` (rows x dim, row-major) and `anchor`.
ScoreResult pool_and_score(std::span<const double> ts_embed, std::size_t rows, std::span<const double> anchor);

// Differentiable scores of every anchor against `ts_embed` (N_P x D) -> (V').
// Degenerate entries are constant zeros; `degenerate` reports whether any occurred.
Tensor anchor_scores(const Tensor& ts_embed, const Tensor& anchors, Pooling pooling = Pooling::mean,
                     bool* degenerate = nullptr);

struct PromptSelection {
  std::vector<std::size_t> indices;  // descending score, ties to the lower index
  std::vector<double> scores;
  std::size_t k = 0;
  bool degenerate = false;
};

// Top-k of plain scores with the tie rule above.
PromptSelection select_topk(std::span<const double> scores, std::size_t k);

PromptSelection retrieve_topk(const Tensor& ts_embed, const Tensor& anchors, std::size_t k,
                              Pooling pooling = Pooling::mean);
PromptSelection retrieve_topk(const Tensor& ts_embed, const AnchorBank& bank, std::size_t k,
                              Pooling pooling = Pooling::mean);

// [selected anchors ; ts_embed] -> (K + N_P) x D. K = 0 returns ts_embed.
Tensor prefix_concat(const Tensor& selected_anchors, const Tensor& ts_embed);

// Sum of the selected anchors' scores; differentiable in ts_embed and anchors.
Tensor alignment_term(const Tensor& ts_embed, const PromptSelection& selection, const Tensor& anchors,
                      Pooling pooling = Pooling::mean);

}  // namespace s2ip
