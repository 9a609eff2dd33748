#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include "doctest.h"
#include "s2ip/backbone.hpp"
#include "s2ip/errors.hpp"

using namespace s2ip;

namespace {

using Mat = std::vector<std::vector<double>>;

Tensor random_tensor(Shape shape, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  std::size_t count = 1;
  for (auto d : shape) count *= d;
  std::vector<double> v(count);
  for (double& x : v) x = n(rng);
  return Tensor::from(shape, v);
}

Mat to_mat(std::span<const double> v, std::size_t rows, std::size_t cols) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = v[r * cols + c];
  return m;
}

Mat affine(const Mat& x, const Mat& w, std::span<const double> b) {
  Mat out(x.size(), std::vector<double>(w[0].size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w[0].size(); ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < w.size(); ++k) s += x[i][k] * w[k][j];
      out[i][j] = s;
    }
  return out;
}

Mat norm(const Mat& x, std::span<const double> g, std::span<const double> b, double eps) {
  Mat out = x;
  for (auto& row : out) {
    double mu = 0.0, var = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return out;
}

// Plain-loop forward of a single unbatched sequence.
Mat reference_forward(const Backbone& bb, const Mat& input) {
  std::map<std::string, Tensor> p;
  for (const auto& np : bb.named_parameters()) p[np.name] = np.tensor;
  const auto& c = bb.config();
  const std::size_t len = input.size(), d = c.embed_dim, heads = c.n_heads, dh = d / heads, hid = c.ffn_mult * d;
  Mat h = input;
  auto pos = p["pos_embed"].data();
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j < d; ++j) h[i][j] += pos[i * d + j];
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layer." + std::to_string(l) + ".";
    Mat a = norm(h, p[pre + "ln1.gain"].data(), p[pre + "ln1.bias"].data(), c.layer_norm_eps);
    Mat qkv = affine(a, to_mat(p[pre + "attn.qkv.weight"].data(), d, 3 * d), p[pre + "attn.qkv.bias"].data());
    Mat y(len, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < heads; ++hd) {
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> w(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < dh; ++k) s += qkv[i][hd * dh + k] * qkv[j][d + hd * dh + k];
          w[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, w[j]);
        }
        double z = 0.0;
        for (double& v : w) z += (v = std::exp(v - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t k = 0; k < dh; ++k) y[i][hd * dh + k] += w[j] / z * qkv[j][2 * d + hd * dh + k];
      }
    }
    Mat proj = affine(y, to_mat(p[pre + "attn.proj.weight"].data(), d, d), p[pre + "attn.proj.bias"].data());
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < d; ++j) h[i][j] += proj[i][j];
    Mat m = norm(h, p[pre + "ln2.gain"].data(), p[pre + "ln2.bias"].data(), c.layer_norm_eps);
    Mat f = affine(m, to_mat(p[pre + "ffn.fc.weight"].data(), d, hid), p[pre + "ffn.fc.bias"].data());
    for (auto& row : f)
      for (double& v : row) v = 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
    Mat o = affine(f, to_mat(p[pre + "ffn.proj.weight"].data(), hid, d), p[pre + "ffn.proj.bias"].data());
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = 0; j < d; ++j) h[i][j] += o[i][j];
  }
  return norm(h, p["ln_f.gain"].data(), p["ln_f.bias"].data(), c.layer_norm_eps);
}

BackboneConfig small_config() {
  BackboneConfig c;
  c.embed_dim = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 12;
  return c;
}

}  // namespace

TEST_CASE("initialization is deterministic in the seed") {
  BackboneConfig c = small_config();
  Backbone a = Backbone::init(c, 5), b = Backbone::init(c, 5), other = Backbone::init(c, 6);
  Tensor x = random_tensor({6, 8}, 1);
  CHECK(a.forward(x).to_vector() == b.forward(x).to_vector());
  CHECK(a.forward(x).to_vector() != other.forward(x).to_vector());
}

TEST_CASE("parameter count has the closed form") {
  for (std::size_t d : {8, 16, 64, 768}) {
    for (std::size_t layers : {1, 2, 6}) {
      BackboneConfig c;
      c.embed_dim = d;
      c.n_layers = layers;
      c.n_heads = 4;
      c.max_seq_len = 32;
      const std::size_t expected = layers * (12 * d * d + 13 * d) + 2 * d + 32 * d;
      CHECK(Backbone::expected_parameter_count(c) == expected);
      if (d <= 64) CHECK(Backbone::init(c, 1).parameter_count() == expected);
    }
  }
}

TEST_CASE("forward shapes") {
  BackboneConfig c;
  c.max_seq_len = 16;
  Backbone bb = Backbone::init(c, 3);
  CHECK(bb.forward(random_tensor({2, 10, 64}, 2)).shape() == Shape{2, 10, 64});
  CHECK(bb.forward(random_tensor({10, 64}, 2)).shape() == Shape{10, 64});
  CHECK_THROWS_AS(bb.forward(random_tensor({10, 32}, 2)), ShapeError);
  CHECK_THROWS_AS(bb.forward(random_tensor({17, 64}, 2)), ValidationError);
  CHECK_THROWS_AS(bb.forward(random_tensor({64}, 2)), ShapeError);
}

TEST_CASE("forward matches a plain-loop transformer") {
  BackboneConfig c = small_config();
  Backbone bb = Backbone::init(c, 9);
  std::uint64_t seed = 100;
  for (const auto& p : bb.named_parameters()) {
    auto r = random_tensor(p.tensor.shape(), seed++, 0.4);
    Tensor t = p.tensor;
    std::copy(r.data().begin(), r.data().end(), t.mutable_data().begin());
  }
  Tensor x = random_tensor({7, 8}, 4);
  Mat want = reference_forward(bb, to_mat(x.data(), 7, 8));
  auto got = bb.forward(x).to_vector();
  double worst = 0.0;
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 8; ++j) worst = std::max(worst, std::abs(got[i * 8 + j] - want[i][j]));
  CHECK(worst <= 1e-10);
}

TEST_CASE("batched and unbatched forward agree") {
  Backbone bb = Backbone::init(small_config(), 4);
  Tensor x = random_tensor({3, 5, 8}, 8);
  auto batched = bb.forward(x).to_vector();
  for (std::size_t b = 0; b < 3; ++b) {
    auto one = bb.forward(reshape(slice(x, 0, b, 1), {5, 8})).to_vector();
    for (std::size_t i = 0; i < one.size(); ++i) CHECK(one[i] == doctest::Approx(batched[b * 40 + i]).epsilon(1e-12));
  }
}

TEST_CASE("attention is causal") {
  Backbone bb = Backbone::init(small_config(), 4);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t len = 2 + rng() % 10;
    const std::size_t cut = rng() % len;
    Tensor x = random_tensor({len, 8}, rng());
    auto changed = x.to_vector();
    for (std::size_t i = (cut + 1) * 8; i < changed.size(); ++i) changed[i] += 5.0;
    auto a = bb.forward(x).to_vector();
    auto b = bb.forward(Tensor::from({len, 8}, changed)).to_vector();
    for (std::size_t i = 0; i < (cut + 1) * 8; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("trainability policies select the documented groups") {
  Backbone bb = Backbone::init(small_config(), 1);
  auto count = [&](const TrainabilityPolicy& p) {
    std::size_t n = 0;
    for (const auto& t : bb.trainable_parameters(p)) n += t.numel();
    return n;
  };
  const std::size_t d = 8, layers = 2;
  CHECK(count(TrainabilityPolicy::frozen_transformer()) == 12 * d + layers * 4 * d + 2 * d);
  CHECK(count(TrainabilityPolicy::none()) == 0);
  CHECK(count(TrainabilityPolicy::all()) == bb.parameter_count());
  bb.apply_policy(TrainabilityPolicy::frozen_transformer());
  for (const auto& p : bb.named_parameters()) {
    const bool expect = p.group == ParameterGroup::positional || p.group == ParameterGroup::layer_norm;
    CHECK(p.tensor.requires_grad() == expect);
  }
}

TEST_CASE("frozen weights receive no gradient") {
  Backbone bb = Backbone::init(small_config(), 1);
  bb.apply_policy(TrainabilityPolicy::frozen_transformer());
  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = sum(square(bb.forward(random_tensor({4, 8}, 2))));
    tape.backward(loss);
  }
  for (const auto& p : bb.named_parameters()) {
    CAPTURE(p.name);
    if (p.tensor.requires_grad()) {
      CHECK(p.tensor.has_grad());
    } else {
      CHECK_FALSE(p.tensor.has_grad());
    }
  }
}

TEST_CASE("backbone gradients pass a finite-difference check") {
  BackboneConfig c = small_config();
  c.n_layers = 1;
  Backbone bb = Backbone::init(c, 2);
  bb.apply_policy(TrainabilityPolicy::all());
  std::uint64_t seed = 40;
  std::vector<Tensor> params;
  Tensor qkv_bias;
  for (const auto& p : bb.named_parameters()) {
    Tensor t = p.tensor;
    auto r = random_tensor(t.shape(), seed++, 0.3);
    std::copy(r.data().begin(), r.data().end(), t.mutable_data().begin());
    // the key bias shifts every score of a query equally, so its exact gradient is zero
    if (p.name == "layer.0.attn.qkv.bias") qkv_bias = t;
    else params.push_back(t);
  }
  Tensor x = random_tensor({4, 8}, 5);
  Tensor w = random_tensor({4, 8}, 6);
  auto loss = [&] { return sum(bb.forward(x) * w); };
  CHECK(grad_check(loss, params) <= 1e-5);

  qkv_bias.clear_grad();
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(loss());
  }
  auto g = qkv_bias.grad();
  for (std::size_t i = 8; i < 16; ++i) CHECK(std::abs(g[i]) <= 1e-12);
  const double h = 1e-5;
  for (std::size_t i : {0, 3, 16, 23}) {
    auto data = qkv_bias.mutable_data();
    const double keep = data[i];
    data[i] = keep + h;
    const double up = loss().item();
    data[i] = keep - h;
    const double down = loss().item();
    data[i] = keep;
    CHECK(g[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("weight file round trip and mismatch errors") {
  BackboneConfig c = small_config();
  Backbone bb = Backbone::init(c, 11);
  const auto path = (std::filesystem::temp_directory_path() / "s2ip_backbone.bin").string();
  save_named_tensors(path, bb.named_tensors());
  Backbone back = Backbone::load(c, path);
  Tensor x = random_tensor({5, 8}, 3);
  CHECK(back.forward(x).to_vector() == bb.forward(x).to_vector());

  BackboneConfig wide = c;
  wide.embed_dim = 16;
  try {
    Backbone::load(wide, path);
    FAIL("expected a load error");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("pos_embed") != std::string::npos);
  }
  auto records = bb.named_tensors();
  records.pop_back();
  save_named_tensors(path, records);
  try {
    Backbone::load(c, path);
    FAIL("expected a load error");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("ln_f.bias") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("config validation") {
  BackboneConfig c = small_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = small_config();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK_NOTHROW(BackboneConfig::gpt2_small_6().validate());
  CHECK(BackboneConfig::gpt2_small_6().embed_dim == 768);
}

TEST_CASE("dropout only in training mode") {
  BackboneConfig c = small_config();
  c.dropout = 0.5;
  Backbone bb = Backbone::init(c, 1);
  Tensor x = random_tensor({5, 8}, 3);
  CHECK(bb.forward(x).to_vector() == bb.forward(x).to_vector());
  CHECK(bb.forward(x, true).to_vector() != bb.forward(x).to_vector());
}
