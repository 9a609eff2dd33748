#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "s2ip/errors.hpp"
#include "s2ip/training.hpp"

using namespace s2ip;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.window = {32, 8, 4};
  c.patch = {8, 4};
  c.decomposition.period = 8;
  c.decomposition.trend_window = 9;
  c.backbone.embed_dim = 16;
  c.backbone.n_layers = 1;
  c.backbone.n_heads = 2;
  c.backbone.max_seq_len = 16;
  c.vocab_size = 40;
  c.n_anchors = 8;
  c.prompt_k = 2;
  c.n_channels = 2;
  return c;
}

SeriesFrame sine_frame(std::size_t length) {
  std::vector<std::int64_t> ts(length);
  std::vector<double> v(length * 2);
  for (std::size_t t = 0; t < length; ++t) {
    ts[t] = static_cast<std::int64_t>(t);
    for (std::size_t c = 0; c < 2; ++c) {
      const double phase = static_cast<double>(c) * M_PI / 3.0;
      v[t * 2 + c] = 0.01 * static_cast<double>(t) + std::sin(2.0 * M_PI * static_cast<double>(t) / 8.0 + phase) +
                     0.1 * std::sin(0.37 * static_cast<double>(t * (c + 1)));
    }
  }
  return SeriesFrame(ts, v, {"a", "b"});
}

struct Data {
  std::vector<Window> train;
  std::vector<Window> val;
};

Data make_data() {
  SeriesFrame f = sine_frame(200);
  SplitResult s = chronological_split(f, {0.7, 0.3, 0.0, std::nullopt});
  WindowSpec w = small_config().window;
  return {windows(s.train, w), windows(s.val, w)};
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.learning_rate = 3e-3;
  return t;
}

std::vector<std::vector<double>> values(const ForecastModel& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.named_tensors()) out.push_back(p.tensor.to_vector());
  return out;
}

}  // namespace

TEST_CASE("first adam step on a scalar") {
  Tensor w = Tensor::parameter({1}, {2.0});
  w.mutable_grad()[0] = 1.0;
  std::vector<NamedParameter> params{{"w", w}};
  AdamState state;
  TrainConfig c;
  c.learning_rate = 0.1;
  adam_step(params, state, c);
  CHECK(w[0] - 2.0 == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK_FALSE(w.has_grad());
  CHECK(state.step == 1);

  // hand-evaluated second step with g = -0.5
  w.mutable_grad()[0] = -0.5;
  const double before = w[0];
  adam_step(params, state, c);
  const double m = 0.9 * 0.1 + 0.1 * -0.5;
  const double v = 0.999 * 0.001 + 0.001 * 0.25;
  const double m_hat = m / (1 - 0.81), v_hat = v / (1 - 0.999 * 0.999);
  CHECK(w[0] - before == doctest::Approx(-0.1 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("zero gradients leave parameters unchanged") {
  Tensor w = Tensor::parameter({3}, {1.0, -2.0, 3.0});
  std::fill(w.mutable_grad().begin(), w.mutable_grad().end(), 0.0);
  std::vector<NamedParameter> params{{"w", w}};
  AdamState state;
  adam_step(params, state, {});
  CHECK(w.to_vector() == std::vector<double>{1.0, -2.0, 3.0});
  adam_step(params, state, {});
  CHECK(w.to_vector() == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("non-finite gradients abort the step") {
  Tensor a = Tensor::parameter({2}, {1.0, 1.0});
  Tensor b = Tensor::parameter({1}, {5.0});
  a.mutable_grad()[0] = 0.5;
  b.mutable_grad()[0] = std::numeric_limits<double>::infinity();
  std::vector<NamedParameter> params{{"a", a}, {"bad.one", b}};
  AdamState state;
  try {
    adam_step(params, state, {});
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("bad.one") != std::string::npos);
  }
  CHECK(a.to_vector() == std::vector<double>{1.0, 1.0});
  CHECK(b[0] == 5.0);
}

TEST_CASE("gradient clipping") {
  Tensor a = Tensor::parameter({2}, {0.0, 0.0});
  a.mutable_grad()[0] = 3.0;
  a.mutable_grad()[1] = 4.0;
  std::vector<NamedParameter> params{{"a", a}};
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(a.grad()[1] == doctest::Approx(0.8));
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("training is deterministic in the seed") {
  Data d = make_data();
  ForecastModel a(small_config()), b(small_config());
  TrainReport ra = train(a, d.train, d.val, quick(3));
  TrainReport rb = train(b, d.train, d.val, quick(3));
  CHECK(ra.train_loss == rb.train_loss);
  CHECK(ra.val_mse == rb.val_mse);
  CHECK(values(a) == values(b));

  ForecastModel c(small_config());
  TrainConfig other = quick(3);
  other.seed = 99;
  CHECK(train(c, d.train, d.val, other).train_loss != ra.train_loss);
}

TEST_CASE("frozen tensors are bit-identical after training") {
  Data d = make_data();
  ForecastModel m(small_config());
  std::vector<std::pair<std::string, std::vector<double>>> frozen;
  for (const auto& p : m.named_tensors())
    if (!p.tensor.requires_grad()) frozen.push_back({p.name, p.tensor.to_vector()});
  CHECK(frozen.size() == 1 + 8);  // E plus four attention and four feed-forward tensors
  auto before = values(m);
  train(m, d.train, d.val, quick(2));
  std::size_t i = 0;
  for (const auto& p : m.named_tensors()) {
    if (p.tensor.requires_grad()) continue;
    CHECK(p.name == frozen[i].first);
    CHECK(p.tensor.to_vector() == frozen[i].second);
    ++i;
  }
  CHECK(values(m) != before);
}

TEST_CASE("early stopping counts non-improving epochs") {
  Data d = make_data();
  for (std::size_t patience : {0, 1, 3}) {
    ForecastModel m(small_config());
    TrainConfig t = quick(20);
    t.early_stop_patience = patience;
    t.min_delta = 1e9;  // nothing after the first epoch counts as an improvement
    TrainReport r = train(m, d.train, d.val, t);
    CHECK(r.epochs_run() == patience + 2);
    CHECK(r.best_epoch == 1);
    CHECK(r.val_mse.size() == r.epochs_run());
  }
}

TEST_CASE("early stopping agrees with a replay of the validation curve") {
  Data d = make_data();
  ForecastModel m(small_config());
  TrainConfig t = quick(25);
  t.learning_rate = 2e-2;
  t.early_stop_patience = 2;
  TrainReport r = train(m, d.train, d.val, t);
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad = 0, best_epoch = 0, stop = r.val_mse.size();
  for (std::size_t e = 0; e < r.val_mse.size(); ++e) {
    if (r.val_mse[e] < best) {
      best = r.val_mse[e];
      best_epoch = e + 1;
      bad = 0;
    } else if (++bad > t.early_stop_patience) {
      stop = e + 1;
      break;
    }
  }
  CHECK(stop == r.epochs_run());
  CHECK(best_epoch == r.best_epoch);
  CHECK(mean_squared_error(m, d.val) == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("empty validation set runs every epoch") {
  Data d = make_data();
  ForecastModel m(small_config());
  TrainConfig t = quick(4);
  t.early_stop_patience = 0;
  TrainReport r = train(m, d.train, {}, t);
  CHECK(r.epochs_run() == 4);
  CHECK(r.val_mse.empty());
  CHECK(r.best_epoch == 0);
  CHECK(r.steps == 4 * ((d.train.size() + 7) / 8));
}

TEST_CASE("max steps caps training") {
  Data d = make_data();
  ForecastModel m(small_config());
  TrainConfig t = quick(10);
  t.max_steps = 3;
  TrainReport r = train(m, d.train, {}, t);
  CHECK(r.steps == 3);
  CHECK(r.epochs_run() == 1);
}

TEST_CASE("non-finite loss aborts and keeps the last good parameters") {
  Data d = make_data();
  ForecastModel m(small_config());
  auto before = values(m);
  d.train[3].target[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(train(m, d.train, d.val, quick(2)), NumericError);
  CHECK(values(m) == before);
}

TEST_CASE("lambda 0 first-step loss equals the plain mse") {
  Data d = make_data();
  ModelConfig c = small_config();
  c.lambda = 0.0;
  ForecastModel m(c);
  const double plain = mean_squared_error(m, d.train);
  TrainConfig t = quick(1);
  t.batch_size = d.train.size();
  t.max_steps = 1;
  TrainReport r = train(m, d.train, {}, t);
  CHECK(r.train_loss[0] == doctest::Approx(plain).epsilon(1e-12));
  CHECK(r.train_mse[0] == doctest::Approx(plain).epsilon(1e-12));
}

TEST_CASE("train report csv") {
  TrainReport r;
  r.train_loss = {1.5, 0.75};
  r.train_mse = {1.6, 0.8};
  r.val_mse = {2.0, 1.0};
  const auto path = (std::filesystem::temp_directory_path() / "s2ip_report.csv").string();
  r.write_csv(path);
  std::ifstream in(path);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "epoch,train_loss,val_mse,train_mse");
  CHECK(first == "1,1.5,2,1.6000000000000001");
  std::filesystem::remove(path);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  t.learning_rate = 0.0;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  t = TrainConfig{};
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ValidationError);
  ForecastModel m(small_config());
  CHECK_THROWS_AS(train(m, {}, {}, TrainConfig{}), ValidationError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  Data d = make_data();
  ModelConfig c = small_config();
  c.lambda = 0.03;
  ForecastModel m(c);
  train(m, d.train, {}, quick(1));
  const auto path = (std::filesystem::temp_directory_path() / "s2ip_model.ckpt").string();
  save_checkpoint(m, path);
  ForecastModel back = load_checkpoint(path);
  CHECK(back.config() == m.config());
  CHECK(values(back) == values(m));
  for (const auto& w : d.val) CHECK(back.predict(w.input, w.channel) == m.predict(w.input, w.channel));
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint load errors") {
  ForecastModel m(small_config());
  const auto dir = std::filesystem::temp_directory_path();
  const auto path = (dir / "s2ip_bad.ckpt").string();
  save_checkpoint(m, path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
  };

  write(bytes.substr(0, bytes.size() - 100));
  CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  write(bytes.substr(0, 3));
  CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  std::string other = bytes;
  other[4] = '9';
  write(other);
  CHECK_THROWS_AS(load_checkpoint(path), LoadError);
  CHECK_THROWS_AS(load_checkpoint((dir / "s2ip_missing.ckpt").string()), LoadError);

  // header says D=16 while the tensors are for D=8
  ModelConfig narrow = small_config();
  narrow.backbone.embed_dim = 8;
  ForecastModel n(narrow);
  std::ostringstream mixed;
  mixed.write(bytes.data(), 6);
  const std::string text = m.config().to_text();
  write_u64(mixed, text.size());
  mixed << text;
  std::vector<NamedTensor> records;
  for (const auto& p : n.named_tensors()) records.push_back({p.name, p.tensor});
  write_named_tensors(mixed, records);
  write(mixed.str());
  try {
    load_checkpoint(path);
    FAIL("expected a load error");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("g.weight") != std::string::npos);
  }
  std::filesystem::remove(path);
}
