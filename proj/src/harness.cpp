#include "s2ip/harness.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>

#include "s2ip/errors.hpp"

namespace s2ip {

namespace fs = std::filesystem;

void SyntheticSpec::validate() const {
  if (length < 2) throw ValidationError("synth.length must be at least 2");
  if (channels < 1) throw ValidationError("synth.channels must be positive");
  if (periods.size() != amplitudes.size()) {
    throw ValidationError("synth.periods and synth.amplitudes must have the same number of entries");
  }
  for (std::size_t p : periods) {
    if (p < 2) throw ValidationError("synth.periods entries must be at least 2");
  }
  if (!(noise >= 0.0)) throw ValidationError("synth.noise must be >= 0");
}

SeriesFrame generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::vector<std::int64_t> ts(spec.length);
  std::vector<double> values(spec.length * spec.channels);
  for (std::size_t t = 0; t < spec.length; ++t) {
    ts[t] = static_cast<std::int64_t>(t);
    for (std::size_t c = 0; c < spec.channels; ++c) {
      double v = spec.slope * static_cast<double>(t);
      for (std::size_t k = 0; k < spec.periods.size(); ++k) {
        const double phase = static_cast<double>(c) * std::numbers::pi / 3.0;
        v += spec.amplitudes[k] *
             std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(spec.periods[k]) + phase);
      }
      values[t * spec.channels + c] = v + spec.noise * unit(rng);
    }
  }
  std::vector<std::string> names;
  for (std::size_t c = 0; c < spec.channels; ++c) names.push_back("ch" + std::to_string(c));
  return SeriesFrame(std::move(ts), std::move(values), std::move(names));
}

namespace {

void bind_u64(ConfigBinder& b, const std::string& key, std::uint64_t& field) {
  b.bind(
      key, [&field] { return std::to_string(field); },
      [&field](const std::string& s) {
        if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
          throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
        }
        field = std::stoull(s);
      });
}

}  // namespace

void RunConfig::bind(ConfigBinder& b) {
  b.bind("data.path", data_path);
  b.bind(
      "data.missing", [this] { return std::string(missing == MissingPolicy::reject ? "reject" : "forward_fill"); },
      [this](const std::string& s) {
        if (s == "reject") {
          missing = MissingPolicy::reject;
        } else if (s == "forward_fill") {
          missing = MissingPolicy::forward_fill;
        } else {
          throw std::invalid_argument("expected reject or forward_fill, got '" + s + "'");
        }
      });
  b.bind("synth.length", synth.length);
  b.bind("synth.channels", synth.channels);
  b.bind("synth.periods", synth.periods);
  b.bind("synth.amplitudes", synth.amplitudes);
  b.bind("synth.slope", synth.slope);
  b.bind("synth.noise", synth.noise);
  bind_u64(b, "synth.seed", synth.seed);
  b.bind("split.train", split.train_fraction);
  b.bind("split.val", split.val_fraction);
  b.bind("split.test", split.test_fraction);
  b.bind(
      "split.few_shot", [this] { return split.few_shot_fraction ? format_double(*split.few_shot_fraction) : "none"; },
      [this](const std::string& s) {
        if (s == "none" || s.empty()) {
          split.few_shot_fraction.reset();
          return;
        }
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("expected a number or none, got '" + s + "'");
        split.few_shot_fraction = v;
      });
  model.bind(b);
  train.bind(b);
  b.bind(
      "metrics.mode", [this] { return to_string(metrics_mode); },
      [this](const std::string& s) { metrics_mode = parse_metrics_mode(s); });
  b.bind("metrics.seasonality", seasonality);
  b.bind("metrics.naive2_z", naive2_z);
  b.bind("metrics.stride", eval_stride);
  b.bind("run.standardize", standardize);
  b.bind("run.out_dir", out_dir);
  b.bind("run.checkpoint", checkpoint);
  b.bind("run.repeats", repeats);
  b.bind("ablate.lambda", ablate_lambda);
  b.bind("ablate.prompt_k", ablate_prompt_k);
  b.bind("ablate.n_anchors", ablate_n_anchors);
  b.bind("ablate.horizons", ablate_horizons);
}

void RunConfig::validate() const {
  synth.validate();
  split.validate();
  model.validate();
  train.validate();
  if (seasonality < 1) throw ValidationError("metrics.seasonality must be positive");
  if (!(naive2_z > 0.0)) throw ValidationError("metrics.naive2_z must be positive");
  if (eval_stride < 1) throw ValidationError("metrics.stride must be positive");
  if (repeats < 1) throw ValidationError("run.repeats must be positive");
  if (out_dir.empty()) throw ValidationError("run.out_dir must not be empty");
  for (double l : ablate_lambda) {
    if (!(l >= 0.0)) throw ValidationError("ablate.lambda entries must be >= 0");
  }
  for (std::size_t h : ablate_horizons) {
    if (h < 1) throw ValidationError("ablate.horizons entries must be positive");
  }
}

std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  ConfigBinder b;
  copy.bind(b);
  return b.serialize();
}

std::string RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? (fs::path(out_dir) / "model.ckpt").string() : checkpoint;
}

void RunConfig::set_seed(std::uint64_t seed) {
  model.seed = seed;
  train.seed = seed;
  synth.seed = seed;
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  ConfigBinder b;
  c.bind(b);
  b.apply(parse_key_values(text));
  c.validate();
  return c;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

std::string to_string(Command c) {
  switch (c) {
    case Command::train:
      return "train";
    case Command::evaluate:
      return "evaluate";
    case Command::forecast:
      return "forecast";
    case Command::ablate:
      return "ablate";
    case Command::gen_data:
      return "gen-data";
    case Command::export_embeddings:
      return "export-embeddings";
  }
  return "?";
}

Command parse_command(const std::string& s) {
  for (Command c : {Command::train, Command::evaluate, Command::forecast, Command::ablate, Command::gen_data,
                    Command::export_embeddings}) {
    if (to_string(c) == s) return c;
  }
  throw ValidationError("unknown command '" + s + "'");
}

SeriesFrame load_frame(const RunConfig& config) {
  if (config.data_path.empty()) return generate_synthetic(config.synth);
  CsvSchema schema;
  schema.missing = config.missing;
  return load_csv(config.data_path, schema);
}

ModelConfig model_config_for(const RunConfig& config, const SeriesFrame& frame) {
  ModelConfig m = config.model;
  m.n_channels = frame.channels();
  m.validate();
  return m;
}

PreparedData prepare_data(const RunConfig& config, const SeriesFrame& frame) {
  const WindowSpec& win = config.model.window;
  PreparedData d;
  SplitResult split = chronological_split(frame, config.split, win);
  d.warnings = split.warnings;
  SeriesFrame train = split.train;
  if (config.split.few_shot_fraction) train = few_shot_truncate(train, *config.split.few_shot_fraction);
  if (train.length() == 0) throw ValidationError("training split is empty");
  d.scaler = config.standardize ? Standardizer::fit(train) : Standardizer::identity(frame.channels());
  d.full = d.scaler.transform(frame);
  d.train = d.scaler.transform(train);
  d.val = d.scaler.transform(split.val);
  d.test = d.scaler.transform(split.test);
  d.train_windows = windows(d.train, win);
  d.val_windows = windows(d.val, win);
  WindowSpec eval_win = win;
  eval_win.stride = config.eval_stride;
  d.test_windows = windows(d.test, eval_win);
  if (d.train_windows.empty()) {
    throw ValidationError("training split of " + std::to_string(d.train.length()) +
                          " rows is shorter than lookback + horizon");
  }
  return d;
}

TrainOutcome train_pipeline(const RunConfig& config) {
  SeriesFrame frame = load_frame(config);
  TrainOutcome out{ForecastModel(model_config_for(config, frame)), {}, prepare_data(config, frame)};
  out.report = train(out.model, out.data.train_windows, out.data.val_windows, config.train);
  return out;
}

Evaluation evaluate_pipeline(const ForecastModel& model, const PreparedData& data, const RunConfig& config) {
  EvaluationOptions opt;
  opt.mode = config.metrics_mode;
  opt.seasonality = config.seasonality;
  opt.naive2.z = config.naive2_z;
  if (config.standardize) opt.inverse = &data.scaler;
  return evaluate_model(model, data.test_windows, opt);
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void accumulate(std::optional<double>& acc, const std::optional<double>& v) {
  if (!v) return;
  acc = acc.value_or(0.0) + *v;
}

AblationRow run_cell(const RunConfig& base, const std::string& cell, const std::string& setting,
                     std::ostream* log) {
  AblationRow row;
  row.cell = cell;
  row.setting = setting;
  row.horizon = base.model.window.horizon;
  MetricReport sum;
  std::size_t smape_n = 0, mape_n = 0, mase_n = 0, owa_n = 0;
  for (std::size_t r = 0; r < base.repeats; ++r) {
    RunConfig c = base;
    c.model.seed = base.model.seed + r;
    c.train.seed = base.train.seed + r;
    TrainOutcome t = train_pipeline(c);
    const MetricReport m = evaluate_pipeline(t.model, t.data, c).report;
    sum.mse += m.mse;
    sum.mae += m.mae;
    accumulate(sum.smape, m.smape);
    accumulate(sum.mape, m.mape);
    accumulate(sum.mase, m.mase);
    accumulate(sum.owa, m.owa);
    smape_n += m.smape ? 1 : 0;
    mape_n += m.mape ? 1 : 0;
    mase_n += m.mase ? 1 : 0;
    owa_n += m.owa ? 1 : 0;
    sum.horizon = m.horizon;
    sum.seasonality = m.seasonality;
    sum.windows = m.windows;
    if (!t.report.train_loss.empty()) row.final_train_loss += t.report.train_loss.back();
  }
  const double n = static_cast<double>(base.repeats);
  sum.mse /= n;
  sum.mae /= n;
  if (sum.smape) *sum.smape /= static_cast<double>(smape_n);
  if (sum.mape) *sum.mape /= static_cast<double>(mape_n);
  if (sum.mase) *sum.mase /= static_cast<double>(mase_n);
  if (sum.owa) *sum.owa /= static_cast<double>(owa_n);
  row.metrics = sum;
  row.final_train_loss /= n;
  if (log != nullptr) {
    *log << "ablate " << cell << '=' << setting << " horizon=" << row.horizon << " mse=" << sum.mse
         << " mae=" << sum.mae << '\n';
  }
  return row;
}

}  // namespace

std::vector<AblationRow> run_ablation(const RunConfig& config, std::ostream* log) {
  config.validate();
  std::vector<std::size_t> horizons = config.ablate_horizons;
  if (horizons.empty()) horizons.push_back(config.model.window.horizon);
  std::vector<AblationRow> rows;
  for (std::size_t h : horizons) {
    RunConfig base = config;
    base.model.window.horizon = h;

    RunConfig neither = base;
    neither.model.prompt_k = 0;
    neither.model.decomposition_enabled = false;
    rows.push_back(run_cell(neither, "table9", "neither", log));

    RunConfig prompt = base;
    prompt.model.decomposition_enabled = false;
    rows.push_back(run_cell(prompt, "table9", "prompt", log));

    RunConfig both = base;
    both.model.decomposition_enabled = true;
    rows.push_back(run_cell(both, "table9", "prompt+decomposition", log));

    for (double l : config.ablate_lambda) {
      RunConfig c = base;
      c.model.lambda = l;
      rows.push_back(run_cell(c, "lambda", format_double(l), log));
    }
    for (std::size_t k : config.ablate_prompt_k) {
      RunConfig c = base;
      c.model.prompt_k = k;
      rows.push_back(run_cell(c, "prompt_k", std::to_string(k), log));
    }
    for (std::size_t v : config.ablate_n_anchors) {
      RunConfig c = base;
      c.model.n_anchors = v;
      rows.push_back(run_cell(c, "n_anchors", std::to_string(v), log));
    }
  }
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "cell,setting,horizon,final_train_loss," << metric_csv_header() << '\n';
  for (const auto& r : rows) {
    out << r.cell << ',' << r.setting << ',' << r.horizon << ',' << fmt(r.final_train_loss) << ','
        << metric_csv_row(r.metrics) << '\n';
  }
}

namespace {

ForecastModel load_model_for(const RunConfig& config, const SeriesFrame& frame) {
  const std::string path = config.checkpoint_path();
  if (!fs::exists(path)) throw LoadError("checkpoint " + path + " does not exist; run train first");
  ForecastModel model = load_checkpoint(path);
  if (model.config().n_channels != frame.channels()) {
    throw ValidationError("checkpoint was trained on " + std::to_string(model.config().n_channels) +
                          " channels but the data has " + std::to_string(frame.channels()));
  }
  if (model.config().window.lookback != config.model.window.lookback ||
      model.config().window.horizon != config.model.window.horizon) {
    throw ValidationError("checkpoint window does not match window.lookback/window.horizon of the config");
  }
  return model;
}

void write_forecast(const std::string& path, const ForecastModel& model, const PreparedData& data) {
  const SeriesFrame& f = data.full;
  const std::size_t lookback = model.config().window.lookback;
  const std::size_t horizon = model.config().window.horizon;
  if (f.length() < lookback) throw ValidationError("series is shorter than the lookback");
  const auto& ts = f.timestamps();
  const std::int64_t step = ts.size() >= 2 ? ts[ts.size() - 1] - ts[ts.size() - 2] : 1;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "timestamp,channel,value\n";
  for (std::size_t c = 0; c < f.channels(); ++c) {
    const std::vector<double> series = f.channel(c);
    std::span<const double> x(series.data() + series.size() - lookback, lookback);
    const auto yhat = model.predict(x, c);
    for (std::size_t h = 0; h < horizon; ++h) {
      const std::int64_t t = ts.back() + step * static_cast<std::int64_t>(h + 1);
      out << f.format_timestamp(t) << ',' << f.channel_names()[c] << ',' << fmt(data.scaler.inverse(c, yhat[h]))
          << '\n';
    }
  }
}

void export_embeddings(const fs::path& dir, const ForecastModel& model, const PreparedData& data) {
  if (data.test_windows.empty()) throw ValidationError("no test windows to export");
  Tape::Scope no_record(nullptr);
  Tensor anchors = model.anchors();
  std::vector<Tensor> ts, prompted;
  for (const auto& w : data.test_windows) {
    Forecast f = model.forward_forecast(w.input, w.channel, &anchors);
    ts.push_back(f.ts_embed);
    prompted.push_back(f.prompted);
  }
  save_named_tensors((dir / "anchors.bin").string(), {{"anchors", anchors}});
  save_named_tensors((dir / "ts_embeds.bin").string(), {{"ts_embeds", stack(ts)}});
  save_named_tensors((dir / "prompted_embeds.bin").string(), {{"prompted_embeds", stack(prompted)}});
}

}  // namespace

int run(Command command, const RunConfig& config, std::ostream& log) {
  config.validate();
  const fs::path dir(config.out_dir);
  fs::create_directories(dir);
  switch (command) {
    case Command::gen_data: {
      const fs::path path = dir / "synthetic.csv";
      write_csv(path.string(), generate_synthetic(config.synth));
      log << "wrote " << path.string() << '\n';
      return 0;
    }
    case Command::train: {
      TrainOutcome t = train_pipeline(config);
      for (const auto& w : t.data.warnings) log << "warning: " << w << '\n';
      save_checkpoint(t.model, config.checkpoint_path());
      t.report.write_csv((dir / "train_report.csv").string());
      log << "trained " << t.report.epochs_run() << " epochs (" << t.report.steps << " steps) in " << t.report.seconds
          << " s; final train loss " << (t.report.train_loss.empty() ? 0.0 : t.report.train_loss.back()) << '\n';
      log << "wrote " << config.checkpoint_path() << '\n';
      return 0;
    }
    case Command::evaluate: {
      SeriesFrame frame = load_frame(config);
      ForecastModel model = load_model_for(config, frame);
      PreparedData data = prepare_data(config, frame);
      Evaluation ev = evaluate_pipeline(model, data, config);
      write_metric_report((dir / "metrics.csv").string(), ev.report);
      write_window_metrics((dir / "window_metrics.csv").string(), ev.per_window, config.metrics_mode);
      log << "mse=" << ev.report.mse << " mae=" << ev.report.mae << " over " << ev.report.windows << " windows\n";
      return 0;
    }
    case Command::forecast: {
      SeriesFrame frame = load_frame(config);
      ForecastModel model = load_model_for(config, frame);
      PreparedData data = prepare_data(config, frame);
      write_forecast((dir / "forecast.csv").string(), model, data);
      log << "wrote " << (dir / "forecast.csv").string() << '\n';
      return 0;
    }
    case Command::ablate: {
      auto rows = run_ablation(config, &log);
      write_ablation_csv((dir / "ablation.csv").string(), rows);
      log << "wrote " << (dir / "ablation.csv").string() << '\n';
      return 0;
    }
    case Command::export_embeddings: {
      SeriesFrame frame = load_frame(config);
      ForecastModel model = load_model_for(config, frame);
      PreparedData data = prepare_data(config, frame);
      export_embeddings(dir, model, data);
      log << "wrote anchors.bin, ts_embeds.bin, prompted_embeds.bin to " << dir.string() << '\n';
      return 0;
    }
  }
  return 2;
}

}  // namespace s2ip
