#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "s2ip/errors.hpp"
#include "s2ip/evaluation.hpp"
#include "s2ip/harness.hpp"
#include "s2ip/preprocess.hpp"
#include "s2ip/semantic_prompt.hpp"
#include "s2ip/training.hpp"

namespace py = pybind11;
using namespace s2ip;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vec(const Array& a) {
  if (a.ndim() != 1) throw ShapeError("expected a 1-d array");
  return {a.data(), a.data() + a.size()};
}

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
  return Tensor::from({static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1))},
                      {a.data(), a.data() + a.size()});
}

Array from_vec(const std::vector<double>& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Array from_matrix(const Matrix& m) {
  Array out({static_cast<py::ssize_t>(m.rows), static_cast<py::ssize_t>(m.cols)});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

py::object maybe(const std::optional<double>& v) { return v ? py::cast(*v) : py::none(); }

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  d["mse"] = r.mse;
  d["mae"] = r.mae;
  d["smape"] = maybe(r.smape);
  d["mape"] = maybe(r.mape);
  d["mase"] = maybe(r.mase);
  d["owa"] = maybe(r.owa);
  d["windows"] = r.windows;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Semantic-space prompted time series forecasting";

  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<LoadError>(m, "LoadError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("patch_count", [](std::size_t n, std::size_t length, std::size_t stride) {
    PatchSpec spec{length, stride};
    spec.validate(n);
    return spec.count(n);
  }, py::arg("series_length"), py::arg("length"), py::arg("stride"));

  m.def("patch", [](const Array& x, std::size_t length, std::size_t stride) {
    return from_matrix(patch(to_vec(x), {length, stride}));
  }, py::arg("x"), py::arg("length"), py::arg("stride"));

  m.def("revin_round_trip", [](const Array& x, double gamma, double beta) {
    const auto r = revin_normalize(to_vec(x), {gamma, beta, 1e-5});
    return py::make_tuple(from_vec(r.values), from_vec(revin_denormalize(r.values, r.state)));
  }, py::arg("x"), py::arg("gamma") = 1.0, py::arg("beta") = 0.0);

  m.def("decompose", [](const Array& x, std::size_t period, std::size_t trend_window, const std::string& method) {
    DecompositionOptions opt;
    opt.period = period;
    opt.trend_window = trend_window;
    opt.method = parse_decomposition_method(method);
    const auto d = decompose(to_vec(x), opt);
    return py::make_tuple(from_vec(d.trend), from_vec(d.seasonal), from_vec(d.residual));
  }, py::arg("x"), py::arg("period") = 24, py::arg("trend_window") = 25, py::arg("method") = "classical");

  m.def("retrieve_topk", [](const Array& ts_embed, const Array& anchors, std::size_t k) {
    const auto s = retrieve_topk(to_tensor(ts_embed), to_tensor(anchors), k);
    return py::make_tuple(s.indices, s.scores);
  }, py::arg("ts_embed"), py::arg("anchors"), py::arg("k"));

  m.def("smape", [](const Array& y, const Array& yhat) { return smape(to_vec(y), to_vec(yhat)); });
  m.def("mape", [](const Array& y, const Array& yhat) { return maybe(mape(to_vec(y), to_vec(yhat))); });
  m.def("mase", [](const Array& y, const Array& yhat, const Array& insample, std::size_t s) {
    return maybe(mase(to_vec(y), to_vec(yhat), to_vec(insample), s));
  }, py::arg("y"), py::arg("yhat"), py::arg("insample"), py::arg("seasonality"));
  m.def("naive2_forecast", [](const Array& insample, std::size_t s, std::size_t horizon) {
    return from_vec(naive2_forecast(to_vec(insample), s, horizon));
  }, py::arg("insample"), py::arg("seasonality"), py::arg("horizon"));

  m.def("default_config", [] { return RunConfig{}.to_text(); });
  m.def("normalize_config", [](const std::string& text) { return parse_config_text(text).to_text(); },
        "Parses a config strictly and returns its canonical text.");

  m.def("synthetic", [](const std::string& config_text) {
    const SeriesFrame f = generate_synthetic(parse_config_text(config_text).synth);
    Array out({static_cast<py::ssize_t>(f.length()), static_cast<py::ssize_t>(f.channels())});
    std::copy(f.values().begin(), f.values().end(), out.mutable_data());
    return out;
  }, py::arg("config_text") = "");

  m.def("run", [](const std::string& command, const std::string& config_text, const std::string& out_dir) {
    RunConfig c = parse_config_text(config_text);
    c.out_dir = out_dir;
    std::ostringstream log;
    const int status = [&] {
      py::gil_scoped_release release;
      return run(parse_command(command), c, log);
    }();
    return py::make_tuple(status, log.str());
  }, py::arg("command"), py::arg("config_text"), py::arg("out_dir"));

  m.def("evaluate_checkpoint", [](const std::string& checkpoint, const std::string& config_text) {
    RunConfig c = parse_config_text(config_text);
    const ForecastModel model = load_checkpoint(checkpoint);
    const SeriesFrame frame = load_frame(c);
    c.model = model.config();
    const PreparedData data = prepare_data(c, frame);
    return report_dict(evaluate_pipeline(model, data, c).report);
  }, py::arg("checkpoint"), py::arg("config_text"));

  py::class_<ForecastModel>(m, "ForecastModel")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("predict", [](const ForecastModel& model, const Array& x, std::size_t channel) {
        return from_vec(model.predict(to_vec(x), channel));
      }, py::arg("x"), py::arg("channel") = 0)
      .def_property_readonly("lookback", [](const ForecastModel& model) { return model.config().window.lookback; })
      .def_property_readonly("horizon", [](const ForecastModel& model) { return model.config().window.horizon; })
      .def("parameter_names", [](const ForecastModel& model) {
        std::vector<std::string> names;
        for (const auto& p : model.named_tensors()) names.push_back(p.name);
        return names;
      });
}
