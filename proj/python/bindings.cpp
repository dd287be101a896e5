#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nowcast/grdf.hpp"
#include "nowcast/service.hpp"
#include "nowcast/verif.hpp"

namespace py = pybind11;
using namespace nowcast;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ClassGrid to_class_grid(const U8Array& a) {
  if (a.ndim() != 2) throw InvalidInput("class grid must be 2-D");
  ClassGrid g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), g.labels.begin());
  g.validate();
  return g;
}

ValidityMask to_mask(const U8Array& a) {
  if (a.ndim() != 2) throw InvalidInput("mask must be 2-D");
  ValidityMask m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::transform(a.data(), a.data() + a.size(), m.valid.begin(), [](std::uint8_t v) { return v ? 1 : 0; });
  return m;
}

py::dict confusion_dict(const ThresholdConfusion& c) {
  py::dict d;
  d["hit"] = c.hit;
  d["miss"] = c.miss;
  d["false_alarm"] = c.false_alarm;
  d["correct_negative"] = c.correct_negative;
  return d;
}

py::object metric_obj(const MetricValue& m) {
  if (!m.defined()) return py::none();
  return py::make_tuple(m.exact->num(), m.exact->den(), m.partial);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of nowcast_xai";

  py::register_exception<InvalidInput>(m, "InvalidInput", PyExc_ValueError);
  py::register_exception<InvalidParameter>(m, "InvalidParameter", PyExc_ValueError);
  py::register_exception<InvalidSpec>(m, "InvalidSpec", PyExc_ValueError);
  py::register_exception<EmptyDataset>(m, "EmptyDataset", PyExc_ValueError);

  m.def("default_config", [] { return ServiceConfig().to_json().dump(); });
  m.def("canonical_config", [](const std::string& cfg) {
    return ServiceConfig::from_json(nlohmann::json::parse(cfg)).to_json().dump();
  });
  m.def("run_id", [](const std::string& cfg) { return ServiceConfig::from_json(nlohmann::json::parse(cfg)).run_id(); });

  m.def(
      "run_stage",
      [](const std::string& cfg, const std::string& root, const std::string& stage) {
        const ServiceConfig c = ServiceConfig::from_json(nlohmann::json::parse(cfg));
        const Stage s = stage_from_name(stage);
        py::gil_scoped_release release;
        return run_stage(RunStore(root), c, s).to_json().dump();
      },
      py::arg("config"), py::arg("root"), py::arg("stage") = "report");

  py::class_<ApiService>(m, "ApiService")
      .def(py::init([](const std::string& root, const std::string& run_id) {
             return ApiService(RunStore(root), run_id);
           }),
           py::arg("root"), py::arg("run_id"))
      .def(
          "get",
          [](const ApiService& api, const std::string& path, const std::map<std::string, std::string>& query) {
            ApiResponse r;
            {
              py::gil_scoped_release release;
              r = api.handle("GET", path, {query.begin(), query.end()});
            }
            return py::make_tuple(r.status, r.content_type, py::bytes(r.body), r.etag);
          },
          py::arg("path"), py::arg("query") = std::map<std::string, std::string>{})
      .def_property_readonly("explain_computations", &ApiService::explain_computations)
      .def_property_readonly("run_id", &ApiService::run_id);

  m.def(
      "confusions",
      [](const U8Array& pred, const U8Array& truth, const U8Array& mask) {
        const ConfusionPair c = confusions(to_class_grid(pred), to_class_grid(truth), to_mask(mask));
        return py::make_tuple(confusion_dict(c.over1), confusion_dict(c.over10));
      },
      "Confusion counts at the 1 and 10 mm/hr thresholds.");

  m.def(
      "modified_scores",
      [](const U8Array& pred, const U8Array& truth, const U8Array& mask) {
        const ConfusionPair c = confusions(to_class_grid(pred), to_class_grid(truth), to_mask(mask));
        py::dict d;
        d["pod"] = metric_obj(modified_pod(c.over1, c.over10));
        d["far"] = metric_obj(modified_far(c.over1, c.over10));
        d["f1"] = metric_obj(modified_f1(c));
        return d;
      },
      "Exact (num, den, partial) tuples, or None when undefined.");

  m.def("softmax", [](const F64Array& z) {
    if (z.ndim() != 3) throw InvalidInput("logits must be K x H x W");
    Tensor t(static_cast<int>(z.shape(0)), static_cast<int>(z.shape(1)), static_cast<int>(z.shape(2)));
    std::copy(z.data(), z.data() + z.size(), t.data());
    const Tensor p = softmax(t);
    F64Array out({z.shape(0), z.shape(1), z.shape(2)});
    std::copy(p.data(), p.data() + p.size(), out.mutable_data());
    return out;
  });

  m.def(
      "ece",
      [](const F64Array& conf, const U8Array& correct, int bins) {
        if (conf.size() != correct.size()) throw InvalidInput("length mismatch");
        return ece({conf.data(), static_cast<std::size_t>(conf.size())},
                   {correct.data(), static_cast<std::size_t>(correct.size())}, bins);
      },
      py::arg("confidence"), py::arg("correct"), py::arg("bins") = 10);

  m.def(
      "fit_temperature",
      [](const F64Array& logits, const U8Array& labels) {
        if (logits.ndim() != 2 || logits.shape(1) != kNumClasses || logits.shape(0) != labels.size()) {
          throw InvalidInput("logits must be N x 3 with N labels");
        }
        PixelSet px;
        px.logits.assign(logits.data(), logits.data() + logits.size());
        px.labels.assign(labels.data(), labels.data() + labels.size());
        return fit_temperature(px).T;
      },
      py::arg("logits"), py::arg("labels"));

  m.def("decode_grdf", [](const py::bytes& data) {
    const std::string s = data;
    const GrdfFile f = decode_grdf(std::vector<std::uint8_t>(s.begin(), s.end()));
    nlohmann::json header = f.extra;
    header["dims"] = f.dims;
    header["kind"] = f.kind;
    if (f.lead_time) header["lead_time"] = *f.lead_time;
    if (f.timestamp) header["timestamp"] = *f.timestamp;
    std::vector<py::ssize_t> shape(f.dims.begin(), f.dims.end());
    py::array_t<float> arr(shape);
    std::copy(f.payload.begin(), f.payload.end(), arr.mutable_data());
    return py::make_tuple(header.dump(), arr);
  });
}
