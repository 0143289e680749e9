#include "segcal/serialization.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace segcal {
namespace {

using nlohmann::json;

json matrix_rows(std::span<const double> flat, int rows, int cols) {
  json out = json::array();
  for (int r = 0; r < rows; ++r) {
    out.push_back(std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(r) * cols,
                                      flat.begin() + static_cast<std::ptrdiff_t>(r + 1) * cols));
  }
  return out;
}

std::vector<double> flatten_rows(const json& rows, int expect_rows, int expect_cols,
                                 const char* what) {
  if (!rows.is_array() || static_cast<int>(rows.size()) != expect_rows) {
    throw Error(ErrorCode::kFormatError, std::string(what) + " has the wrong number of rows");
  }
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(expect_rows) * expect_cols);
  for (const json& row : rows) {
    auto values = row.get<std::vector<double>>();
    if (static_cast<int>(values.size()) != expect_cols) {
      throw Error(ErrorCode::kFormatError, std::string(what) + " has a row of the wrong width");
    }
    flat.insert(flat.end(), values.begin(), values.end());
  }
  return flat;
}

json selector_to_json(const MlpSelector& selector) {
  json layers = json::array();
  for (const DenseLayer& layer : selector.layers()) {
    layers.push_back({{"inputs", layer.inputs},
                      {"outputs", layer.outputs},
                      {"weights", matrix_rows(layer.weights, layer.outputs, layer.inputs)},
                      {"bias", layer.bias}});
  }
  return json{{"sorted_input", selector.sorted_input()}, {"layers", layers}};
}

MlpSelector selector_from_json(const json& doc) {
  std::vector<DenseLayer> layers;
  for (const json& j : doc.at("layers")) {
    DenseLayer layer;
    layer.inputs = j.at("inputs").get<int>();
    layer.outputs = j.at("outputs").get<int>();
    layer.weights = flatten_rows(j.at("weights"), layer.outputs, layer.inputs, "selector weights");
    layer.bias = j.at("bias").get<std::vector<double>>();
    layers.push_back(std::move(layer));
  }
  return MlpSelector(std::move(layers), doc.at("sorted_input").get<bool>());
}

double number_or_infinity(const json& value) {
  return value.is_null() ? std::numeric_limits<double>::infinity() : value.get<double>();
}

json number_or_null(double value) {
  return std::isfinite(value) ? json(value) : json(nullptr);
}

}  // namespace

json optional_number(const std::optional<double>& value) {
  return value ? json(*value) : json(nullptr);
}

json params_to_json(const CalibratorParams& params, int num_classes) {
  json body = json::object();
  if (const auto* p = std::get_if<TemperatureParams>(&params)) {
    body["temperature"] = p->temperature;
  } else if (const auto* p = std::get_if<VectorParams>(&params)) {
    body["w"] = p->w;
    body["b"] = p->b;
  } else if (const auto* p = std::get_if<DirichletParams>(&params)) {
    body["W"] = matrix_rows(p->weights, p->num_classes, p->num_classes);
    body["b"] = p->bias;
  } else if (const auto* p = std::get_if<MetaCalParams>(&params)) {
    body["gamma"] = number_or_null(p->gamma);
    body["t_inner"] = p->t_inner;
    body["t_fallback"] = p->t_fallback;
  } else if (const auto* p = std::get_if<SelectiveParams>(&params)) {
    body["t1"] = p->t1;
    body["t2"] = p->t2;
    body["threshold"] = p->threshold;
    body["selector"] = selector_to_json(p->selector);
  } else if (const auto* p = std::get_if<EnsembleParams>(&params)) {
    body["members"] = p->members;
  }
  return json{{"format", "segcal-params"},
              {"version", kParamsVersion},
              {"method", method_name(params)},
              {"num_classes", num_classes},
              {"params", body}};
}

ParamsFile params_from_json(const json& doc) {
  try {
    if (!doc.is_object() || doc.value("format", "") != "segcal-params") {
      throw Error(ErrorCode::kFormatError, "not a segcal parameter file");
    }
    const int version = doc.at("version").get<int>();
    if (version != kParamsVersion) {
      throw Error(ErrorCode::kVersionUnsupported,
                  "parameter file version " + std::to_string(version) + " is not supported");
    }
    ParamsFile out;
    out.num_classes = doc.at("num_classes").get<int>();
    const std::string method = doc.at("method").get<std::string>();
    const json& body = doc.at("params");
    if (method == "identity") {
      out.params = IdentityParams{};
    } else if (method == "temperature") {
      out.params = TemperatureParams{body.at("temperature").get<double>()};
    } else if (method == "vector") {
      out.params = VectorParams{body.at("w").get<std::vector<double>>(),
                                body.at("b").get<std::vector<double>>()};
    } else if (method == "dirichlet") {
      DirichletParams p;
      p.num_classes = out.num_classes;
      p.weights = flatten_rows(body.at("W"), out.num_classes, out.num_classes, "W");
      p.bias = body.at("b").get<std::vector<double>>();
      out.params = std::move(p);
    } else if (method == "metacal") {
      out.params = MetaCalParams{number_or_infinity(body.at("gamma")),
                                 body.at("t_inner").get<double>(),
                                 body.at("t_fallback").get<double>()};
    } else if (method == "selective") {
      out.params = SelectiveParams{selector_from_json(body.at("selector")),
                                   body.at("t1").get<double>(), body.at("t2").get<double>(),
                                   body.at("threshold").get<double>()};
    } else if (method == "ensemble") {
      out.params = EnsembleParams{body.at("members").get<int>()};
    } else {
      throw Error(ErrorCode::kFormatError, "unknown method '" + method + "' in parameter file");
    }
    validate_params(out.params, out.num_classes);
    return out;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormatError, std::string("malformed parameter file: ") + e.what());
  }
}

void write_params(const CalibratorParams& params, int num_classes,
                  const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot open " + path.string() + " for writing");
  out << params_to_json(params, num_classes).dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

ParamsFile read_params(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) {
    throw Error(ErrorCode::kFormatError, path.string() + " is not valid JSON");
  }
  return params_from_json(doc);
}

json selector_metrics_to_json(const SelectorMetrics& m) {
  return json{{"detection_accuracy", m.detection_accuracy},
              {"overall_accuracy", m.overall_accuracy},
              {"threshold", m.threshold},
              {"num_samples", m.num_samples},
              {"num_incorrect", m.num_incorrect}};
}

json ece_report_to_json(const EceReport& report, const BinningConfig& cfg) {
  json bins = json::array();
  for (const DiagramRecord& r : reliability_diagram_data(report.bins)) {
    bins.push_back({{"low", r.low},
                    {"high", r.high},
                    {"acc", r.acc},
                    {"conf", r.conf},
                    {"count", r.count},
                    {"gap", r.gap}});
  }
  json images = json::array();
  for (const ImageEce& img : report.per_image) {
    images.push_back({{"id", img.id}, {"ece", img.ece}, {"pixels", img.pixels}});
  }
  return json{{"dataset_ece", report.dataset_ece},
              {"pooled_ece", pooled_ece(report)},
              {"accuracy", report.accuracy},
              {"num_bins", cfg.num_bins},
              {"bins", bins},
              {"per_image", images}};
}

json split_ece_to_json(const SplitEce& split) {
  return json{{"ece_correct", optional_number(split.ece_correct)},
              {"ece_incorrect", optional_number(split.ece_incorrect)},
              {"num_correct", split.num_correct},
              {"num_incorrect", split.num_incorrect}};
}

json regional_ece_to_json(const RegionalEce& regional) {
  return json{{"ece_boundary", optional_number(regional.ece_inside)},
              {"ece_interior", optional_number(regional.ece_outside)},
              {"boundary_pixels", regional.inside_bins.total()},
              {"interior_pixels", regional.outside_bins.total()}};
}

json fit_report_to_json(const FitReport& report, int num_classes) {
  json out{{"method", method_name(report.params)},
           {"train_nll_before", report.train_nll_before},
           {"train_nll_after", report.train_nll_after},
           {"val_ece_before", report.val_ece_before},
           {"val_ece_after", report.val_ece_after},
           {"fell_back_to_identity", report.fell_back_to_identity},
           {"warning", report.warning.empty() ? json(nullptr) : json(report.warning)},
           {"epochs", report.trace.size()},
           {"params", params_to_json(report.params, num_classes)}};
  out["selector_metrics"] =
      report.selector_metrics ? selector_metrics_to_json(*report.selector_metrics) : json(nullptr);
  return out;
}

std::string trace_to_jsonl(const std::vector<EpochLoss>& trace) {
  std::ostringstream out;
  for (const EpochLoss& e : trace) {
    out << json{{"epoch", e.epoch}, {"loss", e.loss}, {"val_loss", optional_number(e.val_loss)}}
               .dump()
        << '\n';
  }
  return out.str();
}

std::string diagram_csv(const std::vector<DiagramRecord>& records) {
  // Shortest round-trip decimal form, matching the JSON reports.
  auto num = [](double v) { return json(v).dump(); };
  std::ostringstream out;
  out << "bin_low,bin_high,acc,conf,count,gap\n";
  for (const DiagramRecord& r : records) {
    out << num(r.low) << ',' << num(r.high) << ',' << num(r.acc) << ',' << num(r.conf) << ','
        << r.count << ',' << num(r.gap) << '\n';
  }
  return out.str();
}

}  // namespace segcal
