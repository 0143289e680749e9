#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "segcal/calibrators.hpp"
#include "segcal/metrics.hpp"
#include "segcal/parallel.hpp"
#include "segcal/random.hpp"
#include "segcal/serialization.hpp"
#include "segcal/synthetic.hpp"

namespace segcal::cli {
namespace {

using nlohmann::json;

std::string fixed(double value, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, value);
  return buf;
}

std::vector<std::string> split_commas(const std::string& text) {
  std::vector<std::string> parts;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) parts.push_back(item);
  if (!text.empty() && text.back() == ',') parts.emplace_back();
  return parts;
}

double parse_double(const std::string& text, const char* what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorCode::kInvalidArgument, std::string("invalid ") + what + " '" + text + "'");
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorCode::kIoError, "cannot open " + path + " for writing");
  f << text;
  if (!f) throw Error(ErrorCode::kIoError, "failed writing " + path);
}

// JSON output either to a file (--out) or to stdout.
void emit_json(const json& doc, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << doc.dump(2) << '\n';
  } else {
    write_text(path, doc.dump(2) + "\n");
  }
}

json split_json(const SplitSpec& spec, const DatasetSplits& splits) {
  return json{{"fractions", {spec.train, spec.val, spec.test}},
              {"seed", spec.seed},
              {"train_images", splits.train.images.size()},
              {"val_images", splits.val.images.size()},
              {"test_images", splits.test.images.size()},
              {"test_hash", split_hash(splits.test)}};
}

CLI::Validator positive_real() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        try {
          std::size_t used = 0;
          const double v = std::stod(s, &used);
          if (used == s.size() && std::isfinite(v) && v > 0.0) return {};
        } catch (const std::exception&) {
        }
        return "value must be a positive real, got '" + s + "'";
      },
      "POSITIVE");
}

CLI::Validator unit_interval() {
  return CLI::Validator(
      [](std::string& s) -> std::string {
        try {
          std::size_t used = 0;
          const double v = std::stod(s, &used);
          if (used == s.size() && v >= 0.0 && v <= 1.0) return {};
        } catch (const std::exception&) {
        }
        return "value must lie in [0, 1], got '" + s + "'";
      },
      "[0,1]");
}

// ---- synth -----------------------------------------------------------------

struct SynthOptions {
  std::string out;
  int images = 100;
  std::string size = "32x32";
  int classes = 10;
  double sharpness = 1.0;
  double boundary_noise = 0.0;
  int boundary_radius = 2;
  int blobs = 6;
  double concentration = 60.0;
  std::string label_rule = "sampled";
  double rule_threshold = 0.9;
  int members = 0;
  double member_noise = 0.5;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthOptions& o, std::ostream& out) {
  SyntheticConfig cfg;
  cfg.num_images = o.images;
  std::tie(cfg.height, cfg.width) = parse_size(o.size);
  cfg.num_classes = o.classes;
  cfg.sharpness = o.sharpness;
  cfg.boundary_noise = o.boundary_noise;
  cfg.boundary_radius = o.boundary_radius;
  cfg.blob_seeds_per_image = o.blobs;
  cfg.base_concentration = o.concentration;
  cfg.rule_threshold = o.rule_threshold;
  cfg.seed = o.seed;
  if (o.label_rule == "sampled") {
    cfg.label_rule = LabelRule::kSampled;
  } else if (o.label_rule == "confidence") {
    cfg.label_rule = LabelRule::kConfidenceThreshold;
  } else if (o.label_rule == "argmax") {
    cfg.label_rule = LabelRule::kArgmax;
  } else {
    throw Error(ErrorCode::kInvalidArgument, "unknown label rule '" + o.label_rule + "'");
  }
  const SyntheticDataset synth = generate_synthetic(cfg);
  write_container(synth.data, o.out);

  Manifest manifest{std::filesystem::path(o.out).filename().string(), cfg.num_classes,
                    synth.data.images.size(), synthetic_config_to_json(cfg)};
  write_manifest(manifest, manifest_path(o.out));

  json summary = manifest_to_json(manifest);
  json member_files = json::array();
  for (int m = 0; m < o.members; ++m) {
    const std::string path = o.out + ".member" + std::to_string(m);
    const Dataset member =
        perturb_logits(synth.data, o.member_noise, derive_seed(o.seed, 0xE5E0 + m));
    write_container(member, path);
    Manifest mm{std::filesystem::path(path).filename().string(), cfg.num_classes,
                member.images.size(),
                json{{"member_of", manifest.file},
                     {"index", m},
                     {"logit_noise", o.member_noise},
                     {"generator", manifest.provenance}}};
    write_manifest(mm, manifest_path(path));
    member_files.push_back(mm.file);
  }
  summary["members"] = member_files;
  out << summary.dump(2) << '\n';
  return kExitOk;
}

// ---- fit -------------------------------------------------------------------

struct FitOptions {
  std::string data;
  std::string method;
  std::string split = "0.5,0.25,0.25";
  int bins = 10;
  std::uint64_t seed = 0;
  std::string out;
  std::string trace;
  bool no_fallback = false;
};

FitConfig make_fit_config(int bins, std::uint64_t seed, bool fallback) {
  FitConfig cfg;
  cfg.bins.num_bins = bins;
  cfg.seed = seed;
  cfg.identity_fallback = fallback;
  return cfg;
}

int cmd_fit(const FitOptions& o, std::ostream& out) {
  SplitSpec spec = parse_split(o.split);
  spec.seed = o.seed;
  const Dataset data = read_container(o.data);
  const DatasetSplits splits = split_dataset(data, spec);
  require_nonempty(splits.train, "train");
  const FitReport report = fit_method(o.method, splits.train, splits.val,
                                      make_fit_config(o.bins, o.seed, !o.no_fallback));
  write_params(report.params, data.num_classes, o.out);
  if (!o.trace.empty()) write_text(o.trace, trace_to_jsonl(report.trace));
  json doc = fit_report_to_json(report, data.num_classes);
  doc["split"] = split_json(spec, splits);
  doc["params_file"] = o.out;
  out << doc.dump(2) << '\n';
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalOptions {
  std::string data;
  std::string params;
  int bins = 10;
  std::string out;
  std::string diagram;
  bool regional = false;
  int radius = 2;
  bool split_correctness = false;
};

// Pooled ECE inside/outside per-image masks.
RegionalEce pooled_regional(const Dataset& data, const std::vector<ProbMap>& probs,
                            const std::vector<std::vector<std::uint8_t>>& masks,
                            const BinningConfig& bins) {
  RegionalEce total{std::nullopt, std::nullopt, ReliabilityBins(bins.num_bins),
                    ReliabilityBins(bins.num_bins)};
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const RegionalEce r = regional_ece(probs[i], data.images[i].labels, masks[i], bins);
    total.inside_bins.merge(r.inside_bins);
    total.outside_bins.merge(r.outside_bins);
  }
  if (total.inside_bins.total() > 0) total.ece_inside = total.inside_bins.ece();
  if (total.outside_bins.total() > 0) total.ece_outside = total.outside_bins.ece();
  return total;
}

std::vector<ProbMap> calibrated_probs(const Dataset& data, const CalibratorParams& params) {
  std::vector<ProbMap> probs(data.images.size());
  parallel_for(data.images.size(), [&](std::size_t i) {
    probs[i] = apply_calibrator(params, data.images[i].logits);
  });
  return probs;
}

json region_sections(const Dataset& data, const std::vector<ProbMap>& probs,
                     const EvalOptions& o, const BinningConfig& bins) {
  json section = json::object();
  if (o.regional) {
    std::vector<std::vector<std::uint8_t>> masks(data.images.size());
    for (std::size_t i = 0; i < data.images.size(); ++i) {
      masks[i] = boundary_mask(data.images[i].labels, BoundaryConfig{o.radius});
    }
    json r = regional_ece_to_json(pooled_regional(data, probs, masks, bins));
    r["radius"] = o.radius;
    section["regional"] = r;
  }
  if (o.split_correctness) {
    std::vector<std::vector<std::uint8_t>> masks(data.images.size());
    for (std::size_t i = 0; i < data.images.size(); ++i) {
      const auto outcome = correctness_mask(argmax_predict(probs[i]), data.images[i].labels);
      masks[i].resize(outcome.size());
      for (std::size_t p = 0; p < outcome.size(); ++p) {
        masks[i][p] = outcome[p] == PixelOutcome::kIncorrect;
      }
    }
    const RegionalEce r = pooled_regional(data, probs, masks, bins);
    SplitEce split;
    split.ece_incorrect = r.ece_inside;
    split.ece_correct = r.ece_outside;
    split.num_incorrect = r.inside_bins.total();
    split.num_correct = r.outside_bins.total();
    section["split_correctness"] = split_ece_to_json(split);
  }
  return section;
}

int cmd_eval(const EvalOptions& o, std::ostream& out) {
  if (o.radius < 0) throw Error(ErrorCode::kInvalidArgument, "--radius must be >= 0");
  const Dataset data = read_container(o.data);
  const ParamsFile file = read_params(o.params);
  if (!std::holds_alternative<IdentityParams>(file.params) &&
      file.num_classes != data.num_classes) {
    throw Error(ErrorCode::kClassCountMismatch,
                "parameters were fitted for " + std::to_string(file.num_classes) +
                    " classes but the dataset has " + std::to_string(data.num_classes));
  }
  const BinningConfig bins{o.bins};
  const std::vector<ProbMap> before = calibrated_probs(data, IdentityParams{});
  const std::vector<ProbMap> after = calibrated_probs(data, file.params);
  const EceReport report_before = evaluate_probs(data, before, bins);
  const EceReport report_after = evaluate_probs(data, after, bins);

  json doc{{"method", method_name(file.params)},
           {"num_images", data.images.size()},
           {"num_classes", data.num_classes},
           {"ece_before", report_before.dataset_ece},
           {"ece_after", report_after.dataset_ece},
           {"uncalibrated", ece_report_to_json(report_before, bins)},
           {"calibrated", ece_report_to_json(report_after, bins)}};
  if (o.regional || o.split_correctness) {
    json b = region_sections(data, before, o, bins);
    json a = region_sections(data, after, o, bins);
    for (auto& [key, value] : a.items()) doc["calibrated"][key] = value;
    for (auto& [key, value] : b.items()) doc["uncalibrated"][key] = value;
  }
  if (!o.diagram.empty()) {
    write_text(o.diagram, diagram_csv(reliability_diagram_data(report_after.bins)));
  }
  emit_json(doc, o.out, out);
  return kExitOk;
}

// ---- compare ---------------------------------------------------------------

struct CompareOptions {
  std::string data;
  std::string methods = "temp,vector,dirichlet,metacal,selective";
  std::string split = "0.5,0.25,0.25";
  int bins = 10;
  std::uint64_t seed = 0;
  std::string members;
  std::string out;
};

const std::map<std::string, std::string>& display_names() {
  static const std::map<std::string, std::string> names{
      {"uncal", "Uncal"},       {"temp", "TempS"},     {"vector", "LogS"},
      {"dirichlet", "DirS"},    {"metacal", "MetaCal*"}, {"ensemble", "Ens."},
      {"selective", "Selective"}};
  return names;
}

CompareRow evaluated_row(const std::string& name, const EceReport& report, double nll,
                         const std::string& hash) {
  CompareRow row;
  row.method = name;
  row.ece = report.dataset_ece;
  row.accuracy = report.accuracy;
  row.nll = nll;
  row.split_hash = hash;
  return row;
}

CompareRow ensemble_row(const CompareOptions& o, const SplitSpec& spec, const Dataset& test,
                        const std::string& hash, const BinningConfig& bins) {
  const auto paths = split_commas(o.members);
  std::vector<Dataset> members;
  for (const std::string& path : paths) {
    const Dataset member = read_container(path);
    if (member.num_classes != test.num_classes) {
      throw Error(ErrorCode::kClassCountMismatch, "member " + path + " has a different K");
    }
    Dataset member_test = split_dataset(member, spec).test;
    if (split_hash(member_test) != hash) {
      throw Error(ErrorCode::kShapeMismatch, "member " + path + " does not share the test split");
    }
    members.push_back(std::move(member_test));
  }
  std::vector<ProbMap> probs(test.images.size());
  std::vector<double> nll_sum(test.images.size(), 0.0);
  parallel_for(test.images.size(), [&](std::size_t i) {
    std::vector<ProbMap> maps;
    maps.push_back(softmax_with_temperature(test.images[i].logits, 1.0));
    for (const Dataset& m : members) {
      check_same_shape(m.images[i].logits, test.images[i].labels);
      maps.push_back(softmax_with_temperature(m.images[i].logits, 1.0));
    }
    probs[i] = ensemble_average(maps);
    const LabelMap& labels = test.images[i].labels;
    for (std::size_t p = 0; p < labels.num_pixels(); ++p) {
      if (!labels.ignored(p)) {
        nll_sum[i] -= std::log(std::max(probs[i].pixel(p)[labels.label(p)], kProbabilityFloor));
      }
    }
  });
  const EceReport report = evaluate_probs(test, probs, bins);
  std::uint64_t pixels = 0;
  for (const ImageEce& img : report.per_image) pixels += img.pixels;
  double nll = 0.0;
  for (double v : nll_sum) nll += v;
  CompareRow row = evaluated_row("Ens.", report, nll / static_cast<double>(pixels), hash);
  row.note = std::to_string(members.size() + 1) + " members";
  return row;
}

int cmd_compare(const CompareOptions& o, std::ostream& out, std::ostream& err) {
  SplitSpec spec = parse_split(o.split);
  spec.seed = o.seed;
  std::vector<std::string> requested;
  for (const std::string& m : split_commas(o.methods)) {
    const std::string key = m == "temperature" ? "temp" : m;
    if (display_names().count(key) == 0 || key == "uncal") {
      throw Error(ErrorCode::kInvalidArgument, "unknown method '" + m + "'");
    }
    if (std::find(requested.begin(), requested.end(), key) == requested.end()) {
      requested.push_back(key);
    }
  }
  if (requested.empty()) throw Error(ErrorCode::kInvalidArgument, "--methods is empty");

  const Dataset data = read_container(o.data);
  const DatasetSplits splits = split_dataset(data, spec);
  require_nonempty(splits.train, "train");
  require_nonempty(splits.test, "test");
  const std::string hash = split_hash(splits.test);
  const BinningConfig bins{o.bins};
  const FitConfig fit_cfg = make_fit_config(o.bins, o.seed, true);

  std::map<std::string, CompareRow> rows;
  std::map<std::string, json> fit_info;
  {
    const Evaluation e = evaluate_calibrator(splits.test, IdentityParams{}, bins);
    rows["uncal"] = evaluated_row("Uncal", e.report, e.nll, hash);
  }
  for (const std::string& key : requested) {
    try {
      if (key == "ensemble") {
        if (o.members.empty()) {
          throw Error(ErrorCode::kInvalidArgument, "needs member files via --members");
        }
        rows[key] = ensemble_row(o, spec, splits.test, hash, bins);
        continue;
      }
      const FitReport fit = fit_method(key, splits.train, splits.val, fit_cfg);
      const Evaluation e = evaluate_calibrator(splits.test, fit.params, bins);
      rows[key] = evaluated_row(display_names().at(key), e.report, e.nll, hash);
      if (fit.fell_back_to_identity) rows[key].note = "fell back to identity";
      fit_info[key] = fit_report_to_json(fit, data.num_classes);
    } catch (const Error& e) {
      CompareRow failed;
      failed.method = display_names().at(key);
      failed.split_hash = hash;
      failed.note = std::string(error_code_name(e.code())) + ": " + e.what();
      rows[key] = failed;
      err << "segcal compare: " << failed.method << " failed: " << e.what() << '\n';
    }
  }

  std::vector<CompareRow> ordered;
  std::vector<std::string> keys;
  for (const std::string& name : compare_column_order()) {
    for (const auto& [key, display] : display_names()) {
      if (display == name && rows.count(key)) {
        ordered.push_back(rows[key]);
        keys.push_back(key);
      }
    }
  }
  flag_best(ordered);
  out << format_compare_table(ordered);

  const ClassIou iou = class_iou(splits.test);
  out << "pixel accuracy " << fixed(iou.pixel_accuracy, 4) << ", mIoU " << fixed(iou.mean_iou, 4)
      << " (uncalibrated argmax, test split " << hash << ")\n";

  if (!o.out.empty()) {
    json table = json::array();
    for (std::size_t i = 0; i < ordered.size(); ++i) {
      const CompareRow& r = ordered[i];
      json row{{"method", r.method},
               {"key", keys[i]},
               {"ece", optional_number(r.ece)},
               {"accuracy", r.ece ? json(r.accuracy) : json(nullptr)},
               {"nll", r.ece ? json(r.nll) : json(nullptr)},
               {"split_hash", r.split_hash},
               {"best", r.best},
               {"note", r.note}};
      if (fit_info.count(keys[i])) row["fit"] = fit_info[keys[i]];
      table.push_back(row);
    }
    json per_class = json::array();
    for (const auto& v : iou.per_class) per_class.push_back(optional_number(v));
    json doc{{"num_bins", o.bins},
             {"split", split_json(spec, splits)},
             {"rows", table},
             {"pixel_accuracy", iou.pixel_accuracy},
             {"mean_iou", iou.mean_iou},
             {"per_class_iou", per_class}};
    write_text(o.out, doc.dump(2) + "\n");
  }
  return kExitOk;
}

// ---- ablate ----------------------------------------------------------------

struct AblateOptions {
  std::string data;
  std::string rates = "0,0.25,0.5,0.75,1.0";
  int bins = 10;
  double t1 = kLargeTemperature;
  double t2 = 1.0;
  double tolerance = 0.005;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_ablate(const AblateOptions& o, std::ostream& out) {
  const std::vector<double> rates = parse_rates(o.rates);
  const Dataset data = read_container(o.data);
  SweepConfig cfg;
  cfg.t1 = o.t1;
  cfg.t2 = o.t2;
  cfg.bins.num_bins = o.bins;
  cfg.seed = o.seed;
  const std::vector<SweepPoint> sweep = selector_accuracy_sweep(data, rates, cfg);
  const bool monotone = is_non_increasing(sweep, o.tolerance);

  out << "rate    ECE\n";
  for (const SweepPoint& p : sweep) out << fixed(p.rate, 2) << "    " << fixed(p.ece, 4) << '\n';
  out << "verdict: " << (monotone ? "non-increasing" : "NOT non-increasing") << " within "
      << o.tolerance << '\n';

  if (!o.out.empty()) {
    json points = json::array();
    for (const SweepPoint& p : sweep) points.push_back({{"rate", p.rate}, {"ece", p.ece}});
    json doc{{"t1", o.t1},
             {"t2", o.t2},
             {"num_bins", o.bins},
             {"seed", o.seed},
             {"tolerance", o.tolerance},
             {"non_increasing", monotone},
             {"sweep", points}};
    write_text(o.out, doc.dump(2) + "\n");
  }
  return kExitOk;
}

}  // namespace

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDegenerateLabels:
    case ErrorCode::kAllPixelsIgnored:
    case ErrorCode::kEmptySplit:
    case ErrorCode::kSplitMissing:
    case ErrorCode::kEmptyDataset:
      return kExitDegenerate;
    case ErrorCode::kBadMagic:
    case ErrorCode::kVersionUnsupported:
    case ErrorCode::kTruncatedPayload:
    case ErrorCode::kTrailingBytes:
    case ErrorCode::kFormatError:
    case ErrorCode::kIoError:
    case ErrorCode::kClassCountMismatch:
    case ErrorCode::kInvalidLabel:
      return kExitIo;
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kNonPositiveTemperature:
    case ErrorCode::kInvalidBounds:
      return kExitUsage;
    default:
      return kExitInternal;
  }
}

bool apply_thread_env() {
  const char* value = std::getenv("SEGCAL_THREADS");
  if (value == nullptr || *value == '\0') return true;
  char* end = nullptr;
  const unsigned long n = std::strtoul(value, &end, 10);
  if (*end != '\0' || value[0] == '-') return false;
  set_thread_limit(static_cast<unsigned>(n));
  return true;
}

SplitSpec parse_split(const std::string& text) {
  const auto parts = split_commas(text);
  if (parts.size() != 3) {
    throw Error(ErrorCode::kInvalidArgument, "--split needs three fractions, e.g. 0.5,0.25,0.25");
  }
  SplitSpec spec;
  spec.train = parse_double(parts[0], "split fraction");
  spec.val = parse_double(parts[1], "split fraction");
  spec.test = parse_double(parts[2], "split fraction");
  spec.validate();
  return spec;
}

std::pair<int, int> parse_size(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw Error(ErrorCode::kInvalidArgument, "--size must be HxW");
  const double h = parse_double(text.substr(0, x), "height");
  const double w = parse_double(text.substr(x + 1), "width");
  if (h < 1 || w < 1 || h != std::floor(h) || w != std::floor(w) || h > 1 << 15 || w > 1 << 15) {
    throw Error(ErrorCode::kInvalidArgument, "--size must be two positive integers, HxW");
  }
  return {static_cast<int>(h), static_cast<int>(w)};
}

std::vector<double> parse_rates(const std::string& text) {
  std::vector<double> rates;
  for (const std::string& part : split_commas(text)) {
    const double r = parse_double(part, "rate");
    if (r < 0.0 || r > 1.0) throw Error(ErrorCode::kInvalidArgument, "rates must lie in [0, 1]");
    rates.push_back(r);
  }
  if (rates.empty()) throw Error(ErrorCode::kInvalidArgument, "--rates is empty");
  return rates;
}

std::string split_hash(const Dataset& split) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const SegImage& image : split.images) {
    for (int shift = 0; shift < 32; shift += 8) {
      h ^= (image.id >> shift) & 0xFFu;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const std::vector<std::string>& compare_column_order() {
  static const std::vector<std::string> order{"Uncal", "TempS", "LogS",     "DirS",
                                              "MetaCal*", "Ens.", "Selective"};
  return order;
}

void flag_best(std::vector<CompareRow>& rows) {
  std::optional<double> best;
  for (const CompareRow& r : rows) {
    if (r.ece && (!best || *r.ece < *best)) best = r.ece;
  }
  for (CompareRow& r : rows) r.best = best && r.ece && *r.ece == *best;
}

std::string format_compare_table(const std::vector<CompareRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-10s  %-6s  %-7s  %-7s  %-16s  %s\n", "method", "ECE",
                "acc", "NLL", "split", "note");
  out << line;
  for (const CompareRow& r : rows) {
    // "—" is three bytes but one column wide; pad by hand.
    const std::string ece = r.ece ? fixed(*r.ece, 3) + (r.best ? "*" : " ") : "—     ";
    const std::string acc = r.ece ? fixed(r.accuracy, 4) : "—      ";
    const std::string nll = r.ece ? fixed(r.nll, 4) : "—      ";
    std::snprintf(line, sizeof(line), "%-10s  %-6s  %-7s  %-7s  %-16s  %s", r.method.c_str(),
                  ece.c_str(), acc.c_str(), nll.c_str(), r.split_hash.c_str(), r.note.c_str());
    std::string text = line;
    while (!text.empty() && text.back() == ' ') text.pop_back();
    out << text << '\n';
  }
  out << "* lowest ECE\n";
  return out.str();
}

ClassIou class_iou(const Dataset& data) {
  const auto k = static_cast<std::size_t>(data.num_classes);
  std::vector<std::vector<std::uint64_t>> per_image(data.images.size());
  parallel_for(data.images.size(), [&](std::size_t i) {
    std::vector<std::uint64_t>& confusion = per_image[i];
    confusion.assign(k * k, 0);
    const SegImage& image = data.images[i];
    for (std::size_t p = 0; p < image.labels.num_pixels(); ++p) {
      if (image.labels.ignored(p)) continue;
      const std::size_t pred = argmax_index(image.logits.pixel(p));
      ++confusion[image.labels.label(p) * k + pred];
    }
  });
  std::vector<std::uint64_t> confusion(k * k, 0);
  for (const auto& c : per_image) {
    for (std::size_t j = 0; j < c.size(); ++j) confusion[j] += c[j];
  }
  ClassIou out;
  std::uint64_t total = 0;
  std::uint64_t diagonal = 0;
  double iou_sum = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0;
    std::uint64_t col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += confusion[c * k + j];
      col += confusion[j * k + c];
    }
    const std::uint64_t tp = confusion[c * k + c];
    total += row;
    diagonal += tp;
    const std::uint64_t uni = row + col - tp;
    if (uni == 0) {
      out.per_class.push_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(uni);
    out.per_class.push_back(iou);
    iou_sum += iou;
    ++present;
  }
  out.pixel_accuracy = total ? static_cast<double>(diagonal) / static_cast<double>(total) : 0.0;
  out.mean_iou = present ? iou_sum / present : 0.0;
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Post-hoc calibration for semantic segmentation", "segcal"};
  app.require_subcommand(1);

  SynthOptions synth;
  auto* s = app.add_subcommand("synth", "Generate a calibrated-by-construction dataset");
  s->add_option("--out", synth.out, "Output SGCL file")->required();
  s->add_option("--images", synth.images, "Number of images")->check(CLI::NonNegativeNumber);
  s->add_option("--size", synth.size, "Image size HxW");
  s->add_option("--classes", synth.classes, "Number of classes")->check(CLI::Range(2, 65534));
  s->add_option("--sharpness", synth.sharpness, "Logit sharpness s (1 = calibrated)")
      ->check(positive_real());
  s->add_option("--boundary-noise", synth.boundary_noise,
                "Label re-draw probability near region boundaries")
      ->check(unit_interval());
  s->add_option("--boundary-radius", synth.boundary_radius, "Boundary band radius in pixels")
      ->check(CLI::NonNegativeNumber);
  s->add_option("--blobs", synth.blobs, "Region seeds per image")->check(CLI::Range(1, 1 << 20));
  s->add_option("--concentration", synth.concentration,
                "Dirichlet concentration added to the region class")
      ->check(CLI::NonNegativeNumber);
  s->add_option("--label-rule", synth.label_rule, "sampled | confidence | argmax")
      ->check(CLI::IsMember({"sampled", "confidence", "argmax"}));
  s->add_option("--rule-threshold", synth.rule_threshold,
                "Confidence above which the confidence rule labels the argmax")
      ->check(unit_interval());
  s->add_option("--members", synth.members, "Also write N logit-perturbed ensemble members")
      ->check(CLI::Range(0, 64));
  s->add_option("--member-noise", synth.member_noise, "Member logit noise (std dev)")
      ->check(CLI::NonNegativeNumber);
  s->add_option("--seed", synth.seed, "RNG seed");

  FitOptions fit;
  auto* f = app.add_subcommand("fit", "Fit a calibrator on the train/val splits");
  f->add_option("--data", fit.data, "SGCL dataset")->required();
  f->add_option("--method", fit.method, "temp | vector | dirichlet | metacal | selective")
      ->required()
      ->check(CLI::IsMember({"temp", "vector", "dirichlet", "metacal", "selective"}));
  f->add_option("--split", fit.split, "train,val,test fractions");
  f->add_option("--bins", fit.bins, "ECE bins")->check(CLI::Range(1, 100000));
  f->add_option("--seed", fit.seed, "Split and training seed");
  f->add_option("--out", fit.out, "Output parameter JSON")->required();
  f->add_option("--trace", fit.trace, "Write the per-epoch loss trace (JSON lines)");
  f->add_flag("--no-fallback", fit.no_fallback,
              "Keep the fit even if it worsens validation ECE");

  EvalOptions ev;
  auto* e = app.add_subcommand("eval", "Evaluate a calibrator on a dataset");
  e->add_option("--data", ev.data, "SGCL dataset")->required();
  e->add_option("--params", ev.params, "Parameter JSON from fit")->required();
  e->add_option("--bins", ev.bins, "ECE bins")->check(CLI::Range(1, 100000));
  e->add_option("--out", ev.out, "Report JSON (default: stdout)");
  e->add_option("--diagram", ev.diagram, "Reliability diagram CSV of the calibrated output");
  e->add_flag("--regional", ev.regional, "Add boundary / interior ECE");
  e->add_option("--radius", ev.radius, "Boundary radius for --regional")
      ->check(CLI::NonNegativeNumber);
  e->add_flag("--split-correctness", ev.split_correctness,
              "Add ECE of correctly and incorrectly predicted pixels");

  CompareOptions cmp;
  auto* c = app.add_subcommand("compare", "Fit and compare calibrators on a shared test split");
  c->add_option("--data", cmp.data, "SGCL dataset")->required();
  c->add_option("--methods", cmp.methods,
                "Comma list of temp, vector, dirichlet, metacal, ensemble, selective");
  c->add_option("--split", cmp.split, "train,val,test fractions");
  c->add_option("--bins", cmp.bins, "ECE bins")->check(CLI::Range(1, 100000));
  c->add_option("--seed", cmp.seed, "Split and training seed");
  c->add_option("--members", cmp.members, "Comma list of ensemble member SGCL files");
  c->add_option("--out", cmp.out, "Table JSON");

  AblateOptions abl;
  auto* a = app.add_subcommand("ablate", "ECE as a function of selector detection accuracy");
  a->add_option("--data", abl.data, "SGCL dataset")->required();
  a->add_option("--rates", abl.rates, "Comma list of detection rates in [0, 1]");
  a->add_option("--bins", abl.bins, "ECE bins")->check(CLI::Range(1, 100000));
  a->add_option("--t1", abl.t1, "Temperature of flagged pixels")->check(positive_real());
  a->add_option("--t2", abl.t2, "Temperature of other pixels")->check(positive_real());
  a->add_option("--tolerance", abl.tolerance, "Monotonicity tolerance")
      ->check(CLI::NonNegativeNumber);
  a->add_option("--seed", abl.seed, "Sampling seed");
  a->add_option("--out", abl.out, "Sweep JSON");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& pe) {
    err << "segcal: " << pe.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  const auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  const auto start = std::chrono::steady_clock::now();
  int code = kExitOk;
  try {
    if (name == "synth") {
      code = cmd_synth(synth, out);
    } else if (name == "fit") {
      code = cmd_fit(fit, out);
    } else if (name == "eval") {
      code = cmd_eval(ev, out);
    } else if (name == "compare") {
      code = cmd_compare(cmp, out, err);
    } else {
      code = cmd_ablate(abl, out);
    }
  } catch (const Error& ex) {
    code = exit_code_for(ex.code());
    err << "segcal " << name << ": " << ex.what() << '\n';
    if (ex.code() == ErrorCode::kDegenerateLabels) {
      err << "hint: fall back to temperature scaling (--method temp)\n";
    }
    if (code == kExitUsage) err << '\n' << sub->help();
    return code;
  } catch (const std::exception& ex) {
    err << "segcal " << name << ": " << ex.what() << '\n';
    return kExitInternal;
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  err << "segcal " << name << ": done in " << fixed(seconds, 3) << " s\n";
  return code;
}

}  // namespace segcal::cli
