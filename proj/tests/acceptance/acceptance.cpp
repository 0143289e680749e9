// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "segcal/calibrators.hpp"
#include "segcal/data_io.hpp"
#include "segcal/metrics.hpp"
#include "segcal/optim.hpp"
#include "segcal/selector.hpp"
#include "segcal/synthetic.hpp"

namespace {

using namespace segcal;
using nlohmann::json;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  std::string name;
  double time_limit_seconds;  // <= 0: no limit
  std::function<Outcome()> check;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

class ScratchDir {
 public:
  ScratchDir() {
    path_ = std::filesystem::temp_directory_path() /
            ("segcal_acceptance_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() { std::filesystem::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct CliRun {
  int code = 0;
  std::string out;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::run(args, out, err);
  return {code, out.str()};
}

double dataset_mean_ece(const Dataset& d, const CalibratorParams& params) {
  return evaluate_calibrator(d, params, BinningConfig{}).report.dataset_ece;
}

std::vector<double> random_simplex(int k, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(k);
  double sum = 0.0;
  for (double& v : p) sum += (v = e(rng));
  for (double& v : p) v /= sum;
  return p;
}

SegLogits random_logits(int h, int w, int k, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<float> v(static_cast<std::size_t>(h) * w * k);
  for (float& x : v) x = static_cast<float>(n(rng));
  return SegLogits(h, w, k, std::move(v));
}

// ---------------------------------------------------------------------------

Outcome calibrated_source() {
  double sum = 0.0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticConfig cfg;
    cfg.num_images = 100;
    cfg.height = 32;
    cfg.width = 32;
    cfg.num_classes = 10;
    cfg.sharpness = 1.0;
    cfg.seed = seed;
    const double ece = dataset_mean_ece(generate_synthetic(cfg).data, IdentityParams{});
    sum += ece;
    worst = std::max(worst, ece);
  }
  const double mean = sum / 20.0;
  return {mean <= 0.02, fmt("mean ECE %.4f over 20 seeds (max %.4f), bound 0.02", mean, worst)};
}

Outcome temperature_recovery() {
  SyntheticConfig cfg;
  cfg.sharpness = 2.5;
  cfg.seed = 2;
  const Dataset data = generate_synthetic(cfg).data;
  const DatasetSplits s = split_dataset(data, SplitSpec{0.5, 0.25, 0.25, 2});
  const FitReport r = fit_temperature(s.train, s.val, FitConfig{});
  const auto* t = std::get_if<TemperatureParams>(&r.params);
  if (t == nullptr) return {false, "fit fell back to identity"};
  const double before = dataset_mean_ece(s.test, IdentityParams{});
  const double after = dataset_mean_ece(s.test, r.params);
  bool argmax_same = true;
  for (const SegImage& image : data.images) {
    const PredictionMap a = argmax_predict(softmax_with_temperature(image.logits, 1.0));
    const PredictionMap b = argmax_predict(apply_temperature(image.logits, t->temperature));
    argmax_same = argmax_same && a.predicted == b.predicted;
  }
  const bool pass = t->temperature >= 2.3 && t->temperature <= 2.7 && after < before &&
                    argmax_same;
  return {pass, fmt("T=%.4f, test ECE %.4f -> %.4f, argmax %s", t->temperature, before, after,
                    argmax_same ? "unchanged" : "CHANGED")};
}

// Eq.-style direct summation: per bin, scan all samples.
double direct_ece(const std::vector<double>& conf, const std::vector<std::uint8_t>& correct,
                  int m) {
  const double n = static_cast<double>(conf.size());
  double ece = 0.0;
  for (int b = 1; b <= m; ++b) {
    std::uint64_t count = 0;
    double hits = 0.0;
    double conf_sum = 0.0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      if (std::clamp(static_cast<int>(std::ceil(conf[i] * m)), 1, m) != b) continue;
      ++count;
      hits += correct[i] ? 1.0 : 0.0;
      conf_sum += conf[i];
    }
    if (count == 0) continue;
    const double c = static_cast<double>(count);
    ece += c / n * std::abs(hits / c - conf_sum / c);
  }
  return ece;
}

Outcome ece_equivalence() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> size(1, 20);
  std::uniform_int_distribution<int> bins(1, 20);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = size(rng);
    const int m = bins(rng);
    std::vector<double> conf(n);
    std::vector<std::uint8_t> correct(n);
    for (int i = 0; i < n; ++i) {
      // Mix in exact bin edges so the right-closed convention is exercised.
      conf[i] = trial % 3 == 0 ? std::max(1.0 / m, std::ceil(u(rng) * m) / m)
                               : std::nextafter(u(rng), 2.0);
      conf[i] = std::min(conf[i], 1.0);
      correct[i] = u(rng) < conf[i] ? 1 : 0;
    }
    const double got = binned_ece(conf, correct, BinningConfig{m}).ece;
    if (got != direct_ece(conf, correct, m)) ++mismatches;
  }
  return {mismatches == 0, fmt("%d/200 sample sets differ bitwise", mismatches)};
}

Outcome dirichlet_identity() {
  std::mt19937_64 rng(4);
  const int k = 10;
  const SegLogits z = random_logits(10, 10, k, rng, 5.0);
  DirichletParams eye{k, std::vector<double>(k * k, 0.0), std::vector<double>(k, 0.0)};
  for (int i = 0; i < k; ++i) eye.weights[i * k + i] = 1.0;
  const ProbMap a = apply_dirichlet(z, eye);
  const ProbMap b = softmax_with_temperature(z, 1.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
  }
  return {worst <= 1e-9, fmt("max |diff| %.3g over 100 pixels, bound 1e-9", worst)};
}

Outcome metacal_degeneracy() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> temp(0.05, 20.0);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const SegLogits z = random_logits(16, 16, 10, rng, 4.0);
    const double t = temp(rng);
    const ProbMap a =
        apply_metacal_ext(z, std::numeric_limits<double>::infinity(), t, kLargeTemperature);
    const ProbMap b = apply_temperature(z, t);
    for (std::size_t i = 0; i < a.values().size(); ++i) {
      worst = std::max(worst, std::abs(a.values()[i] - b.values()[i]));
    }
  }
  return {worst <= 1e-12, fmt("max |diff| %.3g, bound 1e-12", worst)};
}

Outcome ablation_trend(const ScratchDir& dir) {
  int passing = 0;
  double first_rate0 = 0.0;
  double first_rate1 = 0.0;
  for (int seed = 0; seed < 20; ++seed) {
    const std::string data = dir.file("ablate.sgcl");
    const std::string out = dir.file("ablate.json");
    if (cli({"synth", "--out", data, "--sharpness", "3", "--seed", std::to_string(seed)}).code !=
        0) {
      return {false, "synth failed"};
    }
    if (cli({"ablate", "--data", data, "--rates", "0,0.25,0.5,0.75,1", "--seed",
             std::to_string(seed), "--out", out})
            .code != 0) {
      return {false, "ablate failed"};
    }
    const json doc = json::parse(slurp(out));
    const auto& sweep = doc["sweep"];
    const double e0 = sweep.front()["ece"];
    const double e1 = sweep.back()["ece"];
    if (seed == 0) {
      first_rate0 = e0;
      first_rate1 = e1;
    }
    if (e1 < e0 && doc["non_increasing"].get<bool>()) ++passing;
  }
  return {passing >= 18, fmt("%d/20 seeds non-increasing with ECE(1) < ECE(0) (seed 0: %.4f -> "
                             "%.4f)",
                             passing, first_rate0, first_rate1)};
}

Outcome selective_beats_temperature() {
  SyntheticConfig cfg;
  cfg.num_images = 100;
  cfg.sharpness = 3.0;
  cfg.base_concentration = 10.0;
  cfg.label_rule = LabelRule::kConfidenceThreshold;
  cfg.rule_threshold = 0.9;
  cfg.seed = 1;
  const Dataset data = generate_synthetic(cfg).data;
  const DatasetSplits s = split_dataset(data, SplitSpec{0.4, 0.2, 0.4, 1});
  FitConfig fit;
  fit.seed = 1;
  const FitReport sel = fit_selective(s.train, s.val, fit);
  const FitReport temp = fit_temperature(s.train, s.val, fit);
  if (!sel.selector_metrics) return {false, "no selector metrics (fell back?)"};
  const double detection = sel.selector_metrics->detection_accuracy;
  const Evaluation uncal = evaluate_calibrator(s.test, IdentityParams{}, fit.bins);
  const Evaluation sel_eval = evaluate_calibrator(s.test, sel.params, fit.bins);
  const Evaluation temp_eval = evaluate_calibrator(s.test, temp.params, fit.bins);
  const bool accuracy_same = sel_eval.report.accuracy == uncal.report.accuracy;
  const bool pass = detection >= 0.95 &&
                    sel_eval.report.dataset_ece < temp_eval.report.dataset_ece && accuracy_same;
  return {pass, fmt("detection %.3f; test ECE selective %.4f vs temperature %.4f "
                    "(uncalibrated %.4f); accuracy %s",
                    detection, sel_eval.report.dataset_ece, temp_eval.report.dataset_ece,
                    uncal.report.dataset_ece, accuracy_same ? "preserved" : "CHANGED")};
}

Outcome misprediction_split() {
  int passing = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticConfig cfg;
    cfg.num_images = 1;
    cfg.height = 64;
    cfg.width = 64;
    cfg.sharpness = 3.0;
    cfg.seed = seed;
    const Dataset d = generate_synthetic(cfg).data;
    const SegImage& image = d.images.front();
    const SplitEce split = split_ece_by_correctness(softmax_with_temperature(image.logits, 1.0),
                                                    image.labels, BinningConfig{});
    if (split.ece_incorrect && split.ece_correct && *split.ece_incorrect > *split.ece_correct) {
      ++passing;
    }
  }
  return {passing == 20, fmt("%d/20 seeds with ece_incorrect > ece_correct", passing)};
}

Outcome gradient_integrity() {
  double worst_temp = 0.0;
  double worst_vec = 0.0;
  double worst_dir = 0.0;
  double worst_mlp = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 900);
    Dataset d;
    d.num_classes = 4;
    std::vector<std::uint16_t> labels(9);
    std::uniform_int_distribution<int> cls(0, 3);
    for (auto& l : labels) l = static_cast<std::uint16_t>(cls(rng));
    d.images.push_back({0, random_logits(3, 3, 4, rng, 2.0), LabelMap(3, 3, labels)});
    const PixelSet pixels = collect_pixels(d, 1000, seed);
    std::normal_distribution<double> n(0.0, 0.5);

    const std::vector<double> t{0.5 + std::abs(n(rng)) * 3.0};
    worst_temp = std::max(
        worst_temp, finite_difference_check(
                        [&](std::span<const double> p, std::span<double> g) {
                          double dt = 0.0;
                          const double v = temperature_nll(pixels, p[0], &dt);
                          g[0] = dt;
                          return v;
                        },
                        t, 1e-6)
                        .max_rel_error);

    std::vector<double> vp(8);
    for (double& v : vp) v = 1.0 + n(rng);
    worst_vec = std::max(worst_vec, finite_difference_check(
                                        [&](std::span<const double> p, std::span<double> g) {
                                          return vector_nll(pixels, p, {}, g);
                                        },
                                        vp, 1e-6)
                                        .max_rel_error);

    std::vector<double> dp(20);
    for (double& v : dp) v = n(rng);
    worst_dir = std::max(worst_dir, finite_difference_check(
                                        [&](std::span<const double> p, std::span<double> g) {
                                          return dirichlet_nll(pixels, p, 1e-3, {}, g);
                                        },
                                        dp, 1e-6)
                                        .max_rel_error);

    SelectorData sd;
    sd.num_classes = 4;
    for (int i = 0; i < 5; ++i) {
      const auto p = random_simplex(4, rng);
      sd.features.insert(sd.features.end(), p.begin(), p.end());
      sd.incorrect.push_back(static_cast<std::uint8_t>(i % 2));
    }
    const MlpSelector mlp(4, 8, 6, false, seed);
    const std::vector<std::size_t> batch{0, 1, 2, 3, 4};
    const std::vector<double> at(mlp.parameters().begin(), mlp.parameters().end());
    worst_mlp = std::max(worst_mlp, finite_difference_check(
                                        [&](std::span<const double> p, std::span<double> g) {
                                          return mlp.loss_grad(p, sd, batch, g);
                                        },
                                        at, 1e-6)
                                        .max_rel_error);
  }
  const double worst = std::max({worst_temp, worst_vec, worst_dir, worst_mlp});
  return {worst < 1e-4, fmt("max rel err: temperature %.2g, vector %.2g, Dirichlet %.2g, "
                            "MLP %.2g (bound 1e-4)",
                            worst_temp, worst_vec, worst_dir, worst_mlp)};
}

Outcome boundary_statistics() {
  int passing = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    SyntheticConfig cfg;
    cfg.boundary_noise = 0.3;
    cfg.boundary_radius = 2;
    cfg.seed = seed;
    const SyntheticDataset s = generate_synthetic(cfg);
    ReliabilityBins inside(10);
    ReliabilityBins outside(10);
    for (std::size_t i = 0; i < s.data.images.size(); ++i) {
      const SegImage& image = s.data.images[i];
      const RegionalEce r = regional_ece(softmax_with_temperature(image.logits, 1.0),
                                         image.labels, s.truth[i].boundary, BinningConfig{});
      inside.merge(r.inside_bins);
      outside.merge(r.outside_bins);
    }
    if (inside.total() > 0 && outside.total() > 0 && inside.ece() > outside.ece()) ++passing;
  }
  return {passing >= 18, fmt("%d/20 seeds with boundary ECE > interior ECE", passing)};
}

Outcome determinism(const ScratchDir& dir) {
  // Container round-trip.
  SyntheticConfig cfg;
  cfg.num_images = 5;
  cfg.boundary_noise = 0.2;
  cfg.seed = 11;
  const Dataset d = generate_synthetic(cfg).data;
  const auto bytes = encode_container(d);
  write_container(d, dir.file("rt.sgcl"));
  const bool roundtrip = encode_container(read_container(dir.file("rt.sgcl"))) == bytes &&
                         slurp(dir.file("rt.sgcl")) == std::string(bytes.begin(), bytes.end());

  const std::string data = dir.file("det.sgcl");
  const std::string members = data + ".member0," + data + ".member1";
  const std::vector<std::vector<std::string>> commands{
      {"synth", "--out", data, "--images", "16", "--size", "24x24", "--sharpness", "2",
       "--label-rule", "confidence", "--concentration", "10", "--members", "2", "--seed", "5"},
      {"fit", "--data", data, "--method", "temp", "--out", dir.file("p_temp.json"), "--trace",
       dir.file("trace.jsonl")},
      {"fit", "--data", data, "--method", "vector", "--out", dir.file("p_vec.json")},
      {"fit", "--data", data, "--method", "dirichlet", "--out", dir.file("p_dir.json")},
      {"fit", "--data", data, "--method", "metacal", "--out", dir.file("p_meta.json")},
      {"fit", "--data", data, "--method", "selective", "--out", dir.file("p_sel.json")},
      {"eval", "--data", data, "--params", dir.file("p_temp.json"), "--regional",
       "--split-correctness", "--diagram", dir.file("diagram.csv")},
      {"compare", "--data", data, "--methods", "temp,vector,dirichlet,metacal,ensemble",
       "--members", members, "--out", dir.file("compare.json")},
      {"ablate", "--data", data, "--out", dir.file("ablate.json")},
  };
  const std::vector<std::string> files{
      data,
      data + ".manifest.json",
      data + ".member0",
      data + ".member1",
      dir.file("p_temp.json"),
      dir.file("trace.jsonl"),
      dir.file("p_vec.json"),
      dir.file("p_dir.json"),
      dir.file("p_meta.json"),
      dir.file("p_sel.json"),
      dir.file("diagram.csv"),
      dir.file("compare.json"),
      dir.file("ablate.json"),
  };

  auto run_all = [&](std::vector<std::string>& outputs) {
    for (const auto& args : commands) {
      const CliRun r = cli(args);
      if (r.code != 0) return args.front();
      outputs.push_back(r.out);
    }
    for (const std::string& f : files) outputs.push_back(slurp(f));
    return std::string();
  };
  std::vector<std::string> first;
  std::vector<std::string> second;
  if (std::string failed = run_all(first); !failed.empty()) {
    return {false, "command '" + failed + "' failed"};
  }
  if (std::string failed = run_all(second); !failed.empty()) {
    return {false, "command '" + failed + "' failed on rerun"};
  }
  int differing = 0;
  for (std::size_t i = 0; i < first.size(); ++i) differing += first[i] != second[i];
  return {roundtrip && differing == 0,
          fmt("container round-trip %s; %d/%zu CLI outputs differ across reruns",
              roundtrip ? "bit-exact" : "MISMATCH", differing, first.size())};
}

Outcome degenerate_handling(const ScratchDir& dir) {
  const std::string data = dir.file("argmax.sgcl");
  if (cli({"synth", "--out", data, "--images", "8", "--sharpness", "3", "--label-rule",
           "argmax"})
          .code != 0) {
    return {false, "synth failed"};
  }
  const int code = cli({"fit", "--data", data, "--method", "selective", "--out",
                        dir.file("never.json")})
                       .code;
  const bool exit_ok = code == cli::kExitDegenerate;

  Dataset d;
  d.num_classes = 3;
  std::mt19937_64 rng(12);
  d.images.push_back({7, random_logits(4, 4, 3, rng, 1.0), LabelMap(4, 4, std::vector<std::uint16_t>(16, 1))});
  d.images.push_back({42, random_logits(4, 4, 3, rng, 1.0),
                      LabelMap(4, 4, std::vector<std::uint16_t>(16, kIgnoreLabel))});
  bool named = false;
  std::string message;
  try {
    dataset_mean_ece(d, IdentityParams{});
  } catch (const Error& e) {
    message = e.what();
    named = e.code() == ErrorCode::kAllPixelsIgnored && e.context() == 42u &&
            message.find("42") != std::string::npos;
  }
  return {exit_ok && named,
          fmt("fit selective exit code %d (expected %d); all-ignored image: %s", code,
              cli::kExitDegenerate, named ? "AllPixelsIgnored naming image 42" : message.c_str())};
}

}  // namespace

int main() {
  ScratchDir dir;
  const std::vector<Criterion> criteria{
      {1, "calibrated-source ECE", 10.0, calibrated_source},
      {2, "temperature recovery", 30.0, temperature_recovery},
      {3, "brute-force ECE equivalence", 0.0, ece_equivalence},
      {4, "Dirichlet identity", 0.0, dirichlet_identity},
      {5, "meta-cal degeneracy", 0.0, metacal_degeneracy},
      {6, "selector-accuracy trend", 60.0, [&] { return ablation_trend(dir); }},
      {7, "selective beats temperature", 0.0, selective_beats_temperature},
      {8, "misprediction split", 0.0, misprediction_split},
      {9, "gradient integrity", 0.0, gradient_integrity},
      {10, "boundary statistics", 0.0, boundary_statistics},
      {11, "determinism and I/O", 0.0, [&] { return determinism(dir); }},
      {12, "degenerate handling", 0.0, [&] { return degenerate_handling(dir); }},
  };

  int failures = 0;
  for (const Criterion& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::string timing = fmt("%.1fs", seconds);
    if (c.time_limit_seconds > 0.0) {
      timing += fmt(" (limit %.0fs)", c.time_limit_seconds);
      if (seconds >= c.time_limit_seconds) {
        o.pass = false;
        o.detail += "; over time limit";
      }
    }
    if (!o.pass) ++failures;
    std::printf("%s %2d %s: %s [%s]\n", o.pass ? "PASS" : "FAIL", c.number, c.name.c_str(),
                o.detail.c_str(), timing.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures == 0 ? 0 : 1;
}
