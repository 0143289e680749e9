#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include <unistd.h>

#include <doctest.h>

#include "segcal/calibrators.hpp"
#include "segcal/data_io.hpp"
#include "segcal/serialization.hpp"
#include "segcal/synthetic.hpp"
#include "support.hpp"

using namespace segcal;
using segcal::testing::random_dataset;

namespace {

ErrorCode code_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::kFormatError;
}

std::optional<std::uint64_t> context_of(const auto& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.context();
  }
  return std::nullopt;
}

bool same_dataset(const Dataset& a, const Dataset& b) {
  if (a.num_classes != b.num_classes || a.images.size() != b.images.size()) return false;
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    const SegImage& x = a.images[i];
    const SegImage& y = b.images[i];
    if (x.id != y.id || x.logits.height() != y.logits.height() ||
        x.logits.width() != y.logits.width()) {
      return false;
    }
    // Compare bit patterns so -0.0 and NaN payloads would count.
    if (!std::equal(x.logits.values().begin(), x.logits.values().end(),
                    y.logits.values().begin(), y.logits.values().end(),
                    [](float u, float v) {
                      return std::bit_cast<std::uint32_t>(u) == std::bit_cast<std::uint32_t>(v);
                    })) {
      return false;
    }
    if (!std::ranges::equal(x.labels.labels(), y.labels.labels())) return false;
  }
  return true;
}

void put_u32(std::vector<std::uint8_t>& bytes, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() /
         ("segcal_data_io_" + std::to_string(::getpid()) + "_" + name);
}

std::vector<std::uint32_t> ids(const Dataset& d) {
  std::vector<std::uint32_t> out;
  for (const SegImage& image : d.images) out.push_back(image.id);
  return out;
}

}  // namespace

TEST_CASE("container layout of a tiny dataset") {
  Dataset d;
  d.num_classes = 2;
  d.images.push_back({7, SegLogits(1, 1, 2, {1.0f, -2.0f}), LabelMap(1, 1, {kIgnoreLabel})});
  const auto bytes = encode_container(d);
  const std::vector<std::uint8_t> expected{
      'S', 'G', 'C', 'L', 1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0,  // header
      7, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0,                      // image header
      0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0,          // 1.0f, -2.0f
      0xff, 0xff};                                             // ignore label
  CHECK(bytes == expected);
  CHECK(same_dataset(decode_container(bytes), d));
}

TEST_CASE("container round-trip is bit-exact") {
  const Dataset d = random_dataset(3, 5, 7, 4, 1);
  const auto path = temp_path("roundtrip.sgcl");
  write_container(d, path);
  CHECK(same_dataset(read_container(path), d));
  std::filesystem::remove(path);

  SyntheticConfig cfg;
  cfg.num_images = 4;
  cfg.height = 9;
  cfg.width = 11;
  cfg.sharpness = 2.0;
  cfg.boundary_noise = 0.3;
  const Dataset s = generate_synthetic(cfg).data;
  CHECK(same_dataset(decode_container(encode_container(s)), s));
}

TEST_CASE("container decoding errors") {
  const auto good = encode_container(random_dataset(2, 3, 3, 3, 2));

  auto bad_magic = good;
  bad_magic[0] = bad_magic[1] = bad_magic[2] = bad_magic[3] = 'X';
  CHECK(code_of([&] { decode_container(bad_magic); }) == ErrorCode::kBadMagic);
  CHECK(code_of([] { decode_container(std::vector<std::uint8_t>{'S', 'G'}); }) ==
        ErrorCode::kBadMagic);

  auto version = good;
  put_u32(version, 4, 2);
  CHECK(code_of([&] { decode_container(version); }) == ErrorCode::kVersionUnsupported);

  // Cut inside the first image's logits.
  const std::vector<std::uint8_t> cut(good.begin(), good.begin() + 16 + 12 + 10);
  CHECK(code_of([&] { decode_container(cut); }) == ErrorCode::kTruncatedPayload);
  CHECK(context_of([&] { decode_container(cut); }) == cut.size());

  auto trailing = good;
  trailing.push_back(0);
  CHECK(code_of([&] { decode_container(trailing); }) == ErrorCode::kTrailingBytes);
  CHECK(context_of([&] { decode_container(trailing); }) == good.size());

  auto classes = good;
  put_u32(classes, 8, 1);
  CHECK(code_of([&] { decode_container(classes); }) == ErrorCode::kFormatError);

  // A label that is neither a class nor the ignore value.
  auto label = good;
  const std::size_t first_label = 16 + 12 + 3 * 3 * 3 * 4;
  label[first_label] = 9;
  label[first_label + 1] = 0;
  CHECK(code_of([&] { decode_container(label); }) == ErrorCode::kInvalidLabel);

  CHECK(code_of([] { read_container("/nonexistent/dir/file.sgcl"); }) == ErrorCode::kIoError);
}

TEST_CASE("manifest sidecar") {
  Manifest m{"x.sgcl", 10, 5, nlohmann::json{{"generator", "synthetic"}}};
  const auto j = manifest_to_json(m);
  CHECK(j["file"] == "x.sgcl");
  CHECK(j["num_classes"] == 10);
  CHECK(j["num_images"] == 5);
  CHECK(j["provenance"]["generator"] == "synthetic");
  CHECK(manifest_path("a/b.sgcl") == std::filesystem::path("a/b.sgcl.manifest.json"));
}

TEST_CASE("split sizes follow floor-then-remainder") {
  const Dataset d = random_dataset(10, 2, 2, 3, 3);
  const DatasetSplits s = split_dataset(d, SplitSpec{0.5, 0.2, 0.3, 9});
  CHECK(s.train.images.size() == 5);
  CHECK(s.val.images.size() == 2);
  CHECK(s.test.images.size() == 3);

  const DatasetSplits all = split_dataset(d, SplitSpec{1.0, 0.0, 0.0, 9});
  CHECK(all.train.images.size() == 10);
  CHECK(all.val.images.empty());
  CHECK(all.test.images.empty());

  const DatasetSplits odd = split_dataset(random_dataset(7, 2, 2, 3, 3), SplitSpec{0.5, 0.25, 0.25, 1});
  CHECK(odd.train.images.size() == 3);
  CHECK(odd.val.images.size() == 1);
  CHECK(odd.test.images.size() == 3);
}

TEST_CASE("splits are deterministic partitions") {
  const Dataset d = random_dataset(40, 2, 2, 3, 4);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SplitSpec spec{0.4, 0.3, 0.3, seed};
    const DatasetSplits a = split_dataset(d, spec);
    const DatasetSplits b = split_dataset(d, spec);
    CHECK(ids(a.train) == ids(b.train));
    CHECK(ids(a.val) == ids(b.val));
    CHECK(ids(a.test) == ids(b.test));
    std::multiset<std::uint32_t> seen;
    for (const Dataset* part : {&a.train, &a.val, &a.test}) {
      for (std::uint32_t id : ids(*part)) seen.insert(id);
    }
    CHECK(seen.size() == 40);
    CHECK(std::set<std::uint32_t>(seen.begin(), seen.end()).size() == 40);
  }
  CHECK(ids(split_dataset(d, {0.4, 0.3, 0.3, 1}).train) !=
        ids(split_dataset(d, {0.4, 0.3, 0.3, 2}).train));
}

TEST_CASE("split specification validation") {
  CHECK_THROWS_AS(SplitSpec({0.5, 0.5, 0.5, 0}).validate(), Error);
  CHECK_THROWS_AS(SplitSpec({0.0, 0.5, 0.5, 0}).validate(), Error);
  CHECK_THROWS_AS(SplitSpec({1.2, -0.2, 0.0, 0}).validate(), Error);
  CHECK_NOTHROW(SplitSpec({0.6, 0.2, 0.2, 0}).validate());
  CHECK(code_of([] { require_nonempty(Dataset{}, "validation"); }) == ErrorCode::kEmptySplit);
  CHECK(code_of([] { split_dataset(Dataset{}, SplitSpec{}); }) == ErrorCode::kEmptyDataset);
}

TEST_CASE("generator is bit-deterministic per seed") {
  SyntheticConfig cfg;
  cfg.num_images = 5;
  cfg.height = 12;
  cfg.width = 10;
  cfg.boundary_noise = 0.2;
  cfg.seed = 42;
  const SyntheticDataset a = generate_synthetic(cfg);
  const SyntheticDataset b = generate_synthetic(cfg);
  CHECK(encode_container(a.data) == encode_container(b.data));
  CHECK(a.truth[3].noise == b.truth[3].noise);
  cfg.seed = 43;
  CHECK(encode_container(generate_synthetic(cfg).data) != encode_container(a.data));
  for (std::size_t i = 0; i < a.data.images.size(); ++i) CHECK(a.data.images[i].id == i);
}

TEST_CASE("calibrated generator output matches its true probabilities") {
  SyntheticConfig cfg;
  cfg.num_images = 3;
  cfg.height = 16;
  cfg.width = 16;
  cfg.seed = 5;
  const SyntheticDataset s = generate_synthetic(cfg);
  for (std::size_t i = 0; i < s.data.images.size(); ++i) {
    const ProbMap p = softmax_with_temperature(s.data.images[i].logits, 1.0);
    const auto& truth = s.truth[i].true_probs;
    REQUIRE(truth.size() == p.values().size());
    double worst = 0.0;
    for (std::size_t j = 0; j < truth.size(); ++j) {
      worst = std::max(worst, std::abs(truth[j] - p.values()[j]));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("generator label rules and noise bands") {
  SyntheticConfig cfg;
  cfg.num_images = 3;
  cfg.height = 20;
  cfg.width = 20;
  cfg.sharpness = 3.0;
  cfg.label_rule = LabelRule::kArgmax;
  const Dataset perfect = generate_synthetic(cfg).data;
  for (const SegImage& image : perfect.images) {
    const PredictionMap pred = argmax_predict(softmax_with_temperature(image.logits, 1.0));
    for (std::size_t p = 0; p < pred.predicted.size(); ++p) {
      CHECK(pred.predicted[p] == image.labels.label(p));
    }
  }

  cfg.label_rule = LabelRule::kConfidenceThreshold;
  cfg.base_concentration = 10.0;
  const Dataset rule = generate_synthetic(cfg).data;
  for (const SegImage& image : rule.images) {
    const PredictionMap pred = argmax_predict(softmax_with_temperature(image.logits, 1.0));
    for (std::size_t p = 0; p < pred.predicted.size(); ++p) {
      CHECK((pred.predicted[p] == image.labels.label(p)) == (pred.confidence[p] > 0.9));
    }
  }

  cfg.label_rule = LabelRule::kSampled;
  cfg.boundary_noise = 1.0;
  const SyntheticDataset noisy = generate_synthetic(cfg);
  for (const SyntheticImageTruth& t : noisy.truth) {
    for (std::size_t p = 0; p < t.noise.size(); ++p) {
      if (t.noise[p]) CHECK(t.boundary[p] == 1);
      if (t.boundary[p]) CHECK(t.noise[p] == 1);
    }
  }

  SyntheticConfig bad;
  bad.sharpness = 0.0;
  CHECK_THROWS_AS(generate_synthetic(bad), Error);
  bad = SyntheticConfig{};
  bad.num_classes = 1;
  CHECK_THROWS_AS(generate_synthetic(bad), Error);
}

TEST_CASE("perturbed members keep shapes and differ from the base") {
  const Dataset d = random_dataset(2, 3, 3, 4, 6);
  const Dataset m = perturb_logits(d, 0.5, 1);
  CHECK(m.images.size() == 2);
  CHECK(m.images[0].labels.labels()[0] == d.images[0].labels.labels()[0]);
  CHECK(m.images[0].logits.values()[0] != d.images[0].logits.values()[0]);
  CHECK(encode_container(perturb_logits(d, 0.5, 1)) == encode_container(m));
}

TEST_CASE("calibrator parameter documents round-trip") {
  const double inf = std::numeric_limits<double>::infinity();
  DirichletParams dir{3, {1, 0.1, 0, 0, 1, 0.2, 0.3, 0, 1}, {0.1, -0.2, 0.1}};
  const std::vector<CalibratorParams> all{
      IdentityParams{},
      TemperatureParams{2.5},
      VectorParams{{1.0, 0.5, 2.0}, {0.0, -1.0, 1.0}},
      dir,
      MetaCalParams{0.25, 1.3, kLargeTemperature},
      MetaCalParams{inf, 1.0, kLargeTemperature},
      SelectiveParams{MlpSelector(3, 5, 4, true, 8), kLargeTemperature, 1.0, 0.5},
      EnsembleParams{4},
  };
  for (const CalibratorParams& p : all) {
    const nlohmann::json j = params_to_json(p, 3);
    const ParamsFile back = params_from_json(nlohmann::json::parse(j.dump()));
    CHECK(back.num_classes == 3);
    CHECK(params_to_json(back.params, 3) == j);
    CHECK(method_name(back.params) == method_name(p));
  }

  const auto j = params_to_json(dir, 3);
  CHECK(j["params"]["W"].size() == 3);
  CHECK(j["params"]["W"][1].size() == 3);
  CHECK(params_to_json(all[5], 3)["params"]["gamma"].is_null());

  // The selector survives with identical outputs.
  const auto& sel = std::get<SelectiveParams>(all[6]);
  const auto back = std::get<SelectiveParams>(params_from_json(params_to_json(sel, 3)).params);
  const std::vector<double> probe{0.2, 0.5, 0.3};
  CHECK(back.selector.forward(probe) == sel.selector.forward(probe));
  CHECK(back.selector.sorted_input());

  const auto path = temp_path("params.json");
  write_params(all[1], 3, path);
  CHECK(std::get<TemperatureParams>(read_params(path).params).temperature == 2.5);
  std::filesystem::remove(path);
}

TEST_CASE("malformed parameter documents are rejected") {
  auto doc = params_to_json(TemperatureParams{2.0}, 4);
  auto wrong_version = doc;
  wrong_version["version"] = 99;
  CHECK(code_of([&] { params_from_json(wrong_version); }) == ErrorCode::kVersionUnsupported);
  auto no_temp = doc;
  no_temp["params"].erase("temperature");
  CHECK(code_of([&] { params_from_json(no_temp); }) == ErrorCode::kFormatError);
  auto negative = doc;
  negative["params"]["temperature"] = -1.0;
  CHECK(code_of([&] { params_from_json(negative); }) == ErrorCode::kNonPositiveTemperature);
  auto unknown = doc;
  unknown["method"] = "platt";
  CHECK(code_of([&] { params_from_json(unknown); }) == ErrorCode::kFormatError);
  CHECK(code_of([] { params_from_json(nlohmann::json::array()); }) == ErrorCode::kFormatError);
}

TEST_CASE("diagram CSV and trace lines") {
  ReliabilityBins bins(2);
  bins.add(0.3, false);
  bins.add(0.9, true);
  const std::string csv = diagram_csv(reliability_diagram_data(bins));
  CHECK(csv.rfind("bin_low,bin_high,acc,conf,count,gap\n", 0) == 0);
  CHECK(csv.find("0.5,1.0,1.0,0.9,1,") != std::string::npos);

  const std::string lines = trace_to_jsonl({{1, 0.5, std::nullopt}, {2, 0.25, 0.3}});
  CHECK(lines == "{\"epoch\":1,\"loss\":0.5,\"val_loss\":null}\n"
                 "{\"epoch\":2,\"loss\":0.25,\"val_loss\":0.3}\n");
}
