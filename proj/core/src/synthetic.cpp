#include "segcal/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "segcal/metrics.hpp"
#include "segcal/parallel.hpp"
#include "segcal/random.hpp"

namespace segcal {
namespace {

struct Seed {
  int row;
  int col;
  std::uint16_t cls;
};

std::vector<std::uint16_t> region_map(const SyntheticConfig& cfg, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> row(0, cfg.height - 1);
  std::uniform_int_distribution<int> col(0, cfg.width - 1);
  std::uniform_int_distribution<int> cls(0, cfg.num_classes - 1);
  std::vector<Seed> seeds(static_cast<std::size_t>(cfg.blob_seeds_per_image));
  for (Seed& s : seeds) {
    s.row = row(rng);
    s.col = col(rng);
    s.cls = static_cast<std::uint16_t>(cls(rng));
  }
  std::vector<std::uint16_t> regions(static_cast<std::size_t>(cfg.height) * cfg.width);
  for (int r = 0; r < cfg.height; ++r) {
    for (int c = 0; c < cfg.width; ++c) {
      long best = -1;
      std::uint16_t best_cls = 0;
      for (const Seed& s : seeds) {
        const long dr = r - s.row;
        const long dc = c - s.col;
        const long d2 = dr * dr + dc * dc;
        if (best < 0 || d2 < best) {
          best = d2;
          best_cls = s.cls;
        }
      }
      regions[static_cast<std::size_t>(r) * cfg.width + c] = best_cls;
    }
  }
  return regions;
}

SegImage generate_image(const SyntheticConfig& cfg, std::uint32_t id,
                        SyntheticImageTruth& truth) {
  std::mt19937_64 rng(derive_seed(cfg.seed, id));
  const auto k = static_cast<std::size_t>(cfg.num_classes);
  const std::size_t pixels = static_cast<std::size_t>(cfg.height) * cfg.width;

  truth.regions = region_map(cfg, rng);
  truth.boundary = boundary_mask(LabelMap(cfg.height, cfg.width, truth.regions),
                                 BoundaryConfig{cfg.boundary_radius});
  truth.noise.assign(pixels, 0);
  truth.true_probs.resize(pixels * k);

  std::vector<float> logits(pixels * k);
  std::vector<std::uint16_t> labels(pixels);
  std::vector<double> softmax(k);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> any_class(0, cfg.num_classes - 1);
  std::uniform_int_distribution<int> other_class(0, std::max(cfg.num_classes - 2, 0));

  for (std::size_t i = 0; i < pixels; ++i) {
    double* p = &truth.true_probs[i * k];
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double alpha = cfg.dirichlet_alpha.empty() ? 1.0 : cfg.dirichlet_alpha[c];
      if (c == truth.regions[i]) alpha += cfg.base_concentration;
      p[c] = std::gamma_distribution<double>(alpha, 1.0)(rng);
      total += p[c];
    }
    // Floor then renormalize so log p is finite and softmax(log p) == p.
    double floored = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      p[c] = std::max(p[c] / total, kProbabilityFloor);
      floored += p[c];
    }
    for (std::size_t c = 0; c < k; ++c) {
      p[c] /= floored;
      logits[i * k + c] = static_cast<float>(cfg.sharpness * std::log(p[c]));
    }

    const auto z = std::span<const float>(logits).subspan(i * k, k);
    const std::size_t top = argmax_index(z);
    std::uint16_t y = 0;
    switch (cfg.label_rule) {
      case LabelRule::kSampled: {
        const double u = unit(rng);
        double acc = 0.0;
        y = static_cast<std::uint16_t>(k - 1);
        for (std::size_t c = 0; c < k; ++c) {
          acc += p[c];
          if (u < acc) {
            y = static_cast<std::uint16_t>(c);
            break;
          }
        }
        break;
      }
      case LabelRule::kConfidenceThreshold: {
        softmax_into(z, 1.0, std::span<double>(softmax));
        if (softmax[top] > cfg.rule_threshold || k == 1) {
          y = static_cast<std::uint16_t>(top);
        } else {
          y = static_cast<std::uint16_t>((top + 1 + static_cast<std::size_t>(other_class(rng))) % k);
        }
        break;
      }
      case LabelRule::kArgmax:
        y = static_cast<std::uint16_t>(top);
        break;
    }
    if (truth.boundary[i] && cfg.boundary_noise > 0.0 && unit(rng) < cfg.boundary_noise) {
      y = static_cast<std::uint16_t>(any_class(rng));
      truth.noise[i] = 1;
    }
    labels[i] = y;
  }
  return SegImage{id, SegLogits(cfg.height, cfg.width, cfg.num_classes, std::move(logits)),
                  LabelMap(cfg.height, cfg.width, std::move(labels))};
}

}  // namespace

std::string_view label_rule_name(LabelRule rule) {
  switch (rule) {
    case LabelRule::kSampled:
      return "sampled";
    case LabelRule::kConfidenceThreshold:
      return "confidence_threshold";
    case LabelRule::kArgmax:
      return "argmax";
  }
  return "unknown";
}

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kInvalidArgument, msg); };
  if (num_images < 0) fail("num_images must be >= 0");
  if (height < 1 || width < 1) fail("image size must be at least 1x1");
  if (num_classes < 2 || num_classes >= kIgnoreLabel) fail("num_classes must be in [2, 65534]");
  if (!dirichlet_alpha.empty()) {
    if (dirichlet_alpha.size() != static_cast<std::size_t>(num_classes)) {
      fail("dirichlet_alpha must have one entry per class");
    }
    for (double a : dirichlet_alpha) {
      if (!(a > 0.0) || !std::isfinite(a)) fail("dirichlet_alpha entries must be positive");
    }
  }
  if (!(base_concentration >= 0.0) || !std::isfinite(base_concentration)) {
    fail("base_concentration must be >= 0");
  }
  if (!(sharpness > 0.0) || !std::isfinite(sharpness)) fail("sharpness must be > 0");
  if (blob_seeds_per_image < 1) fail("blob_seeds_per_image must be >= 1");
  if (!(boundary_noise >= 0.0 && boundary_noise <= 1.0)) fail("boundary_noise must be in [0, 1]");
  if (boundary_radius < 0) fail("boundary_radius must be >= 0");
  if (!(rule_threshold >= 0.0 && rule_threshold <= 1.0)) fail("rule_threshold must be in [0, 1]");
}

nlohmann::json synthetic_config_to_json(const SyntheticConfig& cfg) {
  nlohmann::json alpha = cfg.dirichlet_alpha.empty()
                             ? nlohmann::json(std::vector<double>(cfg.num_classes, 1.0))
                             : nlohmann::json(cfg.dirichlet_alpha);
  return nlohmann::json{{"generator", "segcal-synthetic"},
                        {"num_images", cfg.num_images},
                        {"height", cfg.height},
                        {"width", cfg.width},
                        {"num_classes", cfg.num_classes},
                        {"dirichlet_alpha", alpha},
                        {"base_concentration", cfg.base_concentration},
                        {"sharpness", cfg.sharpness},
                        {"blob_seeds_per_image", cfg.blob_seeds_per_image},
                        {"boundary_noise", cfg.boundary_noise},
                        {"boundary_radius", cfg.boundary_radius},
                        {"label_rule", label_rule_name(cfg.label_rule)},
                        {"rule_threshold", cfg.rule_threshold},
                        {"seed", cfg.seed}};
}

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  SyntheticDataset out;
  out.data.num_classes = cfg.num_classes;
  const auto n = static_cast<std::size_t>(cfg.num_images);
  out.data.images.resize(n);
  out.truth.resize(n);
  parallel_for(n, [&](std::size_t i) {
    out.data.images[i] = generate_image(cfg, static_cast<std::uint32_t>(i), out.truth[i]);
  });
  return out;
}

Dataset perturb_logits(const Dataset& data, double stddev, std::uint64_t seed) {
  if (!(stddev >= 0.0) || !std::isfinite(stddev)) {
    throw Error(ErrorCode::kInvalidArgument, "noise level must be >= 0");
  }
  Dataset out;
  out.num_classes = data.num_classes;
  out.images.resize(data.images.size());
  parallel_for(data.images.size(), [&](std::size_t i) {
    const SegImage& image = data.images[i];
    std::mt19937_64 rng(derive_seed(seed, image.id));
    std::normal_distribution<double> noise(0.0, stddev);
    std::vector<float> values(image.logits.values().begin(), image.logits.values().end());
    if (stddev > 0.0) {
      for (float& v : values) v = static_cast<float>(v + noise(rng));
    }
    out.images[i] = SegImage{image.id,
                             SegLogits(image.logits.height(), image.logits.width(),
                                       image.logits.num_classes(), std::move(values)),
                             image.labels};
  });
  return out;
}

}  // namespace segcal
