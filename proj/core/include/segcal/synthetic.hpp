#pragma once

// Calibrated-by-construction segmentation data. Every pixel draws a true
// class distribution p, a label y ~ Categorical(p) and logits s * log p, so
// with sharpness s = 1 the softmax output is exactly the data-generating
// distribution and the NLL-optimal temperature is s.

#include <cstdint>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "segcal/tensor.hpp"

namespace segcal {

enum class LabelRule {
  // y ~ Categorical(p).
  kSampled,
  // y = argmax when the softmax confidence exceeds rule_threshold, otherwise
  // a uniformly chosen other class: correctness is a function of confidence.
  kConfidenceThreshold,
  // y = argmax everywhere: no mispredictions.
  kArgmax,
};

std::string_view label_rule_name(LabelRule rule);

struct SyntheticConfig {
  int num_images = 100;
  int height = 32;
  int width = 32;
  int num_classes = 10;
  // Base Dirichlet concentration per class; empty means all 1.0.
  std::vector<double> dirichlet_alpha;
  // Added to the concentration of the pixel's region class.
  double base_concentration = 60.0;
  double sharpness = 1.0;
  int blob_seeds_per_image = 6;
  // Probability that a pixel within boundary_radius of a region boundary has
  // its label re-drawn uniformly.
  double boundary_noise = 0.0;
  int boundary_radius = 2;
  LabelRule label_rule = LabelRule::kSampled;
  double rule_threshold = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json synthetic_config_to_json(const SyntheticConfig& cfg);

struct SyntheticImageTruth {
  std::vector<double> true_probs;       // H*W*K, the p each label was drawn from
  std::vector<std::uint16_t> regions;   // region class per pixel
  std::vector<std::uint8_t> boundary;   // within radius of a region boundary
  std::vector<std::uint8_t> noise;      // label was re-drawn
};

struct SyntheticDataset {
  Dataset data;
  std::vector<SyntheticImageTruth> truth;  // aligned with data.images
};

// Bit-deterministic for a given config; image i uses seed
// derive_seed(cfg.seed, i) and gets id i.
SyntheticDataset generate_synthetic(const SyntheticConfig& cfg);

// Copy of the dataset with i.i.d. Gaussian noise of the given standard
// deviation added to every logit; models an ensemble member.
Dataset perturb_logits(const Dataset& data, double stddev, std::uint64_t seed);

}  // namespace segcal
