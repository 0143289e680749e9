#pragma once

// Small builders shared by the unit tests.

#include <cstdint>
#include <random>
#include <vector>

#include "segcal/tensor.hpp"

namespace segcal::testing {

inline SegLogits random_logits(int h, int w, int k, std::mt19937_64& rng, double scale = 3.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<float> v(static_cast<std::size_t>(h) * w * k);
  for (float& x : v) x = static_cast<float>(n(rng));
  return SegLogits(h, w, k, std::move(v));
}

inline LabelMap random_labels(int h, int w, int k, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> c(0, k - 1);
  std::vector<std::uint16_t> v(static_cast<std::size_t>(h) * w);
  for (auto& x : v) x = static_cast<std::uint16_t>(c(rng));
  return LabelMap(h, w, std::move(v));
}

inline Dataset random_dataset(int images, int h, int w, int k, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.num_classes = k;
  for (int i = 0; i < images; ++i) {
    d.images.push_back(SegImage{static_cast<std::uint32_t>(i), random_logits(h, w, k, rng),
                                random_labels(h, w, k, rng)});
  }
  return d;
}

// One-row probability map from explicit vectors.
inline ProbMap probs_row(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return ProbMap(1, static_cast<int>(rows.size()), static_cast<int>(rows.front().size()),
                 std::move(flat));
}

inline LabelMap labels_row(const std::vector<std::uint16_t>& labels) {
  return LabelMap(1, static_cast<int>(labels.size()), labels);
}

}  // namespace segcal::testing
