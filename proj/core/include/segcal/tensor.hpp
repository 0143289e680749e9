#pragma once

// Dense per-pixel tensors for segmentation outputs and the elementary
// probabilistic operations on them. All maps are row-major with the class
// index varying fastest.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "segcal/error.hpp"

namespace segcal {

inline constexpr std::uint16_t kIgnoreLabel = 0xFFFF;

// Lower clamp applied before every log of a probability.
inline constexpr double kProbabilityFloor = 1e-12;

/// Raw pre-softmax scores, H x W x K, stored as 32-bit reals.
class SegLogits {
 public:
  SegLogits() = default;
  // Throws kDimensionMismatch / kNonFiniteInput when the invariants fail.
  SegLogits(int height, int width, int num_classes, std::vector<float> values);

  int height() const { return height_; }
  int width() const { return width_; }
  int num_classes() const { return num_classes_; }
  std::size_t num_pixels() const {
    return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
  }

  std::span<const float> values() const { return values_; }
  std::span<const float> pixel(std::size_t index) const {
    return std::span<const float>(values_).subspan(
        index * static_cast<std::size_t>(num_classes_), num_classes_);
  }

  friend bool operator==(const SegLogits&, const SegLogits&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int num_classes_ = 0;
  std::vector<float> values_;
};

/// Ground-truth class per pixel, kIgnoreLabel marks void pixels.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(int height, int width, std::vector<std::uint16_t> labels);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t num_pixels() const { return labels_.size(); }
  std::uint16_t label(std::size_t index) const { return labels_[index]; }
  bool ignored(std::size_t index) const { return labels_[index] == kIgnoreLabel; }
  std::span<const std::uint16_t> labels() const { return labels_; }
  std::size_t num_valid() const;

  // kInvalidLabel if a non-ignore label is >= num_classes.
  void validate_classes(int num_classes) const;

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint16_t> labels_;
};

/// Per-pixel probability vectors; every row sums to one within 1e-6.
class ProbMap {
 public:
  ProbMap() = default;
  ProbMap(int height, int width, int num_classes, std::vector<double> values);

  int height() const { return height_; }
  int width() const { return width_; }
  int num_classes() const { return num_classes_; }
  std::size_t num_pixels() const {
    return static_cast<std::size_t>(height_) * static_cast<std::size_t>(width_);
  }
  std::span<const double> values() const { return values_; }
  std::span<const double> pixel(std::size_t index) const {
    return std::span<const double>(values_).subspan(
        index * static_cast<std::size_t>(num_classes_), num_classes_);
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int num_classes_ = 0;
  std::vector<double> values_;
};

struct PredictionMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint16_t> predicted;
  std::vector<double> confidence;
};

enum class PixelOutcome : std::uint8_t { kCorrect, kIncorrect, kIgnored };

struct SegImage {
  std::uint32_t id = 0;
  SegLogits logits;
  LabelMap labels;

  friend bool operator==(const SegImage&, const SegImage&) = default;
};

struct Dataset {
  int num_classes = 0;
  std::vector<SegImage> images;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Shared shape check for a logits/labels pair; throws kDimensionMismatch.
void check_same_shape(const SegLogits& logits, const LabelMap& labels);
void check_same_shape(const ProbMap& probs, const LabelMap& labels);

// Numerically stable softmax of scores * inv_temperature written to out.
template <typename T>
void softmax_into(std::span<const T> scores, double inv_temperature,
                  std::span<double> out) {
  double max_score = static_cast<double>(scores[0]) * inv_temperature;
  for (std::size_t k = 1; k < scores.size(); ++k) {
    max_score = std::max(max_score, static_cast<double>(scores[k]) * inv_temperature);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    out[k] = std::exp(static_cast<double>(scores[k]) * inv_temperature - max_score);
    total += out[k];
  }
  for (std::size_t k = 0; k < scores.size(); ++k) out[k] /= total;
}

// Index of the largest entry, lowest index on ties.
template <typename T>
std::size_t argmax_index(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k] > values[best]) best = k;
  }
  return best;
}

ProbMap softmax_with_temperature(const SegLogits& logits, double temperature);
PredictionMap argmax_predict(const ProbMap& probs);
std::vector<PixelOutcome> correctness_mask(const PredictionMap& pred,
                                           const LabelMap& labels);

// -c * ln(c) for the max-class confidence c, clamped at kProbabilityFloor.
double confidence_entropy(double confidence);
std::vector<double> pixel_entropy(const ProbMap& probs);

void require_positive_temperature(double temperature);

// Non-ignored pixel indices per image. When the dataset holds more than
// `cap` valid pixels, each image keeps a share proportional to its count,
// drawn without replacement from a generator seeded by (seed, image id).
// Indices within an image stay in ascending order.
std::vector<std::vector<std::size_t>> stratified_pixels(const Dataset& data,
                                                        std::size_t cap,
                                                        std::uint64_t seed);

}  // namespace segcal
