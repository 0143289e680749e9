#include "segcal/tensor.hpp"

#include <random>
#include <string>

#include "segcal/random.hpp"

namespace segcal {
namespace {

void check_dims(int height, int width) {
  if (height < 1 || width < 1) {
    throw Error(ErrorCode::kDimensionMismatch,
                "image dimensions must be positive, got " + std::to_string(height) +
                    "x" + std::to_string(width));
  }
}

std::size_t pixel_count(int height, int width) {
  return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
}

}  // namespace

SegLogits::SegLogits(int height, int width, int num_classes, std::vector<float> values)
    : height_(height), width_(width), num_classes_(num_classes), values_(std::move(values)) {
  check_dims(height, width);
  if (num_classes < 2) {
    throw Error(ErrorCode::kDimensionMismatch, "need at least 2 classes");
  }
  if (values_.size() != pixel_count(height, width) * static_cast<std::size_t>(num_classes)) {
    throw Error(ErrorCode::kDimensionMismatch, "logit count does not match H*W*K");
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      throw Error(ErrorCode::kNonFiniteInput,
                  "non-finite logit at flat index " + std::to_string(i), i);
    }
  }
}

LabelMap::LabelMap(int height, int width, std::vector<std::uint16_t> labels)
    : height_(height), width_(width), labels_(std::move(labels)) {
  check_dims(height, width);
  if (labels_.size() != pixel_count(height, width)) {
    throw Error(ErrorCode::kDimensionMismatch, "label count does not match H*W");
  }
}

std::size_t LabelMap::num_valid() const {
  return static_cast<std::size_t>(
      std::count_if(labels_.begin(), labels_.end(),
                    [](std::uint16_t y) { return y != kIgnoreLabel; }));
}

void LabelMap::validate_classes(int num_classes) const {
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] != kIgnoreLabel && labels_[i] >= num_classes) {
      throw Error(ErrorCode::kInvalidLabel,
                  "label " + std::to_string(labels_[i]) + " at pixel " +
                      std::to_string(i) + " is not below " + std::to_string(num_classes),
                  i);
    }
  }
}

ProbMap::ProbMap(int height, int width, int num_classes, std::vector<double> values)
    : height_(height), width_(width), num_classes_(num_classes), values_(std::move(values)) {
  check_dims(height, width);
  if (num_classes < 2 ||
      values_.size() != pixel_count(height, width) * static_cast<std::size_t>(num_classes)) {
    throw Error(ErrorCode::kDimensionMismatch, "probability count does not match H*W*K");
  }
  for (std::size_t i = 0; i < num_pixels(); ++i) {
    double total = 0.0;
    for (double p : pixel(i)) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw Error(ErrorCode::kNonFiniteInput,
                    "probability outside [0,1] at pixel " + std::to_string(i), i);
      }
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) {
      throw Error(ErrorCode::kNonFiniteInput,
                  "probabilities do not sum to 1 at pixel " + std::to_string(i), i);
    }
  }
}

void check_same_shape(const SegLogits& logits, const LabelMap& labels) {
  if (logits.height() != labels.height() || logits.width() != labels.width()) {
    throw Error(ErrorCode::kDimensionMismatch, "logits and labels differ in shape");
  }
}

void check_same_shape(const ProbMap& probs, const LabelMap& labels) {
  if (probs.height() != labels.height() || probs.width() != labels.width()) {
    throw Error(ErrorCode::kDimensionMismatch, "probabilities and labels differ in shape");
  }
}

void require_positive_temperature(double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw Error(ErrorCode::kNonPositiveTemperature,
                "temperature must be positive and finite, got " + std::to_string(temperature));
  }
}

ProbMap softmax_with_temperature(const SegLogits& logits, double temperature) {
  require_positive_temperature(temperature);
  const auto k = static_cast<std::size_t>(logits.num_classes());
  std::vector<double> out(logits.num_pixels() * k);
  const double inv_t = 1.0 / temperature;
  for (std::size_t i = 0; i < logits.num_pixels(); ++i) {
    softmax_into(logits.pixel(i), inv_t, std::span<double>(out).subspan(i * k, k));
  }
  return ProbMap(logits.height(), logits.width(), logits.num_classes(), std::move(out));
}

PredictionMap argmax_predict(const ProbMap& probs) {
  PredictionMap pred;
  pred.height = probs.height();
  pred.width = probs.width();
  pred.predicted.resize(probs.num_pixels());
  pred.confidence.resize(probs.num_pixels());
  for (std::size_t i = 0; i < probs.num_pixels(); ++i) {
    const auto row = probs.pixel(i);
    const std::size_t best = argmax_index(row);
    pred.predicted[i] = static_cast<std::uint16_t>(best);
    pred.confidence[i] = row[best];
  }
  return pred;
}

std::vector<PixelOutcome> correctness_mask(const PredictionMap& pred, const LabelMap& labels) {
  if (pred.height != labels.height() || pred.width != labels.width()) {
    throw Error(ErrorCode::kDimensionMismatch, "prediction and labels differ in shape");
  }
  std::vector<PixelOutcome> mask(labels.num_pixels());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (labels.ignored(i)) {
      mask[i] = PixelOutcome::kIgnored;
    } else {
      mask[i] = pred.predicted[i] == labels.label(i) ? PixelOutcome::kCorrect
                                                       : PixelOutcome::kIncorrect;
    }
  }
  return mask;
}

double confidence_entropy(double confidence) {
  if (confidence <= 0.0) return 0.0;
  return -confidence * std::log(std::max(confidence, kProbabilityFloor));
}

std::vector<double> pixel_entropy(const ProbMap& probs) {
  std::vector<double> out(probs.num_pixels());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto row = probs.pixel(i);
    out[i] = confidence_entropy(row[argmax_index(row)]);
  }
  return out;
}

std::vector<std::vector<std::size_t>> stratified_pixels(const Dataset& data,
                                                        std::size_t cap,
                                                        std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> picked(data.images.size());
  std::size_t total = 0;
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const LabelMap& labels = data.images[i].labels;
    for (std::size_t p = 0; p < labels.num_pixels(); ++p) {
      if (!labels.ignored(p)) picked[i].push_back(p);
    }
    total += picked[i].size();
  }
  if (total <= cap) return picked;

  for (std::size_t i = 0; i < picked.size(); ++i) {
    auto& pixels = picked[i];
    const auto quota = static_cast<std::size_t>(
        static_cast<double>(cap) * static_cast<double>(pixels.size()) /
        static_cast<double>(total));
    std::mt19937_64 rng(derive_seed(seed, data.images[i].id));
    std::shuffle(pixels.begin(), pixels.end(), rng);
    pixels.resize(std::min(quota, pixels.size()));
    std::sort(pixels.begin(), pixels.end());
  }
  return picked;
}

}  // namespace segcal
