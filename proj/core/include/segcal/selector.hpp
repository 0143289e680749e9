#pragma once

// Misprediction selector: a three-layer perceptron mapping a pixel's
// probability vector to the probability that its argmax is wrong.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "segcal/metrics.hpp"
#include "segcal/optim.hpp"
#include "segcal/tensor.hpp"

namespace segcal {

// Smoothing temperature used when a selector is trusted (detection > 50%).
inline constexpr double kLargeTemperature = 1e10;

struct SelectorConfig {
  int hidden1 = 128;
  int hidden2 = 64;
  // Feed probabilities sorted descending instead of in class order.
  bool sorted_input = false;
  double threshold = 0.5;
  std::size_t max_train_pixels = 2'000'000;
  AdamWConfig optimizer;
};

struct DenseLayer {
  int inputs = 0;
  int outputs = 0;
  std::vector<double> weights;  // outputs x inputs, row-major
  std::vector<double> bias;     // outputs
};

/// Pixel features and targets; target 1 means the prediction is wrong.
struct SelectorData {
  int num_classes = 0;
  std::vector<double> features;  // size() x num_classes
  std::vector<std::uint8_t> incorrect;

  std::size_t size() const { return incorrect.size(); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(
        i * static_cast<std::size_t>(num_classes), num_classes);
  }
};

class MlpSelector {
 public:
  // He-uniform hidden layers, Xavier-uniform output layer, zero biases.
  MlpSelector(int num_classes, int hidden1, int hidden2, bool sorted_input,
              std::uint64_t seed);
  MlpSelector(std::vector<DenseLayer> layers, bool sorted_input);

  int num_classes() const { return sizes_.front(); }
  bool sorted_input() const { return sorted_input_; }
  const std::vector<int>& layer_sizes() const { return sizes_; }
  std::vector<DenseLayer> layers() const;

  std::span<const double> parameters() const { return params_; }
  void set_parameters(std::vector<double> params);

  // Pre-sigmoid output.
  double logit(std::span<const double> probs) const;
  // Score in (0, 1); throws kDimensionMismatch for a wrong-width input.
  double forward(std::span<const double> probs) const;

  // Mean BCE over `batch` evaluated at `params` (flat, this network's
  // layout); accumulates the gradient into grad.
  double loss_grad(std::span<const double> params, const SelectorData& data,
                   std::span<const std::size_t> batch, std::span<double> grad) const;

 private:
  void prepare_input(std::span<const double> probs, std::span<double> out) const;
  std::vector<int> sizes_;
  bool sorted_input_ = false;
  std::vector<double> params_;
};

struct SelectorMetrics {
  // Recall on the incorrect class.
  double detection_accuracy = 0.0;
  double overall_accuracy = 0.0;
  double threshold = 0.5;
  std::uint64_t num_samples = 0;
  std::uint64_t num_incorrect = 0;
};

SelectorMetrics evaluate_selector(const MlpSelector& selector, const SelectorData& data,
                                  double threshold);

// Softmax (T = 1) features for sampled non-ignored pixels of the dataset.
SelectorData collect_selector_data(const Dataset& data, std::size_t cap, std::uint64_t seed);

struct TrainedSelector {
  MlpSelector selector;
  SelectorMetrics train_metrics;
  std::vector<EpochLoss> trace;
};

/// Class-balanced AdamW training on BCE. Each mini-batch draws half its
/// samples from the incorrect pool. Throws kDegenerateLabels unless both
/// classes are present. When `val` is given its BCE is traced per epoch.
TrainedSelector selector_train(const SelectorData& train, const SelectorConfig& cfg,
                               const SelectorData* val = nullptr);

// Per-pixel flag (1 = predicted incorrect) from the uncalibrated softmax.
std::vector<std::uint8_t> selector_decisions(const MlpSelector& selector,
                                             const SegLogits& logits, double threshold);

struct TemperaturePair {
  double t1 = 1.0;
  double t2 = 1.0;
};

// T2 = 2 when detection < 0.35, else 1. T1 = kLargeTemperature when
// detection > 0.5, else the golden-section minimizer over [1, 20] of
// val_ece(t1, t2). T1 is never below T2.
TemperaturePair choose_temperatures(const SelectorMetrics& metrics,
                                    const std::function<double(double, double)>& val_ece);

struct SweepPoint {
  double rate = 0.0;
  double ece = 0.0;
};

struct SweepConfig {
  double t1 = kLargeTemperature;
  double t2 = 1.0;
  BinningConfig bins;
  std::uint64_t seed = 0;
};

/// Oracle selectors of fixed detection rate: per image, floor(rate * #wrong)
/// truly mispredicted pixels are flagged (nested across rates) and no
/// correct pixel is. Returns dataset ECE per rate, sorted by rate.
std::vector<SweepPoint> selector_accuracy_sweep(const Dataset& data,
                                                std::vector<double> rates,
                                                const SweepConfig& cfg);

bool is_non_increasing(std::span<const SweepPoint> sweep, double tolerance);

}  // namespace segcal
