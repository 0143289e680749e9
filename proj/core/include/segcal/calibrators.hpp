#pragma once

// Post-hoc calibrators for dense classifiers. Each method has a pure
// apply_* function over logits and a fit_* function that learns its
// parameters on a calibration split and reports validation ECE before and
// after, recomputed through the metrics module.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "segcal/metrics.hpp"
#include "segcal/optim.hpp"
#include "segcal/selector.hpp"
#include "segcal/tensor.hpp"

namespace segcal {

struct IdentityParams {};

struct TemperatureParams {
  double temperature = 1.0;
};

// softmax(w * z + b), elementwise.
struct VectorParams {
  std::vector<double> w;
  std::vector<double> b;
};

// softmax(W log softmax(z) + b), W row-major K x K.
struct DirichletParams {
  int num_classes = 0;
  std::vector<double> weights;
  std::vector<double> bias;
};

// Entropy-gated temperature: pixels whose max-class entropy exceeds gamma
// get t_fallback, the rest t_inner.
struct MetaCalParams {
  double gamma = 0.0;
  double t_inner = 1.0;
  double t_fallback = kLargeTemperature;
};

struct SelectiveParams {
  MlpSelector selector;
  double t1 = kLargeTemperature;
  double t2 = 1.0;
  double threshold = 0.5;
};

struct EnsembleParams {
  int members = 1;
};

using CalibratorParams = std::variant<IdentityParams, TemperatureParams, VectorParams,
                                      DirichletParams, MetaCalParams, SelectiveParams,
                                      EnsembleParams>;

// "identity", "temperature", "vector", "dirichlet", "metacal", "selective",
// "ensemble".
std::string_view method_name(const CalibratorParams& params);

// Checks parameter invariants and compatibility with a K-class dataset.
// Throws kClassCountMismatch, kNonPositiveTemperature or kInvalidArgument.
void validate_params(const CalibratorParams& params, int num_classes);

ProbMap apply_temperature(const SegLogits& logits, double temperature);
ProbMap apply_vector(const SegLogits& logits, std::span<const double> w,
                     std::span<const double> b);
ProbMap apply_dirichlet(const SegLogits& logits, const DirichletParams& params);
ProbMap apply_metacal_ext(const SegLogits& logits, double gamma, double t_inner,
                          double t_fallback);
// Flag 1 marks a pixel treated as mispredicted (gets t1); others get t2.
ProbMap apply_selective(const SegLogits& logits, std::span<const std::uint8_t> flagged,
                        double t1, double t2);
// Per-pixel mean of member probability vectors.
ProbMap ensemble_average(std::span<const ProbMap> members);

// Applies any single-model calibrator; ensembles need ensemble_average.
ProbMap apply_calibrator(const CalibratorParams& params, const SegLogits& logits);

/// Non-ignored pixels of a dataset flattened for fitting.
struct PixelSet {
  int num_classes = 0;
  std::vector<double> logits;
  std::vector<std::uint16_t> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(logits).subspan(
        i * static_cast<std::size_t>(num_classes), num_classes);
  }
};

PixelSet collect_pixels(const Dataset& data, std::size_t cap, std::uint64_t seed);

// Objectives shared by the fits and the gradient checks. All are means over
// the selected pixels; an empty batch span selects every pixel.
double temperature_nll(const PixelSet& pixels, double temperature, double* d_temperature);
// params = [w (K), b (K)]
double vector_nll(const PixelSet& pixels, std::span<const double> params,
                  std::span<const std::size_t> batch, std::span<double> grad);
// params = [W (K*K row-major), b (K)]; adds lambda * sum of squared
// off-diagonal weights.
double dirichlet_nll(const PixelSet& pixels, std::span<const double> params, double lambda,
                     std::span<const std::size_t> batch, std::span<double> grad);

struct FitConfig {
  BinningConfig bins;
  double temperature_lo = 0.05;
  double temperature_hi = 50.0;
  double temperature_tol = 1e-5;
  AdamWConfig scaling_optimizer{0.01, 0.9, 0.999, 1e-8, 0.0, 256, 40, 0};
  double dirichlet_lambda = 1e-3;
  SelectorConfig selector;
  std::size_t max_fit_pixels = 2'000'000;
  // Quantiles of training-pixel entropy tried as the meta-cal gate.
  std::vector<double> metacal_quantiles{0.50, 0.55, 0.60, 0.65, 0.70, 0.75,
                                        0.80, 0.85, 0.90, 0.95, 0.99};
  // Replace a fit that worsens validation ECE with the identity map.
  bool identity_fallback = true;
  std::uint64_t seed = 0;
};

struct FitReport {
  CalibratorParams params;
  double train_nll_before = 0.0;
  double train_nll_after = 0.0;
  double val_ece_before = 0.0;
  double val_ece_after = 0.0;
  bool fell_back_to_identity = false;
  std::string warning;
  std::optional<SelectorMetrics> selector_metrics;
  std::vector<EpochLoss> trace;
  // Excluded from serialized reports so reruns stay byte-identical.
  double wall_seconds = 0.0;
};

// The validation split may be empty for temperature, vector and Dirichlet
// scaling, in which case the training split is used for the report.
// Meta-cal and selective scaling throw kSplitMissing without one.
FitReport fit_temperature(const Dataset& train, const Dataset& val, const FitConfig& cfg);
FitReport fit_vector(const Dataset& train, const Dataset& val, const FitConfig& cfg);
FitReport fit_dirichlet(const Dataset& train, const Dataset& val, const FitConfig& cfg);
FitReport fit_metacal_ext(const Dataset& train, const Dataset& val, const FitConfig& cfg);
// Throws kDegenerateLabels when the training split has no mispredictions.
FitReport fit_selective(const Dataset& train, const Dataset& val, const FitConfig& cfg);

FitReport fit_method(std::string_view method, const Dataset& train, const Dataset& val,
                     const FitConfig& cfg);

struct Evaluation {
  EceReport report;
  double nll = 0.0;
};

// Applies the calibrator to every image and evaluates ECE and pooled NLL.
Evaluation evaluate_calibrator(const Dataset& data, const CalibratorParams& params,
                               const BinningConfig& bins);

// ECE report for already-calibrated probabilities aligned with data.images.
EceReport evaluate_probs(const Dataset& data, std::span<const ProbMap> probs,
                         const BinningConfig& bins);

}  // namespace segcal
