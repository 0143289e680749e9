#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "segcal/tensor.hpp"

namespace segcal {

/// Mean -log p_y over non-ignored pixels. Throws kAllPixelsIgnored.
double nll_loss(const ProbMap& probs, const LabelMap& labels);

/// Mean binary cross-entropy of scores in (0,1) against boolean targets.
double binary_cross_entropy(std::span<const double> scores,
                            std::span<const std::uint8_t> targets);

/// Golden-section search on [lo, hi]; returns the midpoint of the final
/// bracket, whose width is <= tol. f is only evaluated inside [lo, hi].
double minimize_scalar(const std::function<double(double)>& f, double lo, double hi,
                       double tol);

struct AdamWConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-6;
  std::size_t batch_size = 20;
  int epochs = 40;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochLoss {
  int epoch = 0;
  double loss = 0.0;
  std::optional<double> val_loss;
};

struct AdamWResult {
  std::vector<double> params;
  std::vector<EpochLoss> trace;
};

// Loss and gradient of a mini-batch given by sample indices. grad has the
// size of params and is zeroed before the call.
using BatchLossGrad = std::function<double(std::span<const std::size_t> batch,
                                           std::span<const double> params,
                                           std::span<double> grad)>;

// Sample visiting order for one epoch; consecutive runs of batch_size
// indices form the mini-batches.
using EpochOrder = std::function<std::vector<std::size_t>(std::mt19937_64& rng)>;

using ValidationLoss = std::function<double(std::span<const double> params)>;

/// AdamW with decoupled weight decay. The default order is a seeded shuffle
/// of [0, num_samples) per epoch. Throws kNonFiniteGradient carrying the
/// global step index.
AdamWResult adamw_fit(std::vector<double> params, std::size_t num_samples,
                      const BatchLossGrad& loss_grad, const AdamWConfig& cfg,
                      const EpochOrder& order = {}, const ValidationLoss& val_loss = {});

struct GradCheckEntry {
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;
};

// Full-objective loss; fills grad (same size as params).
using LossGrad = std::function<double(std::span<const double> params, std::span<double> grad)>;

/// Central differences against the analytic gradient. Relative error is
/// |a - n| / max(1e-8, |a| + |n|).
GradCheckReport finite_difference_check(const LossGrad& loss_grad,
                                        std::span<const double> params,
                                        double epsilon = 1e-4);

}  // namespace segcal
