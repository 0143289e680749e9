#pragma once

// Binned expected calibration error and the statistics built on it:
// image-wise averaging, correctness-split and regional ECE, boxplots and
// reliability-diagram records.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "segcal/tensor.hpp"

namespace segcal {

struct BinningConfig {
  int num_bins = 10;
};

/// Equal-width bins over (0, 1]. A confidence c falls in bin ceil(c * m)
/// (1-based), so a sample on an edge belongs to the lower bin.
class ReliabilityBins {
 public:
  explicit ReliabilityBins(int num_bins = 10);

  // Zero-based bin for a confidence in (0, 1].
  static int bin_index(double confidence, int num_bins);

  void add(double confidence, bool correct);
  void merge(const ReliabilityBins& other);

  int num_bins() const { return static_cast<int>(counts_.size()); }
  std::uint64_t count(int bin) const { return counts_[bin]; }
  double correct_sum(int bin) const { return correct_[bin]; }
  double confidence_sum(int bin) const { return confidence_[bin]; }
  // Zero for empty bins.
  double accuracy(int bin) const;
  double confidence(int bin) const;
  double lower_edge(int bin) const;
  double upper_edge(int bin) const;
  std::uint64_t total() const;

  // sum_i |B_i|/n * |acc(B_i) - conf(B_i)|; empty bins contribute nothing.
  double ece() const;

 private:
  std::vector<std::uint64_t> counts_;
  std::vector<double> correct_;
  std::vector<double> confidence_;
};

struct EceResult {
  double ece = 0.0;
  ReliabilityBins bins;
};

EceResult binned_ece(std::span<const double> confidences,
                     std::span<const std::uint8_t> correct, const BinningConfig& cfg);

// Per-image bins over non-ignored pixels. Throws kAllPixelsIgnored.
ReliabilityBins image_bins(const ProbMap& probs, const LabelMap& labels,
                           const BinningConfig& cfg);
double image_ece(const ProbMap& probs, const LabelMap& labels, const BinningConfig& cfg);

struct ImageEce {
  std::uint32_t id = 0;
  double ece = 0.0;
  std::uint64_t pixels = 0;
};

struct EceReport {
  double dataset_ece = 0.0;
  double accuracy = 0.0;
  ReliabilityBins bins;
  std::vector<ImageEce> per_image;
};

struct LabeledProbs {
  std::uint32_t id;
  const ProbMap& probs;
  const LabelMap& labels;
};

// Image-wise ECE averaged over images, unweighted. Pooled bins are kept for
// diagrams. Throws kEmptyDataset, or kAllPixelsIgnored with the image id.
EceReport dataset_ece(std::span<const LabeledProbs> images, const BinningConfig& cfg);

// ECE of pixels pooled across images (not the image mean).
double pooled_ece(const EceReport& report);

struct SplitEce {
  std::optional<double> ece_correct;
  std::optional<double> ece_incorrect;
  std::uint64_t num_correct = 0;
  std::uint64_t num_incorrect = 0;
};

SplitEce split_ece_by_correctness(const ProbMap& probs, const LabelMap& labels,
                                  const BinningConfig& cfg);

struct BoundaryConfig {
  int radius = 2;
};

// A pixel is on a boundary when another pixel within Chebyshev distance
// `radius` carries a different non-ignore label. Ignored pixels never are.
std::vector<std::uint8_t> boundary_mask(const LabelMap& labels, const BoundaryConfig& cfg);

struct RegionalEce {
  std::optional<double> ece_inside;
  std::optional<double> ece_outside;
  ReliabilityBins inside_bins;
  ReliabilityBins outside_bins;
};

RegionalEce regional_ece(const ProbMap& probs, const LabelMap& labels,
                         std::span<const std::uint8_t> mask, const BinningConfig& cfg);

struct BoxplotStats {
  double min = 0.0;
  double q25 = 0.0;
  double median = 0.0;
  double q75 = 0.0;
  double max = 0.0;
  double mean = 0.0;
  std::vector<double> outliers;
};

// Linearly interpolated q-quantile of an ascending sample, q in [0, 1].
double quantile_linear(std::span<const double> sorted, double q);

// Linear-interpolation quartiles; outliers lie outside 1.5 IQR of the box.
BoxplotStats ece_boxplot_stats(std::span<const double> values);

struct DiagramRecord {
  double low = 0.0;
  double high = 0.0;
  double acc = 0.0;
  double conf = 0.0;
  std::uint64_t count = 0;
  double gap = 0.0;
};

std::vector<DiagramRecord> reliability_diagram_data(const ReliabilityBins& bins);

}  // namespace segcal
