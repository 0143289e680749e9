#include "segcal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "segcal/parallel.hpp"

namespace segcal {

ReliabilityBins::ReliabilityBins(int num_bins) {
  if (num_bins < 1) {
    throw Error(ErrorCode::kInvalidArgument, "number of bins must be >= 1");
  }
  counts_.assign(num_bins, 0);
  correct_.assign(num_bins, 0.0);
  confidence_.assign(num_bins, 0.0);
}

int ReliabilityBins::bin_index(double confidence, int num_bins) {
  const double scaled = std::ceil(confidence * num_bins);
  return std::clamp(static_cast<int>(scaled), 1, num_bins) - 1;
}

void ReliabilityBins::add(double confidence, bool correct) {
  const int bin = bin_index(confidence, num_bins());
  counts_[bin] += 1;
  correct_[bin] += correct ? 1.0 : 0.0;
  confidence_[bin] += confidence;
}

void ReliabilityBins::merge(const ReliabilityBins& other) {
  if (other.num_bins() != num_bins()) {
    throw Error(ErrorCode::kDimensionMismatch, "cannot merge bins of different sizes");
  }
  for (int i = 0; i < num_bins(); ++i) {
    counts_[i] += other.counts_[i];
    correct_[i] += other.correct_[i];
    confidence_[i] += other.confidence_[i];
  }
}

double ReliabilityBins::accuracy(int bin) const {
  return counts_[bin] == 0 ? 0.0 : correct_[bin] / static_cast<double>(counts_[bin]);
}

double ReliabilityBins::confidence(int bin) const {
  return counts_[bin] == 0 ? 0.0 : confidence_[bin] / static_cast<double>(counts_[bin]);
}

double ReliabilityBins::lower_edge(int bin) const {
  return static_cast<double>(bin) / num_bins();
}

double ReliabilityBins::upper_edge(int bin) const {
  return static_cast<double>(bin + 1) / num_bins();
}

std::uint64_t ReliabilityBins::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

double ReliabilityBins::ece() const {
  const auto n = static_cast<double>(total());
  if (n == 0.0) return 0.0;
  double sum = 0.0;
  for (int i = 0; i < num_bins(); ++i) {
    if (counts_[i] == 0) continue;
    sum += static_cast<double>(counts_[i]) / n * std::abs(accuracy(i) - confidence(i));
  }
  return sum;
}

EceResult binned_ece(std::span<const double> confidences,
                     std::span<const std::uint8_t> correct, const BinningConfig& cfg) {
  if (confidences.size() != correct.size()) {
    throw Error(ErrorCode::kLengthMismatch, "confidence and correctness lengths differ");
  }
  if (confidences.empty()) {
    throw Error(ErrorCode::kEmptyInput, "binned ECE needs at least one sample");
  }
  EceResult result{0.0, ReliabilityBins(cfg.num_bins)};
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    result.bins.add(confidences[i], correct[i] != 0);
  }
  result.ece = result.bins.ece();
  return result;
}

ReliabilityBins image_bins(const ProbMap& probs, const LabelMap& labels,
                           const BinningConfig& cfg) {
  check_same_shape(probs, labels);
  ReliabilityBins bins(cfg.num_bins);
  for (std::size_t i = 0; i < probs.num_pixels(); ++i) {
    if (labels.ignored(i)) continue;
    const auto row = probs.pixel(i);
    const std::size_t pred = argmax_index(row);
    bins.add(row[pred], pred == labels.label(i));
  }
  if (bins.total() == 0) {
    throw Error(ErrorCode::kAllPixelsIgnored, "every pixel of the image is ignored");
  }
  return bins;
}

double image_ece(const ProbMap& probs, const LabelMap& labels, const BinningConfig& cfg) {
  return image_bins(probs, labels, cfg).ece();
}

EceReport dataset_ece(std::span<const LabeledProbs> images, const BinningConfig& cfg) {
  if (images.empty()) {
    throw Error(ErrorCode::kEmptyDataset, "dataset ECE needs at least one image");
  }
  std::vector<ReliabilityBins> per_image(images.size(), ReliabilityBins(cfg.num_bins));
  parallel_for(images.size(), [&](std::size_t i) {
    try {
      per_image[i] = image_bins(images[i].probs, images[i].labels, cfg);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kAllPixelsIgnored) throw;
      throw Error(ErrorCode::kAllPixelsIgnored,
                  "image " + std::to_string(images[i].id) + " has no non-ignored pixels",
                  images[i].id);
    }
  });

  EceReport report;
  report.bins = ReliabilityBins(cfg.num_bins);
  double ece_sum = 0.0;
  double correct = 0.0;
  std::uint64_t pixels = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double ece = per_image[i].ece();
    const std::uint64_t n = per_image[i].total();
    report.per_image.push_back({images[i].id, ece, n});
    report.bins.merge(per_image[i]);
    ece_sum += ece;
    pixels += n;
    for (int b = 0; b < cfg.num_bins; ++b) correct += per_image[i].correct_sum(b);
  }
  report.dataset_ece = ece_sum / static_cast<double>(images.size());
  report.accuracy = correct / static_cast<double>(pixels);
  return report;
}

double pooled_ece(const EceReport& report) { return report.bins.ece(); }

SplitEce split_ece_by_correctness(const ProbMap& probs, const LabelMap& labels,
                                  const BinningConfig& cfg) {
  check_same_shape(probs, labels);
  ReliabilityBins correct_bins(cfg.num_bins);
  ReliabilityBins incorrect_bins(cfg.num_bins);
  for (std::size_t i = 0; i < probs.num_pixels(); ++i) {
    if (labels.ignored(i)) continue;
    const auto row = probs.pixel(i);
    const std::size_t pred = argmax_index(row);
    if (pred == labels.label(i)) {
      correct_bins.add(row[pred], true);
    } else {
      incorrect_bins.add(row[pred], false);
    }
  }
  if (correct_bins.total() + incorrect_bins.total() == 0) {
    throw Error(ErrorCode::kAllPixelsIgnored, "every pixel of the image is ignored");
  }
  SplitEce out;
  out.num_correct = correct_bins.total();
  out.num_incorrect = incorrect_bins.total();
  if (out.num_correct > 0) out.ece_correct = correct_bins.ece();
  if (out.num_incorrect > 0) out.ece_incorrect = incorrect_bins.ece();
  return out;
}

std::vector<std::uint8_t> boundary_mask(const LabelMap& labels, const BoundaryConfig& cfg) {
  if (cfg.radius < 0) {
    throw Error(ErrorCode::kInvalidArgument, "boundary radius must be >= 0");
  }
  const int h = labels.height();
  const int w = labels.width();
  const int d = cfg.radius;
  std::vector<std::uint8_t> mask(labels.num_pixels(), 0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * w + c;
      const std::uint16_t own = labels.label(idx);
      if (own == kIgnoreLabel) continue;
      bool boundary = false;
      for (int rr = std::max(0, r - d); rr <= std::min(h - 1, r + d) && !boundary; ++rr) {
        for (int cc = std::max(0, c - d); cc <= std::min(w - 1, c + d); ++cc) {
          const std::uint16_t other = labels.label(static_cast<std::size_t>(rr) * w + cc);
          if (other != kIgnoreLabel && other != own) {
            boundary = true;
            break;
          }
        }
      }
      mask[idx] = boundary ? 1 : 0;
    }
  }
  return mask;
}

RegionalEce regional_ece(const ProbMap& probs, const LabelMap& labels,
                         std::span<const std::uint8_t> mask, const BinningConfig& cfg) {
  check_same_shape(probs, labels);
  if (mask.size() != probs.num_pixels()) {
    throw Error(ErrorCode::kDimensionMismatch, "region mask size does not match image");
  }
  RegionalEce out{std::nullopt, std::nullopt, ReliabilityBins(cfg.num_bins),
                  ReliabilityBins(cfg.num_bins)};
  for (std::size_t i = 0; i < probs.num_pixels(); ++i) {
    if (labels.ignored(i)) continue;
    const auto row = probs.pixel(i);
    const std::size_t pred = argmax_index(row);
    auto& bins = mask[i] ? out.inside_bins : out.outside_bins;
    bins.add(row[pred], pred == labels.label(i));
  }
  if (out.inside_bins.total() > 0) out.ece_inside = out.inside_bins.ece();
  if (out.outside_bins.total() > 0) out.ece_outside = out.outside_bins.ece();
  return out;
}

double quantile_linear(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(ErrorCode::kEmptyInput, "quantile of an empty sample");
  q = std::clamp(q, 0.0, 1.0);
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

BoxplotStats ece_boxplot_stats(std::span<const double> values) {
  if (values.empty()) {
    throw Error(ErrorCode::kEmptyInput, "boxplot needs at least one value");
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  BoxplotStats stats;
  stats.min = sorted.front();
  stats.max = sorted.back();
  stats.q25 = quantile_linear(sorted, 0.25);
  stats.median = quantile_linear(sorted, 0.5);
  stats.q75 = quantile_linear(sorted, 0.75);
  stats.mean = std::accumulate(values.begin(), values.end(), 0.0) /
               static_cast<double>(values.size());
  const double iqr = stats.q75 - stats.q25;
  const double low_fence = stats.q25 - 1.5 * iqr;
  const double high_fence = stats.q75 + 1.5 * iqr;
  for (double v : sorted) {
    if (v < low_fence || v > high_fence) stats.outliers.push_back(v);
  }
  return stats;
}

std::vector<DiagramRecord> reliability_diagram_data(const ReliabilityBins& bins) {
  std::vector<DiagramRecord> records;
  records.reserve(bins.num_bins());
  for (int i = 0; i < bins.num_bins(); ++i) {
    DiagramRecord rec;
    rec.low = bins.lower_edge(i);
    rec.high = bins.upper_edge(i);
    rec.acc = bins.accuracy(i);
    rec.conf = bins.confidence(i);
    rec.count = bins.count(i);
    rec.gap = rec.count == 0 ? 0.0 : std::abs(rec.acc - rec.conf);
    records.push_back(rec);
  }
  return records;
}

}  // namespace segcal
