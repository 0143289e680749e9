#pragma once

// The segcal command-line surface. run() is the whole program minus process
// setup so tests can drive it with in-memory streams.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "segcal/data_io.hpp"
#include "segcal/error.hpp"
#include "segcal/tensor.hpp"

namespace segcal::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDegenerate = 3;
inline constexpr int kExitIo = 4;

int exit_code_for(ErrorCode code);

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Applies SEGCAL_THREADS from the environment; returns false if it is set
// but not a non-negative integer.
bool apply_thread_env();

// "0.5,0.25,0.25" -> SplitSpec (seed left at 0). Throws kInvalidArgument.
SplitSpec parse_split(const std::string& text);
// "32x48" -> {32, 48}.
std::pair<int, int> parse_size(const std::string& text);
std::vector<double> parse_rates(const std::string& text);

// FNV-1a over the little-endian image ids, as 16 hex digits.
std::string split_hash(const Dataset& split);

struct CompareRow {
  std::string method;  // display name
  std::optional<double> ece;
  double accuracy = 0.0;
  double nll = 0.0;
  std::string split_hash;
  std::string note;
  bool best = false;
};

// Display order of compare rows.
const std::vector<std::string>& compare_column_order();

// Marks the row(s) with the lowest ECE as best.
void flag_best(std::vector<CompareRow>& rows);
std::string format_compare_table(const std::vector<CompareRow>& rows);

struct ClassIou {
  double pixel_accuracy = 0.0;
  double mean_iou = 0.0;
  std::vector<std::optional<double>> per_class;
};

// Confusion-matrix IoU of argmax predictions over non-ignored pixels.
// Classes absent from both prediction and labels are skipped in the mean.
ClassIou class_iou(const Dataset& data);

}  // namespace segcal::cli
