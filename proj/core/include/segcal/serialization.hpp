#pragma once

// JSON forms of fitted calibrators and reports. Parameter files are
// versioned; readers reject unknown formats and versions.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segcal/calibrators.hpp"
#include "segcal/metrics.hpp"

namespace segcal {

inline constexpr int kParamsVersion = 1;

struct ParamsFile {
  int num_classes = 0;
  CalibratorParams params;
};

nlohmann::json params_to_json(const CalibratorParams& params, int num_classes);
// Throws kFormatError for malformed documents, kVersionUnsupported for a
// different version.
ParamsFile params_from_json(const nlohmann::json& doc);

void write_params(const CalibratorParams& params, int num_classes,
                  const std::filesystem::path& path);
ParamsFile read_params(const std::filesystem::path& path);

nlohmann::json selector_metrics_to_json(const SelectorMetrics& metrics);
nlohmann::json ece_report_to_json(const EceReport& report, const BinningConfig& cfg);
nlohmann::json split_ece_to_json(const SplitEce& split);
nlohmann::json regional_ece_to_json(const RegionalEce& regional);
// Wall time is deliberately left out.
nlohmann::json fit_report_to_json(const FitReport& report, int num_classes);

// One {"epoch","loss","val_loss"} object per line.
std::string trace_to_jsonl(const std::vector<EpochLoss>& trace);

// bin_low,bin_high,acc,conf,count,gap
std::string diagram_csv(const std::vector<DiagramRecord>& records);

// Optional numbers map to null.
nlohmann::json optional_number(const std::optional<double>& value);

}  // namespace segcal
