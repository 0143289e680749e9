#pragma once

// SGCL dataset container and image-level splitting.
//
// Layout (all integers little-endian):
//   "SGCL" | u32 version | u32 num_classes | u32 num_images
//   per image: u32 id | u32 H | u32 W | f32[H*W*K] logits | u16[H*W] labels

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segcal/tensor.hpp"

namespace segcal {

inline constexpr std::uint32_t kContainerVersion = 1;

std::vector<std::uint8_t> encode_container(const Dataset& data);
// Throws kBadMagic, kVersionUnsupported, kTruncatedPayload (context: byte
// offset where the payload ran out) or kTrailingBytes.
Dataset decode_container(std::span<const std::uint8_t> bytes);

void write_container(const Dataset& data, const std::filesystem::path& path);
Dataset read_container(const std::filesystem::path& path);

/// Sidecar description of a container file.
struct Manifest {
  std::string file;
  int num_classes = 0;
  std::size_t num_images = 0;
  nlohmann::json provenance;
};

nlohmann::json manifest_to_json(const Manifest& manifest);
std::filesystem::path manifest_path(const std::filesystem::path& container);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

struct SplitSpec {
  double train = 1.0;
  double val = 0.0;
  double test = 0.0;
  std::uint64_t seed = 0;

  // Each fraction >= 0, train > 0, sum within 1e-6 of one.
  void validate() const;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Seeded shuffle of the images, then floor(f * n) images for train and val;
/// the remainder goes to test.
DatasetSplits split_dataset(const Dataset& data, const SplitSpec& spec);

// Throws kEmptySplit naming the split when it holds no images.
void require_nonempty(const Dataset& split, std::string_view name);

}  // namespace segcal
