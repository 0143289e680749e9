#include "segcal/data_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace segcal {
namespace {

constexpr std::uint8_t kMagic[4] = {'S', 'G', 'C', 'L'};

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  void u16(std::uint16_t v) {
    out_.push_back(static_cast<std::uint8_t>(v));
    out_.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int shift = 0; shift < 32; shift += 8) out_.push_back(static_cast<std::uint8_t>(v >> shift));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

 private:
  std::vector<std::uint8_t>& out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (n > remaining()) {
      throw Error(ErrorCode::kTruncatedPayload,
                  std::string("container ends inside ") + what + " at byte " +
                      std::to_string(bytes_.size()),
                  bytes_.size());
    }
  }
  std::uint16_t u16() {
    need(2, "a label");
    const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32("logits")); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void validate_dataset(const Dataset& data) {
  if (data.num_classes < 2 || data.num_classes >= kIgnoreLabel) {
    throw Error(ErrorCode::kInvalidArgument, "num_classes must be in [2, 65534]");
  }
  for (const SegImage& image : data.images) {
    if (image.logits.num_classes() != data.num_classes) {
      throw Error(ErrorCode::kClassCountMismatch,
                  "image " + std::to_string(image.id) + " has a different class count",
                  image.id);
    }
    check_same_shape(image.logits, image.labels);
    image.labels.validate_classes(data.num_classes);
  }
}

}  // namespace

std::vector<std::uint8_t> encode_container(const Dataset& data) {
  validate_dataset(data);
  std::size_t total = 16;
  for (const SegImage& image : data.images) {
    total += 12 + image.logits.values().size() * 4 + image.labels.num_pixels() * 2;
  }
  std::vector<std::uint8_t> out;
  out.reserve(total);
  for (std::uint8_t b : kMagic) out.push_back(b);
  ByteWriter w(out);
  w.u32(kContainerVersion);
  w.u32(static_cast<std::uint32_t>(data.num_classes));
  w.u32(static_cast<std::uint32_t>(data.images.size()));
  for (const SegImage& image : data.images) {
    w.u32(image.id);
    w.u32(static_cast<std::uint32_t>(image.logits.height()));
    w.u32(static_cast<std::uint32_t>(image.logits.width()));
    for (float v : image.logits.values()) w.f32(v);
    for (std::uint16_t label : image.labels.labels()) w.u16(label);
  }
  return out;
}

Dataset decode_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw Error(ErrorCode::kBadMagic, "not an SGCL container");
  }
  ByteReader r(bytes.subspan(0));
  r.need(4, "the magic");
  // Skip the magic through the reader so offsets stay absolute.
  r.u32("the magic");
  const std::uint32_t version = r.u32("the header");
  if (version != kContainerVersion) {
    throw Error(ErrorCode::kVersionUnsupported,
                "container version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kContainerVersion) + ")",
                version);
  }
  Dataset data;
  const std::uint32_t k = r.u32("the header");
  if (k < 2 || k >= kIgnoreLabel) {
    throw Error(ErrorCode::kFormatError, "num_classes out of range: " + std::to_string(k));
  }
  data.num_classes = static_cast<int>(k);
  const std::uint32_t count = r.u32("the header");
  // Each image needs at least its 12-byte header; reject absurd counts
  // before reserving.
  r.need(static_cast<std::uint64_t>(count) * 12, "the image table");
  data.images.reserve(count);
  for (std::uint32_t n = 0; n < count; ++n) {
    SegImage image;
    image.id = r.u32("an image header");
    const std::uint32_t h = r.u32("an image header");
    const std::uint32_t w = r.u32("an image header");
    if (h == 0 || w == 0 || h > (1u << 30) || w > (1u << 30)) {
      throw Error(ErrorCode::kFormatError,
                  "image " + std::to_string(image.id) + " has an invalid size", image.id);
    }
    const std::uint64_t pixels = static_cast<std::uint64_t>(h) * w;
    r.need(pixels * k * 4 + pixels * 2, "an image payload");
    std::vector<float> logits(pixels * k);
    for (float& v : logits) v = r.f32();
    std::vector<std::uint16_t> labels(pixels);
    for (std::uint16_t& v : labels) v = r.u16();
    try {
      image.logits = SegLogits(static_cast<int>(h), static_cast<int>(w), data.num_classes,
                               std::move(logits));
      image.labels = LabelMap(static_cast<int>(h), static_cast<int>(w), std::move(labels));
      image.labels.validate_classes(data.num_classes);
    } catch (const Error& e) {
      throw Error(e.code(), "image " + std::to_string(image.id) + ": " + e.what(), image.id);
    }
    data.images.push_back(std::move(image));
  }
  if (r.remaining() != 0) {
    throw Error(ErrorCode::kTrailingBytes,
                std::to_string(r.remaining()) + " unexpected bytes after the last image at byte " +
                    std::to_string(r.offset()),
                r.offset());
  }
  return data;
}

void write_container(const Dataset& data, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_container(data);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

Dataset read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::kIoError, "failed reading " + path.string());
  return decode_container(bytes);
}

nlohmann::json manifest_to_json(const Manifest& manifest) {
  return nlohmann::json{{"file", manifest.file},
                        {"format", "SGCL"},
                        {"version", kContainerVersion},
                        {"num_classes", manifest.num_classes},
                        {"num_images", manifest.num_images},
                        {"provenance", manifest.provenance}};
}

std::filesystem::path manifest_path(const std::filesystem::path& container) {
  return std::filesystem::path(container.string() + ".manifest.json");
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIoError, "cannot open " + path.string() + " for writing");
  out << manifest_to_json(manifest).dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kIoError, "failed writing " + path.string());
}

void SplitSpec::validate() const {
  for (double f : {train, val, test}) {
    if (!std::isfinite(f) || f < 0.0) {
      throw Error(ErrorCode::kInvalidArgument, "split fractions must be non-negative");
    }
  }
  if (!(train > 0.0)) throw Error(ErrorCode::kInvalidArgument, "train fraction must be > 0");
  if (std::abs(train + val + test - 1.0) > 1e-6) {
    throw Error(ErrorCode::kInvalidArgument, "split fractions must sum to 1");
  }
}

DatasetSplits split_dataset(const Dataset& data, const SplitSpec& spec) {
  spec.validate();
  if (data.images.empty()) throw Error(ErrorCode::kEmptyDataset, "cannot split an empty dataset");
  const std::size_t n = data.images.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);

  const auto cut = [n](double f) {
    return std::min(n, static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)));
  };
  const std::size_t n_train = cut(spec.train);
  const std::size_t n_val = std::min(n - n_train, cut(spec.val));

  DatasetSplits out;
  out.train.num_classes = out.val.num_classes = out.test.num_classes = data.num_classes;
  for (std::size_t i = 0; i < n; ++i) {
    Dataset& target = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    target.images.push_back(data.images[order[i]]);
  }
  return out;
}

void require_nonempty(const Dataset& split, std::string_view name) {
  if (split.images.empty()) {
    throw Error(ErrorCode::kEmptySplit, "the " + std::string(name) + " split has no images");
  }
}

}  // namespace segcal
