#pragma once

// Dataset scanning, slice decoding and preprocessing into model-ready batches.
//
// Labeled layout:    root/covid/<volume_id>/<slices>, root/non-covid/<volume_id>/<slices>
// Prediction layout: root/<volume_id>/<slices>
// Slices are PNG or JPEG files, ordered lexicographically by filename.

#include "ctdiag/errors.hpp"
#include "ctdiag/labels.hpp"
#include "ctdiag/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ctdiag {

struct CTVolume {
  std::string volume_id;
  std::vector<std::filesystem::path> slice_paths;
  std::optional<Label> label;
};

struct DatasetManifest {
  std::string split;
  std::vector<CTVolume> volumes;
  std::size_t covid_volumes = 0;
  std::size_t noncovid_volumes = 0;
  std::size_t unlabeled_volumes = 0;
  std::vector<std::string> warnings;

  std::size_t slice_count() const;
  bool fully_labeled() const { return unlabeled_volumes == 0 && !volumes.empty(); }
};

// Typical CT volume extent; counts outside it only warn.
inline constexpr std::size_t kMinExpectedSlices = 50;
inline constexpr std::size_t kMaxExpectedSlices = 700;

// Detects the labeled layout by the presence of covid/ or non-covid/ subdirectories.
DatasetManifest scan_dataset(const std::filesystem::path& root);

// Throws DataError unless every volume carries a label.
void require_labels(const DatasetManifest& manifest);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
  bool converted_from_color = false;
};

GrayImage decode_image(const std::filesystem::path& path);
void write_gray_png(const std::filesystem::path& path, const GrayImage& image);

inline constexpr std::size_t kModelSide = 224;

// Half-pixel bilinear resize to side x side, p/127.5 - 1, replicated to 3 channels.
// Result shape [side, side, 3].
Tensor preprocess_slice(const GrayImage& image, std::size_t side = kModelSide);

struct SliceRef {
  std::string volume_id;
  std::size_t slice_index = 0;
  friend bool operator==(const SliceRef&, const SliceRef&) = default;
};

struct SliceBatch {
  Tensor tensor;  // [N, side, side, 3]
  std::vector<SliceRef> provenance;
};

// Emits slices in (volume, slice) order. Decoding inside a batch may use up to
// `workers` threads; the output order does not depend on the worker count.
class BatchStream {
 public:
  BatchStream(DatasetManifest manifest, std::size_t batch_size, std::size_t side = kModelSide,
              std::size_t workers = 1);

  std::optional<SliceBatch> next();

  // Non-fatal notes accumulated so far (e.g. color slices converted to luma).
  const std::vector<std::string>& warnings() const noexcept { return warnings_; }

 private:
  DatasetManifest manifest_;
  std::vector<std::pair<std::size_t, std::size_t>> order_;  // (volume, slice)
  std::size_t cursor_ = 0;
  std::size_t batch_size_;
  std::size_t side_;
  std::size_t workers_;
  std::vector<std::string> warnings_;
};

BatchStream batch_iter(const DatasetManifest& manifest, std::size_t batch_size,
                       std::size_t side = kModelSide, std::size_t workers = 1);
BatchStream batch_iter(const CTVolume& volume, std::size_t batch_size,
                       std::size_t side = kModelSide, std::size_t workers = 1);

}  // namespace ctdiag
