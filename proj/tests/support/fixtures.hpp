#pragma once

#include "ctdiag/ingest.hpp"
#include "ctdiag/labels.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fixtures {

// A fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

ctdiag::GrayImage constant_image(std::size_t w, std::size_t h, std::uint8_t value);

void write_png(const std::filesystem::path& path, const ctdiag::GrayImage& image);
void write_rgb_png(const std::filesystem::path& path, std::size_t w, std::size_t h,
                   const std::vector<std::uint8_t>& rgb);
void write_jpeg(const std::filesystem::path& path, const ctdiag::GrayImage& image, int quality);

// One slice of a Gaussian-textured family. COVID slices are darker and smoothly
// mottled; Non-COVID slices are brighter with fine-grained noise.
ctdiag::GrayImage textured_slice(ctdiag::Label family, std::size_t side, std::uint64_t seed);

struct SyntheticSpec {
  std::size_t covid_volumes = 20;
  std::size_t noncovid_volumes = 20;
  std::size_t slices = 10;
  std::size_t side = 96;
  std::uint64_t seed = 1;
  bool labeled = true;
};

// Writes root/{covid,non-covid}/<volume>/<slice>.png (or root/<volume>/ if unlabeled).
// Volume ids interleave classes: vol000, vol001, ...
void write_synthetic_dataset(const std::filesystem::path& root, const SyntheticSpec& spec);

std::string read_file(const std::filesystem::path& path);

}  // namespace fixtures
