#include "fixtures.hpp"

#include <png.h>
#include <jpeglib.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace fixtures {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  std::ostringstream name;
  name << "ctdiag-" << tag << "-" << ::getpid() << "-" << counter++;
  path_ = fs::temp_directory_path() / name.str();
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

ctdiag::GrayImage constant_image(std::size_t w, std::size_t h, std::uint8_t value) {
  ctdiag::GrayImage img;
  img.width = w;
  img.height = h;
  img.pixels.assign(w * h, value);
  return img;
}

void write_png(const fs::path& path, const ctdiag::GrayImage& image) {
  fs::create_directories(path.parent_path());
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw std::runtime_error("fixture: cannot write " + path.string());
  }
}

void write_rgb_png(const fs::path& path, std::size_t w, std::size_t h,
                   const std::vector<std::uint8_t>& rgb) {
  fs::create_directories(path.parent_path());
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, rgb.data(), 0, nullptr)) {
    throw std::runtime_error("fixture: cannot write " + path.string());
  }
}

void write_jpeg(const fs::path& path, const ctdiag::GrayImage& image, int quality) {
  fs::create_directories(path.parent_path());
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("fixture: cannot write " + path.string());
  jpeg_compress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, f);
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = 1;
  cinfo.in_color_space = JCS_GRAYSCALE;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<JSAMPROW>(image.pixels.data() + cinfo.next_scanline * image.width);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(f);
}

namespace {

// Separable box blur with edge clamping, applied `passes` times (approximately Gaussian).
std::vector<double> blur(std::vector<double> v, std::size_t side, int radius, int passes) {
  if (radius <= 0) return v;
  std::vector<double> tmp(v.size());
  const long n = static_cast<long>(side);
  const auto idx = [n](long y, long x) { return static_cast<std::size_t>(y * n + x); };
  for (int p = 0; p < passes; ++p) {
    for (long y = 0; y < n; ++y)
      for (long x = 0; x < n; ++x) {
        double s = 0;
        for (long d = -radius; d <= radius; ++d) s += v[idx(y, std::clamp(x + d, 0L, n - 1))];
        tmp[idx(y, x)] = s / (2 * radius + 1);
      }
    for (long y = 0; y < n; ++y)
      for (long x = 0; x < n; ++x) {
        double s = 0;
        for (long d = -radius; d <= radius; ++d) s += tmp[idx(std::clamp(y + d, 0L, n - 1), x)];
        v[idx(y, x)] = s / (2 * radius + 1);
      }
  }
  return v;
}

}  // namespace

ctdiag::GrayImage textured_slice(ctdiag::Label family, std::size_t side, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> field(side * side);
  for (auto& v : field) v = noise(gen);
  const bool covid = family == ctdiag::Label::kCovid;
  field = blur(std::move(field), side, covid ? 4 : 0, 2);
  // Rescale to unit variance so only the texture scale and the mean differ.
  double mean = 0, sq = 0;
  for (double v : field) mean += v;
  mean /= static_cast<double>(field.size());
  for (double v : field) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(field.size())) + 1e-12;
  std::normal_distribution<double> jitter(0.0, 6.0);
  const double level = (covid ? 95.0 : 150.0) + jitter(gen);
  ctdiag::GrayImage img;
  img.width = img.height = side;
  img.pixels.resize(side * side);
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double p = level + 35.0 * (field[i] - mean) / sd;
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(p), 0L, 255L));
  }
  return img;
}

void write_synthetic_dataset(const fs::path& root, const SyntheticSpec& spec) {
  const std::size_t total = spec.covid_volumes + spec.noncovid_volumes;
  std::size_t covid_left = spec.covid_volumes, noncovid_left = spec.noncovid_volumes;
  for (std::size_t v = 0; v < total; ++v) {
    const bool covid = covid_left > 0 && (v % 2 == 0 || noncovid_left == 0);
    (covid ? covid_left : noncovid_left)--;
    const ctdiag::Label label = covid ? ctdiag::Label::kCovid : ctdiag::Label::kNonCovid;
    std::ostringstream id;
    id << "vol" << std::setw(3) << std::setfill('0') << v;
    fs::path dir = spec.labeled ? root / (covid ? "covid" : "non-covid") / id.str() : root / id.str();
    for (std::size_t s = 0; s < spec.slices; ++s) {
      std::ostringstream file;
      file << "slice" << std::setw(3) << std::setfill('0') << s << ".png";
      const std::uint64_t seed = spec.seed * 1000003ULL + v * 1009ULL + s;
      write_png(dir / file.str(), textured_slice(label, spec.side, seed));
    }
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace fixtures
