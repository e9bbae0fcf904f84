#include "ctdiag/ingest.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <exception>
#include <memory>
#include <thread>

namespace fs = std::filesystem;

namespace ctdiag {
namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool is_slice_file(const fs::directory_entry& e) {
  if (!e.is_regular_file()) return false;
  const std::string ext = lower(e.path().extension().string());
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  return out;
}

void add_volume(DatasetManifest& m, const fs::path& dir, std::optional<Label> label) {
  CTVolume v;
  v.volume_id = dir.filename().string();
  v.label = label;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (is_slice_file(e)) v.slice_paths.push_back(e.path());
  }
  std::sort(v.slice_paths.begin(), v.slice_paths.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  if (v.slice_paths.empty()) {
    m.warnings.push_back("skipping empty volume directory " + dir.string());
    return;
  }
  const std::size_t n = v.slice_paths.size();
  if (n < kMinExpectedSlices || n > kMaxExpectedSlices) {
    m.warnings.push_back("volume " + v.volume_id + " has " + std::to_string(n) +
                         " slices (typical range 50-700)");
  }
  if (!label) ++m.unlabeled_volumes;
  else if (*label == Label::kCovid) ++m.covid_volumes;
  else ++m.noncovid_volumes;
  m.volumes.push_back(std::move(v));
}

}  // namespace

std::size_t DatasetManifest::slice_count() const {
  std::size_t n = 0;
  for (const auto& v : volumes) n += v.slice_paths.size();
  return n;
}

DatasetManifest scan_dataset(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root, ec)) {
    throw DataError("dataset root is not a readable directory: " + root.string());
  }
  DatasetManifest m;
  m.split = root.filename().string();
  if (m.split.empty()) m.split = root.parent_path().filename().string();
  try {
    const fs::path covid = root / "covid";
    const fs::path noncovid = root / "non-covid";
    if (fs::is_directory(covid) || fs::is_directory(noncovid)) {
      // Labeled layout: interleave by volume id so ordering does not depend on class.
      std::vector<std::pair<fs::path, Label>> dirs;
      if (fs::is_directory(covid)) {
        for (auto& d : sorted_subdirs(covid)) dirs.emplace_back(std::move(d), Label::kCovid);
      }
      if (fs::is_directory(noncovid)) {
        for (auto& d : sorted_subdirs(noncovid)) dirs.emplace_back(std::move(d), Label::kNonCovid);
      }
      std::stable_sort(dirs.begin(), dirs.end(), [](const auto& a, const auto& b) {
        return a.first.filename() < b.first.filename();
      });
      for (const auto& [dir, label] : dirs) add_volume(m, dir, label);
    } else {
      for (const auto& dir : sorted_subdirs(root)) add_volume(m, dir, std::nullopt);
    }
  } catch (const fs::filesystem_error& e) {
    throw DataError(std::string("cannot scan dataset: ") + e.what());
  }
  return m;
}

void require_labels(const DatasetManifest& manifest) {
  if (manifest.volumes.empty()) throw DataError("dataset contains no volumes");
  for (const auto& v : manifest.volumes) {
    if (!v.label) throw DataError("volume " + v.volume_id + " has no label");
  }
}

namespace {

GrayImage decode_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  GrayImage out;
  out.width = img.width;
  out.height = img.height;
  out.converted_from_color = color;
  if (!color) {
    out.pixels = std::move(buf);
  } else {
    out.pixels.resize(out.width * out.height);
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
      const double y = 0.299 * buf[3 * i] + 0.587 * buf[3 * i + 1] + 0.114 * buf[3 * i + 2];
      out.pixels[i] = static_cast<std::uint8_t>(std::clamp(y + 0.5, 0.0, 255.0));
    }
  }
  return out;
}

struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

GrayImage decode_jpeg(const fs::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw DataError("cannot open " + path.string());

  jpeg_decompress_struct cinfo{};
  JpegErrorManager jerr{};
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  GrayImage out;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("cannot decode JPEG " + path.string() + ": " + jerr.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  // libjpeg's grayscale output is the Rec. 601 luma of YCbCr sources.
  out.converted_from_color = cinfo.num_components != 1;
  cinfo.out_color_space = JCS_GRAYSCALE;
  jpeg_start_decompress(&cinfo);
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.pixels.resize(out.width * out.height);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

}  // namespace

GrayImage decode_image(const fs::path& path) {
  const std::string ext = lower(path.extension().string());
  GrayImage img;
  if (ext == ".png") {
    img = decode_png(path);
  } else if (ext == ".jpg" || ext == ".jpeg") {
    img = decode_jpeg(path);
  } else {
    throw DataError("unsupported slice format: " + path.string());
  }
  if (img.width == 0 || img.height == 0) throw DataError("empty image: " + path.string());
  return img;
}

void write_gray_png(const fs::path& path, const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height || image.pixels.empty()) {
    throw DataError("write_gray_png: pixel buffer does not match dimensions");
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

Tensor preprocess_slice(const GrayImage& image, std::size_t side) {
  if (image.width == 0 || image.height == 0 || image.pixels.size() != image.width * image.height) {
    throw DataError("preprocess_slice: malformed image buffer");
  }
  Tensor out({side, side, 3});
  const double sy = static_cast<double>(image.height) / static_cast<double>(side);
  const double sx = static_cast<double>(image.width) / static_cast<double>(side);
  const auto px = [&](std::size_t y, std::size_t x) {
    return static_cast<double>(image.pixels[y * image.width + x]);
  };
  for (std::size_t oy = 0; oy < side; ++oy) {
    const double fy = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(image.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < side; ++ox) {
      const double fx = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(image.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = px(y0, x0) * (1.0 - wx) + px(y0, x1) * wx;
      const double bottom = px(y1, x0) * (1.0 - wx) + px(y1, x1) * wx;
      const double value = top * (1.0 - wy) + bottom * wy;
      const auto v = static_cast<float>(std::clamp(value / 127.5 - 1.0, -1.0, 1.0));
      float* cell = out.raw() + (oy * side + ox) * 3;
      cell[0] = cell[1] = cell[2] = v;
    }
  }
  return out;
}

BatchStream::BatchStream(DatasetManifest manifest, std::size_t batch_size, std::size_t side,
                         std::size_t workers)
    : manifest_(std::move(manifest)),
      batch_size_(batch_size),
      side_(side),
      workers_(std::max<std::size_t>(workers, 1)) {
  if (batch_size_ == 0) throw std::invalid_argument("batch size must be >= 1");
  for (std::size_t v = 0; v < manifest_.volumes.size(); ++v) {
    for (std::size_t s = 0; s < manifest_.volumes[v].slice_paths.size(); ++s) {
      order_.emplace_back(v, s);
    }
  }
}

std::optional<SliceBatch> BatchStream::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
  const std::size_t per_slice = side_ * side_ * 3;
  SliceBatch batch;
  batch.tensor = Tensor({n, side_, side_, 3});
  batch.provenance.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto [v, s] = order_[cursor_ + i];
    batch.provenance.push_back({manifest_.volumes[v].volume_id, s});
  }

  std::vector<std::exception_ptr> errors(n);
  std::vector<std::uint8_t> converted(n, 0);
  const auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < n; i += workers_) {
      try {
        const auto [v, s] = order_[cursor_ + i];
        const GrayImage img = decode_image(manifest_.volumes[v].slice_paths[s]);
        converted[i] = img.converted_from_color ? 1 : 0;
        const Tensor t = preprocess_slice(img, side_);
        std::copy(t.raw(), t.raw() + per_slice, batch.tensor.raw() + i * per_slice);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(workers_, n);
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!converted[i]) continue;
    const auto [v, s] = order_[cursor_ + i];
    warnings_.push_back("converted color slice to grayscale: " +
                        manifest_.volumes[v].slice_paths[s].string());
  }
  cursor_ += n;
  return batch;
}

BatchStream batch_iter(const DatasetManifest& manifest, std::size_t batch_size, std::size_t side,
                       std::size_t workers) {
  return BatchStream(manifest, batch_size, side, workers);
}

BatchStream batch_iter(const CTVolume& volume, std::size_t batch_size, std::size_t side,
                       std::size_t workers) {
  DatasetManifest m;
  m.volumes.push_back(volume);
  return BatchStream(std::move(m), batch_size, side, workers);
}

}  // namespace ctdiag
