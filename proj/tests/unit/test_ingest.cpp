#include "ctdiag/errors.hpp"
#include "ctdiag/ingest.hpp"

#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

using namespace ctdiag;
namespace fs = std::filesystem;

namespace {

void three_volume_tree(const fs::path& root) {
  for (const char* v : {"covid/p01", "covid/p02"}) {
    for (const char* s : {"c.png", "a.png", "b.png"}) {
      fixtures::write_png(root / v / s, fixtures::constant_image(8, 8, 10));
    }
  }
  for (const char* s : {"s2.png", "s1.png", "s3.png"}) {
    fixtures::write_png(root / "non-covid/p00" / s, fixtures::constant_image(8, 8, 200));
  }
}

bool same_manifest(const DatasetManifest& a, const DatasetManifest& b) {
  if (a.volumes.size() != b.volumes.size()) return false;
  for (std::size_t i = 0; i < a.volumes.size(); ++i) {
    if (a.volumes[i].volume_id != b.volumes[i].volume_id ||
        a.volumes[i].slice_paths != b.volumes[i].slice_paths || a.volumes[i].label != b.volumes[i].label)
      return false;
  }
  return a.covid_volumes == b.covid_volumes && a.noncovid_volumes == b.noncovid_volumes;
}

}  // namespace

TEST(ScanDataset, LabeledFixtureCounts) {
  fixtures::TempDir dir("ingest");
  three_volume_tree(dir.path());
  const DatasetManifest m = scan_dataset(dir.path());
  EXPECT_EQ(m.covid_volumes, 2u);
  EXPECT_EQ(m.noncovid_volumes, 1u);
  EXPECT_EQ(m.unlabeled_volumes, 0u);
  ASSERT_EQ(m.volumes.size(), 3u);
  EXPECT_EQ(m.volumes[0].volume_id, "p00");
  EXPECT_EQ(m.volumes[0].label, Label::kNonCovid);
  EXPECT_EQ(m.volumes[1].volume_id, "p01");
  EXPECT_EQ(m.volumes[1].label, Label::kCovid);
  for (const auto& v : m.volumes) EXPECT_EQ(v.slice_paths.size(), 3u);
  EXPECT_EQ(m.volumes[1].slice_paths[0].filename(), "a.png");
  EXPECT_EQ(m.volumes[1].slice_paths[2].filename(), "c.png");
  EXPECT_EQ(m.slice_count(), 9u);
  EXPECT_TRUE(m.fully_labeled());
  EXPECT_NO_THROW(require_labels(m));
}

TEST(ScanDataset, ScanningTwiceIsIdentical) {
  fixtures::TempDir dir("ingest");
  three_volume_tree(dir.path());
  EXPECT_TRUE(same_manifest(scan_dataset(dir.path()), scan_dataset(dir.path())));
}

TEST(ScanDataset, SliceCountOutsideTypicalRangeWarns) {
  fixtures::TempDir dir("ingest");
  three_volume_tree(dir.path());
  const DatasetManifest m = scan_dataset(dir.path());
  EXPECT_EQ(m.warnings.size(), 3u);  // every fixture volume has fewer than 50 slices
  EXPECT_NE(m.warnings[0].find("p00"), std::string::npos);
}

TEST(ScanDataset, EmptyVolumeSkippedWithWarning) {
  fixtures::TempDir dir("ingest");
  three_volume_tree(dir.path());
  fs::create_directories(dir / "covid/p99");
  const DatasetManifest m = scan_dataset(dir.path());
  EXPECT_EQ(m.volumes.size(), 3u);
  bool warned = false;
  for (const auto& w : m.warnings) warned |= w.find("p99") != std::string::npos;
  EXPECT_TRUE(warned);
}

TEST(ScanDataset, PredictionModeLayout) {
  fixtures::TempDir dir("ingest");
  fixtures::write_png(dir / "scanB/1.png", fixtures::constant_image(4, 4, 1));
  fixtures::write_png(dir / "scanA/1.png", fixtures::constant_image(4, 4, 1));
  const DatasetManifest m = scan_dataset(dir.path());
  ASSERT_EQ(m.volumes.size(), 2u);
  EXPECT_EQ(m.volumes[0].volume_id, "scanA");
  EXPECT_FALSE(m.volumes[0].label.has_value());
  EXPECT_EQ(m.unlabeled_volumes, 2u);
  EXPECT_FALSE(m.fully_labeled());
  EXPECT_THROW(require_labels(m), DataError);
}

TEST(ScanDataset, UnreadableRootIsAnError) {
  EXPECT_THROW(scan_dataset("/nonexistent/ct/root"), DataError);
  fixtures::TempDir dir("ingest");
  std::ofstream(dir / "file.txt") << "x";
  EXPECT_THROW(scan_dataset(dir / "file.txt"), DataError);
}

TEST(DecodeImage, PngAndJpeg) {
  fixtures::TempDir dir("ingest");
  ctdiag::GrayImage g;
  g.width = 5;
  g.height = 3;
  for (int i = 0; i < 15; ++i) g.pixels.push_back(static_cast<std::uint8_t>(i * 17));
  fixtures::write_png(dir / "g.png", g);
  const GrayImage back = decode_image(dir / "g.png");
  EXPECT_EQ(back.width, 5u);
  EXPECT_EQ(back.height, 3u);
  EXPECT_EQ(back.pixels, g.pixels);
  EXPECT_FALSE(back.converted_from_color);

  fixtures::write_jpeg(dir / "c.jpg", fixtures::constant_image(16, 16, 128), 95);
  const GrayImage j = decode_image(dir / "c.jpg");
  EXPECT_EQ(j.width, 16u);
  for (auto p : j.pixels) EXPECT_NEAR(p, 128, 1);
}

TEST(DecodeImage, ColorConvertedWithLumaWeights) {
  fixtures::TempDir dir("ingest");
  // Pure red, green and blue pixels.
  fixtures::write_rgb_png(dir / "rgb.png", 3, 1, {255, 0, 0, 0, 255, 0, 0, 0, 255});
  const GrayImage g = decode_image(dir / "rgb.png");
  EXPECT_TRUE(g.converted_from_color);
  ASSERT_EQ(g.pixels.size(), 3u);
  EXPECT_NEAR(g.pixels[0], 0.299 * 255, 1.5);
  EXPECT_NEAR(g.pixels[1], 0.587 * 255, 1.5);
  EXPECT_NEAR(g.pixels[2], 0.114 * 255, 1.5);
}

TEST(DecodeImage, UndecodableFileNamesThePath) {
  fixtures::TempDir dir("ingest");
  std::ofstream(dir / "bad.png") << "not an image";
  try {
    decode_image(dir / "bad.png");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.png"), std::string::npos);
  }
  std::ofstream(dir / "bad.jpg") << "not an image either";
  EXPECT_THROW(decode_image(dir / "bad.jpg"), DataError);
}

TEST(PreprocessSlice, ConstantEndpoints) {
  const Tensor black = preprocess_slice(fixtures::constant_image(512, 512, 0));
  EXPECT_EQ(black.shape(), (Shape{224, 224, 3}));
  for (float v : black.data()) EXPECT_EQ(v, -1.0f);
  const Tensor white = preprocess_slice(fixtures::constant_image(512, 512, 255));
  for (float v : white.data()) EXPECT_EQ(v, 1.0f);
  const Tensor mid = preprocess_slice(fixtures::constant_image(300, 200, 128));
  for (float v : mid.data()) {
    EXPECT_NEAR(v, 0.0039216f, 1e-6f);
  }
}

TEST(PreprocessSlice, ConstantAtModelSideIsUnchanged) {
  for (int level : {0, 37, 128, 254}) {
    const Tensor t = preprocess_slice(fixtures::constant_image(224, 224, static_cast<std::uint8_t>(level)));
    for (float v : t.data()) EXPECT_FLOAT_EQ(v, static_cast<float>(level / 127.5 - 1.0));
  }
}

TEST(PreprocessSlice, AllGrayLevelsMapIntoRange) {
  for (int p = 0; p < 256; ++p) {
    const Tensor t = preprocess_slice(fixtures::constant_image(1, 1, static_cast<std::uint8_t>(p)));
    for (float v : t.data()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
      EXPECT_NEAR(v, p / 127.5 - 1.0, 1e-6);
    }
  }
}

TEST(PreprocessSlice, BilinearMatchesHalfPixelOracle) {
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<int> px(0, 255), dim(1, 40);
  for (int trial = 0; trial < 30; ++trial) {
    GrayImage img;
    img.width = dim(gen);
    img.height = dim(gen);
    for (std::size_t i = 0; i < img.width * img.height; ++i) img.pixels.push_back(static_cast<std::uint8_t>(px(gen)));
    const std::size_t side = 1 + trial % 17;
    const Tensor t = preprocess_slice(img, side);
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const double want = oracle::bilinear(img.pixels, img.width, img.height, side, y, x) / 127.5 - 1.0;
        for (std::size_t c = 0; c < 3; ++c) {
          ASSERT_NEAR(t[(y * side + x) * 3 + c], want, 1e-5);
        }
      }
  }
}

TEST(PreprocessSlice, ChannelsAreReplicated) {
  fixtures::TempDir dir("ingest");
  const Tensor t = preprocess_slice(fixtures::textured_slice(Label::kCovid, 97, 5));
  for (std::size_t i = 0; i < t.size(); i += 3) {
    EXPECT_EQ(t[i], t[i + 1]);
    EXPECT_EQ(t[i], t[i + 2]);
  }
}

TEST(BatchIter, FiveSlicesInBatchesOfTwo) {
  fixtures::TempDir dir("ingest");
  for (int s = 0; s < 5; ++s) {
    fixtures::write_png(dir / ("v/s" + std::to_string(s) + ".png"),
                        fixtures::constant_image(6, 6, static_cast<std::uint8_t>(40 * s)));
  }
  const DatasetManifest m = scan_dataset(dir.path());
  auto stream = batch_iter(m.volumes[0], 2, 16);
  std::vector<std::size_t> sizes;
  std::size_t expected_slice = 0;
  while (auto b = stream.next()) {
    sizes.push_back(b->provenance.size());
    EXPECT_EQ(b->tensor.dim(0), b->provenance.size());
    for (std::size_t i = 0; i < b->provenance.size(); ++i) {
      EXPECT_EQ(b->provenance[i].slice_index, expected_slice);
      EXPECT_FLOAT_EQ(b->tensor[i * 16 * 16 * 3], static_cast<float>(40.0 * expected_slice / 127.5 - 1));
      ++expected_slice;
    }
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{2, 2, 1}));
}

TEST(BatchIter, ProvenanceReproducesManifestOrder) {
  fixtures::TempDir dir("ingest");
  fixtures::SyntheticSpec spec;
  spec.covid_volumes = 2;
  spec.noncovid_volumes = 2;
  spec.slices = 3;
  spec.side = 20;
  fixtures::write_synthetic_dataset(dir.path(), spec);
  const DatasetManifest m = scan_dataset(dir.path());
  std::vector<SliceRef> expected;
  for (const auto& v : m.volumes)
    for (std::size_t s = 0; s < v.slice_paths.size(); ++s) expected.push_back({v.volume_id, s});

  std::vector<SliceRef> got;
  std::vector<float> serial, parallel;
  auto a = batch_iter(m, 5, 32, 1);
  while (auto b = a.next()) {
    got.insert(got.end(), b->provenance.begin(), b->provenance.end());
    serial.insert(serial.end(), b->tensor.data().begin(), b->tensor.data().end());
  }
  auto c = batch_iter(m, 5, 32, 3);
  while (auto b = c.next()) parallel.insert(parallel.end(), b->tensor.data().begin(), b->tensor.data().end());
  EXPECT_EQ(got, expected);
  EXPECT_EQ(serial, parallel);
  for (float v : serial) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(BatchIter, DecodeErrorAbortsWithPath) {
  fixtures::TempDir dir("ingest");
  fixtures::write_png(dir / "v/a.png", fixtures::constant_image(4, 4, 9));
  std::ofstream(dir / "v/b.png") << "garbage";
  const DatasetManifest m = scan_dataset(dir.path());
  auto stream = batch_iter(m, 4, 8);
  try {
    while (stream.next()) {
    }
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("b.png"), std::string::npos);
  }
}

TEST(BatchIter, RejectsZeroBatchSize) {
  DatasetManifest m;
  EXPECT_THROW(batch_iter(m, 0), std::invalid_argument);
}
