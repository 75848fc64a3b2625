#include <unistd.h>

#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <map>

#include "trustdd/dataset.hpp"

using namespace trustdd;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("trustdd_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}
}  // namespace

TEST_CASE("blob generator: counts, balance, shape, pixel range") {
  auto set = load_dataset<float>("blobs:classes=2,count=64,size=8", "train");
  CHECK(set.count() == 64);
  CHECK(set.num_classes == 2);
  CHECK(set.image_shape() == Shape{1, 8, 8});
  std::map<int, int> hist;
  for (auto y : set.labels) hist[y]++;
  CHECK(hist[0] == 32);
  CHECK(hist[1] == 32);
  CHECK(set.images.min_value() >= 0.0f);
  CHECK(set.images.max_value() <= 1.0f);

  auto empty = load_dataset<float>("blobs:classes=2,count=0,size=8", "train");
  CHECK(empty.count() == 0);
  CHECK(empty.image_shape() == Shape{1, 8, 8});
  CHECK_NOTHROW(empty.validate());
}

TEST_CASE("train and test splits draw from different streams") {
  auto tr = load_dataset<float>("blobs:classes=2,count=16,size=8", "train");
  auto te = load_dataset<float>("blobs:classes=2,count=16,size=8", "test");
  CHECK(pixel_checksum(tr.images) != pixel_checksum(te.images));
  auto tr2 = load_dataset<float>("blobs:classes=2,count=16,size=8", "train");
  CHECK(pixel_checksum(tr.images) == pixel_checksum(tr2.images));
}

TEST_CASE("missing source raises a load error naming the path") {
  CHECK_THROWS_AS(load_dataset<float>("/no/such/dir", "train"), LoadError);
  CHECK_THROWS_WITH(load_dataset<float>("/no/such/dir", "train"),
                    Catch::Matchers::ContainsSubstring("/no/such/dir"));
}

TEST_CASE("IDX round trip through the MNIST-format reader") {
  auto dir = temp_dir("idx");
  auto digits = make_digits<float>(40, 28, 5, "digits");
  write_idx_dataset(dir, digits, "train");
  auto back = load_idx_dataset<float>(dir, "train");
  CHECK(back.count() == 40);
  CHECK(back.num_classes == 10);
  CHECK(back.image_shape() == Shape{1, 28, 28});
  for (std::size_t i = 0; i < back.labels.size(); ++i) CHECK(back.labels[i] == digits.labels[i]);
  // pixels pass through byte quantization, so compare within 1/255
  for (std::int64_t i = 0; i < back.images.size(); ++i)
    CHECK(std::abs(back.images[i] - digits.images[i]) <= 0.5f / 255.0f + 1e-6f);
  CHECK_THROWS_AS(load_idx_dataset<float>(dir, "test"), LoadError);
  fs::remove_all(dir);
}

TEST_CASE("init_distilled: sizes, balance, determinism") {
  auto t_in = load_dataset<float>("blobs:classes=10,count=400,size=8", "train");
  UnlabeledImageSet<float> t_out;
  t_out.images = make_blob_outliers<float>(150, 8, 1, 3, "out").images;
  t_out.name = "out";
  t_out.provenance = OutlierProvenance::external_directory;

  auto s = init_distilled(t_in, t_out, 10, 100, 42);
  CHECK(s.in_count() == 100);
  CHECK(s.out_count() == 100);
  CHECK(s.outlier_mode == "oe");
  std::map<int, int> hist;
  for (auto y : s.s_in_labels) hist[y]++;
  for (int c = 0; c < 10; ++c) CHECK(hist[c] == 10);

  auto s2 = init_distilled(t_in, t_out, 10, 100, 42);
  CHECK(pixel_checksum(s.s_in_images) == pixel_checksum(s2.s_in_images));
  CHECK(pixel_checksum(s.s_out_images) == pixel_checksum(s2.s_out_images));

  auto s3 = init_distilled(t_in, t_out, 1, 0, 7);
  CHECK(s3.out_count() == 0);
  CHECK(s3.outlier_mode == "none");
}

TEST_CASE("init_distilled: round-robin across corruption tags") {
  auto t_in = load_dataset<float>("blobs:classes=2,count=16,size=8", "train");
  UnlabeledImageSet<float> t_out;
  t_out.images = Tensor<float>{Shape{8, 1, 8, 8}, 0.5f};
  t_out.name = "pseudo";
  t_out.provenance = OutlierProvenance::pseudo_corruption;
  t_out.tags = {"jigsaw", "invert", "mosaic", "speckle", "jigsaw", "invert", "mosaic", "speckle"};

  auto s = init_distilled(t_in, t_out, 2, 4, 9);
  REQUIRE(s.corruption_assignment.size() == 4);
  std::map<std::string, int> tally;
  for (const auto& t : s.corruption_assignment) tally[t]++;
  CHECK(tally["jigsaw"] == 1);
  CHECK(tally["invert"] == 1);
  CHECK(tally["mosaic"] == 1);
  CHECK(tally["speckle"] == 1);
  CHECK(s.outlier_mode == "poe");
}

TEST_CASE("init_distilled error paths") {
  auto t_in = load_dataset<float>("blobs:classes=2,count=8,size=8", "train");
  UnlabeledImageSet<float> t_out;
  t_out.images = Tensor<float>{Shape{2, 1, 8, 8}, 0.1f};
  t_out.provenance = OutlierProvenance::noise_uniform;
  CHECK_THROWS_AS(init_distilled(t_in, t_out, 5, 0, 1), ValidationError);  // ipc > class count
  CHECK_THROWS_AS(init_distilled(t_in, t_out, 2, 3, 1), ValidationError);  // outliers exceed pool
}

TEST_CASE("distilled container round trip is bit exact") {
  auto t_in = load_dataset<float>("blobs:classes=2,count=32,size=8", "train");
  UnlabeledImageSet<float> t_out;
  t_out.images = make_blob_outliers<float>(12, 8, 1, 3, "o").images;
  t_out.provenance = OutlierProvenance::pseudo_corruption;
  t_out.tags.assign(12, "invert");
  auto s = init_distilled(t_in, t_out, 3, 4, 11);
  s.method = "dsa";

  auto dir = temp_dir("container");
  save_distilled(s, dir);
  auto back = load_distilled<float>(dir);

  CHECK(back.method == s.method);
  CHECK(back.outlier_mode == s.outlier_mode);
  CHECK(back.ipc == s.ipc);
  CHECK(back.num_classes == s.num_classes);
  CHECK(back.rng_seed == s.rng_seed);
  CHECK(back.corruption_assignment == s.corruption_assignment);
  CHECK(back.s_in_labels == s.s_in_labels);
  CHECK(pixel_checksum(back.s_in_images) == pixel_checksum(s.s_in_images));
  CHECK(pixel_checksum(back.s_out_images) == pixel_checksum(s.s_out_images));
  fs::remove_all(dir);
}

TEST_CASE("distilled container rejects version mismatch and truncation") {
  auto t_in = load_dataset<float>("blobs:classes=2,count=8,size=8", "train");
  UnlabeledImageSet<float> none;
  none.images = Tensor<float>{Shape{0, 1, 8, 8}};
  auto s = init_distilled(t_in, none, 2, 0, 1);
  auto dir = temp_dir("badver");
  save_distilled(s, dir);

  {
    std::string text;
    std::ifstream m(dir / "manifest");
    std::string line;
    while (std::getline(m, line)) {
      if (line.rfind("format_version=", 0) == 0) line = "format_version=99";
      text += line + "\n";
    }
    std::ofstream out(dir / "manifest");
    out << text;
  }
  CHECK_THROWS_WITH(load_distilled<float>(dir), Catch::Matchers::ContainsSubstring("99"));

  {
    std::ofstream out(dir / "manifest");
    out << "format_version=1\nmethod=dsa\noutlier_mode=none\nipc=2\nnum_classes=2\n"
        << "shape=1,8,8\nrng_seed=1\ncorruption_assignment=none\n";
    fs::resize_file(dir / "s_in.bin", 8);  // cut mid-header
  }
  CHECK_THROWS_AS(load_distilled<float>(dir), LoadError);
  fs::remove_all(dir);
}

TEST_CASE("unlabeled container with tags round trips") {
  UnlabeledImageSet<float> set;
  set.images = make_blob_outliers<float>(6, 8, 1, 2, "x").images;
  set.name = "forged";
  set.provenance = OutlierProvenance::pseudo_corruption;
  set.tags = {"jigsaw", "invert", "mosaic", "speckle", "jigsaw", "invert"};
  auto dir = temp_dir("unlabeled");
  save_image_set(dir, set);
  auto back = load_unlabeled_dir<float>(dir);
  CHECK(back.tags == set.tags);
  CHECK(back.provenance == OutlierProvenance::pseudo_corruption);
  CHECK(pixel_checksum(back.images) == pixel_checksum(set.images));
  fs::remove_all(dir);
}

TEST_CASE("bilinear resize preserves constants and interpolates") {
  Tensor<float> img{Shape{1, 1, 2, 2}, {0.0f, 1.0f, 0.0f, 1.0f}};
  auto up = resize_bilinear(img, 4, 4);
  CHECK(up.shape() == Shape{1, 1, 4, 4});
  CHECK(up.at4(0, 0, 0, 0) == 0.0f);
  CHECK(up.at4(0, 0, 0, 3) == 1.0f);
  CHECK(up.at4(0, 0, 2, 1) == Catch::Approx(0.25f));
  CHECK(up.at4(0, 0, 2, 2) == Catch::Approx(0.75f));

  Tensor<float> flat{Shape{1, 1, 3, 5}, 0.37f};
  auto any = resize_bilinear(flat, 8, 8);
  for (std::int64_t i = 0; i < any.size(); ++i) CHECK(any[i] == Catch::Approx(0.37f));
}

TEST_CASE("digit and letter generators look sane") {
  auto d = make_digits<float>(30, 28, 1, "d");
  CHECK(d.digits);
  CHECK(d.num_classes == 10);
  CHECK(d.images.max_value() > 0.5f);
  CHECK(d.images.min_value() >= 0.0f);
  auto l = make_letters<float>(10, 28, 1, "l");
  CHECK(l.count() == 10);
  auto st = make_strokes<float>(4, 28, 1, "s");
  CHECK(st.images.max_value() <= 1.0f);
}
