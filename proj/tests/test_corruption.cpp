#include <catch2/catch_amalgamated.hpp>
#include <algorithm>
#include <map>
#include <numeric>

#include "trustdd/corruption.hpp"
#include "trustdd/dataset.hpp"

using namespace trustdd;

namespace {

Tensor<double> random_image(Shape s, Rng& rng) {
  Tensor<double> t{std::move(s)};
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
  return t;
}

std::vector<double> sorted_pixels(const Tensor<double>& t) {
  std::vector<double> v(t.data(), t.data() + t.size());
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

TEST_CASE("jigsaw: pinned reverse permutation on a 6x6 grid") {
  // 1x6x6 image of distinct values, 2x3 grid, reverse permutation. Oracle:
  // explicit patch bookkeeping over the 6x6 index grid.
  Tensor<double> img{Shape{1, 6, 6}};
  for (std::int64_t i = 0; i < 36; ++i) img[i] = static_cast<double>(i);
  std::vector<int> rev = {5, 4, 3, 2, 1, 0};
  auto out = jigsaw_with(img, 2, 3, rev);

  // patch (r,c) has top-left (3r, 2c); destination p pulls source perm[p]
  for (int p = 0; p < 6; ++p) {
    const int src = rev[static_cast<std::size_t>(p)];
    const std::int64_t dy = (p / 3) * 3, dx = (p % 3) * 2;
    const std::int64_t sy = (src / 3) * 3, sx = (src % 3) * 2;
    for (std::int64_t y = 0; y < 3; ++y)
      for (std::int64_t x = 0; x < 2; ++x)
        CHECK(out[(dy + y) * 6 + dx + x] == img[(sy + y) * 6 + sx + x]);
  }
}

TEST_CASE("jigsaw: multiset preservation and constant-image identity") {
  CorruptionConfig cfg;
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto img = random_image({3, 8, 8}, rng);
    Rng r(100 + static_cast<std::uint64_t>(trial));
    auto out = jigsaw(img, cfg, r);
    CHECK(sorted_pixels(out) == sorted_pixels(img));  // dims divisible: full region tiled
    bool differs = false;
    for (std::int64_t i = 0; i < img.size(); ++i) differs = differs || out[i] != img[i];
    CHECK(differs);
  }
  Tensor<double> constant{Shape{1, 6, 6}, 0.4};
  Rng r(5);
  auto out = jigsaw(constant, cfg, r);
  for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.4);
}

TEST_CASE("jigsaw: non-divisible dims shuffle the centered window only") {
  CorruptionConfig cfg;
  cfg.jigsaw_grids = {{2, 3}};
  Rng rng(9);
  auto img = random_image({1, 7, 7}, rng);
  Rng r(11);
  auto out = jigsaw(img, cfg, r);
  // tiled window is 6x6 starting at (0,0); pixels outside it are untouched
  std::vector<double> in_window, out_window;
  for (std::int64_t y = 0; y < 7; ++y)
    for (std::int64_t x = 0; x < 7; ++x) {
      if (y < 6 && x < 6) {
        in_window.push_back(img[y * 7 + x]);
        out_window.push_back(out[y * 7 + x]);
      } else {
        CHECK(out[y * 7 + x] == img[y * 7 + x]);
      }
    }
  std::sort(in_window.begin(), in_window.end());
  std::sort(out_window.begin(), out_window.end());
  CHECK(in_window == out_window);
}

TEST_CASE("jigsaw: image smaller than the smallest grid errors") {
  Tensor<double> tiny{Shape{1, 1, 1}, 0.5};
  CHECK_THROWS_AS(jigsaw_with(tiny, 2, 3, std::vector<int>(6, 0)), CorruptionError);
}

TEST_CASE("invert: grayscale is forced full inversion; involution; untouched channels") {
  Rng rng(7);
  auto gray = random_image({1, 5, 5}, rng);
  Rng r(1);
  auto [inv, subset] = invert(gray, r);
  REQUIRE(subset == std::set<std::int64_t>{0});
  for (std::int64_t i = 0; i < gray.size(); ++i) CHECK(inv[i] == Catch::Approx(1.0 - gray[i]));

  auto twice = invert_with(inv, subset);
  for (std::int64_t i = 0; i < gray.size(); ++i) CHECK(twice[i] == gray[i]);

  auto rgb = random_image({3, 4, 4}, rng);
  auto out = invert_with(rgb, {0, 2});
  for (std::int64_t i = 0; i < 16; ++i) {
    CHECK(out[16 + i] == rgb[16 + i]);  // channel 1 bit-identical
    CHECK(out[i] == Catch::Approx(1.0 - rgb[i]));
    CHECK(out[32 + i] == Catch::Approx(1.0 - rgb[32 + i]));
  }
}

TEST_CASE("mosaic: hand-computed 2x2 block means; b=1 identity; constants") {
  Tensor<double> img{Shape{1, 4, 4}};
  for (std::int64_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i) / 16.0;
  auto out = mosaic_with(img, 2);
  const double m00 = (img[0] + img[1] + img[4] + img[5]) / 4;
  const double m01 = (img[2] + img[3] + img[6] + img[7]) / 4;
  const double m10 = (img[8] + img[9] + img[12] + img[13]) / 4;
  const double m11 = (img[10] + img[11] + img[14] + img[15]) / 4;
  CHECK(out[0] == Catch::Approx(m00));
  CHECK(out[5] == Catch::Approx(m00));
  CHECK(out[3] == Catch::Approx(m01));
  CHECK(out[12] == Catch::Approx(m10));
  CHECK(out[15] == Catch::Approx(m11));

  auto same = mosaic_with(img, 1);
  for (std::int64_t i = 0; i < 16; ++i) CHECK(same[i] == img[i]);

  Tensor<double> constant{Shape{1, 4, 4}, 0.3};
  auto c = mosaic_with(constant, 3);  // edge blocks partial
  for (std::int64_t i = 0; i < 16; ++i) CHECK(c[i] == Catch::Approx(0.3));

  CHECK_THROWS_AS(mosaic_with(img, 5), CorruptionError);
}

TEST_CASE("speckle: domination, range, zeros fixed, scalar formula") {
  CorruptionConfig cfg;
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto img = random_image({1, 6, 6}, rng);
    Rng r(200 + static_cast<std::uint64_t>(trial));
    auto out = speckle(img, cfg, r);
    for (std::int64_t i = 0; i < img.size(); ++i) {
      CHECK(out[i] >= img[i]);
      CHECK(out[i] <= 1.0);
    }
  }
  Tensor<double> zeros{Shape{1, 3, 3}, 0.0};
  Rng r(5);
  auto out = speckle(zeros, cfg, r);
  for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out[i] == 0.0);

  // pixel 0.8 with noise 0.5 -> min(0.8 + 0.4, 1) = 1.0 (scalar oracle)
  CHECK(std::min(0.8 + 0.8 * 0.5, 1.0) == 1.0);
}

TEST_CASE("flip_digit: exclusion rules and involution") {
  CorruptionConfig cfg;
  auto digits = make_digits<double>(20, 28, 3, "d");
  auto img = Tensor<double>{Shape{1, 28, 28}};
  std::copy_n(digits.images.data(), 28 * 28, img.data());

  // label 8 -> absent both orientations
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    Rng r(seed);
    CHECK_FALSE(flip_digit(img, 8, cfg, r, true).has_value());
  }
  // label 3: horizontal returns, vertical absent; exercised via forced coins
  int returned = 0, absent = 0;
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    Rng r(seed);
    Rng probe = r;  // coin() uses the first draw
    const bool horizontal = probe.coin();
    auto res = flip_digit(img, 3, cfg, r, true);
    if (horizontal) {
      CHECK(res.has_value());
      ++returned;
    } else {
      CHECK_FALSE(res.has_value());
      ++absent;
    }
  }
  CHECK(returned > 0);
  CHECK(absent > 0);

  auto once = flip_image(img, true);
  auto twice = flip_image(once, true);
  for (std::int64_t i = 0; i < img.size(); ++i) CHECK(twice[i] == img[i]);

  Rng r(1);
  CHECK_THROWS_AS(flip_digit(img, 3, cfg, r, false), ConfigError);
}

TEST_CASE("synthesize_outliers: single-transform ensemble is that transform") {
  auto t_in = load_dataset<float>("blobs:classes=2,count=32,size=8", "train");
  CorruptionConfig cfg;
  cfg.enabled = {Corruption::invert};
  cfg.rng_seed = 21;
  auto out = synthesize_outliers(t_in, cfg, 10);
  CHECK(out.count() == 10);
  CHECK(out.provenance == OutlierProvenance::pseudo_corruption);
  for (const auto& t : out.tags) CHECK(t == "invert");
  // grayscale: inversion is forced, so each output is 1 - some source image
  for (std::int64_t i = 0; i < 10; ++i) {
    bool matched = false;
    for (std::int64_t s = 0; s < t_in.count() && !matched; ++s) {
      bool all = true;
      for (std::int64_t p = 0; p < 64 && all; ++p)
        all = std::abs(out.images[i * 64 + p] - (1.0f - t_in.images[s * 64 + p])) < 1e-6f;
      matched = all;
    }
    CHECK(matched);
  }
}

TEST_CASE("synthesize_outliers: tag histogram is uniform within 5 sigma") {
  auto t_in = load_dataset<float>("digits:count=200,size=28", "train");
  CorruptionConfig cfg;
  cfg.enabled = {Corruption::jigsaw, Corruption::invert, Corruption::mosaic, Corruption::speckle,
                 Corruption::flip};
  cfg.rng_seed = 5;
  const std::int64_t n = 1000;
  auto out = synthesize_outliers(t_in, cfg, n);
  std::map<std::string, int> hist;
  for (const auto& t : out.tags) hist[t]++;
  const double p = 1.0 / 5.0;
  const double mean = n * p;
  const double sigma = std::sqrt(n * p * (1 - p));
  for (const auto& kind : {"jigsaw", "invert", "mosaic", "speckle", "flip"}) {
    INFO(kind << " count " << hist[kind]);
    CHECK(std::abs(hist[kind] - mean) <= 5 * sigma);
  }
}

TEST_CASE("synthesize_outliers: determinism and inapplicable-config error") {
  auto t_in = load_dataset<float>("blobs:classes=2,count=16,size=8", "train");
  CorruptionConfig cfg;
  cfg.rng_seed = 77;
  auto a = synthesize_outliers(t_in, cfg, 25);
  auto b = synthesize_outliers(t_in, cfg, 25);
  CHECK(pixel_checksum(a.images) == pixel_checksum(b.images));
  CHECK(a.tags == b.tags);

  CorruptionConfig fliponly;
  fliponly.enabled = {Corruption::flip};
  CHECK_THROWS_AS(synthesize_outliers(t_in, fliponly, 5), ConfigError);
}

TEST_CASE("every corruption output stays in [0,1] and differs from its source") {
  auto t_in = load_dataset<float>("digits:count=100,size=28", "train");
  CorruptionConfig cfg;
  cfg.enabled = {Corruption::jigsaw, Corruption::invert, Corruption::speckle};
  cfg.rng_seed = 31;
  auto out = synthesize_outliers(t_in, cfg, 100);
  CHECK(out.images.min_value() >= 0.0f);
  CHECK(out.images.max_value() <= 1.0f);
}

TEST_CASE("noise outliers: range, mean, determinism") {
  auto u = noise_outliers<float>("uniform", {1, 8, 8}, 10, 3);
  CHECK(u.count() == 10);
  CHECK(u.images.min_value() >= 0.0f);
  CHECK(u.images.max_value() <= 1.0f);
  double mean = 0;
  for (std::int64_t i = 0; i < u.images.size(); ++i) mean += u.images[i];
  mean /= static_cast<double>(u.images.size());
  CHECK(std::abs(mean - 0.5) < 0.05);  // n = 10*64 draws

  auto g1 = noise_outliers<float>("gaussian", {1, 8, 8}, 1, 9);
  auto g2 = noise_outliers<float>("gaussian", {1, 8, 8}, 1, 9);
  CHECK(pixel_checksum(g1.images) == pixel_checksum(g2.images));
  CHECK(g1.provenance == OutlierProvenance::noise_gaussian);
  CHECK_THROWS_AS(noise_outliers<float>("pink", {1, 8, 8}, 1, 9), ConfigError);
}
