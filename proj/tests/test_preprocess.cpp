#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "hvgg/dataset.hpp"
#include "hvgg/error.hpp"
#include "hvgg/log.hpp"
#include "hvgg/preprocess.hpp"

using namespace hvgg;

namespace {

// Independent oracle: enumerate every top-left corner and keep those that fit.
std::size_t brute_patch_count(std::size_t w, std::size_t h, std::size_t win, std::size_t s) {
  std::size_t nx = 0, ny = 0;
  for (std::size_t x = 0; x < w; x += s) nx += (x + win <= w);
  for (std::size_t y = 0; y < h; y += s) ny += (y + win <= h);
  return nx * ny;
}

double angle_deg(const StainMatrix& w, int k, const std::array<double, 3>& v) {
  double dot = 0, nv = 0;
  for (int c = 0; c < 3; ++c) {
    dot += w[c][k] * v[c];
    nv += v[c] * v[c];
  }
  return std::acos(std::clamp(dot / std::sqrt(nv), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

std::array<double, 3> unit(std::array<double, 3> v) {
  double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  for (auto& x : v) x /= n;
  return v;
}

// Renders concentration maps through a stain matrix into an RGB image.
Image stained(const std::vector<std::array<double, 2>>& conc, std::size_t side,
              const std::array<double, 3>& h, const std::array<double, 3>& e) {
  Image img(side, side, 3);
  for (std::size_t p = 0; p < conc.size(); ++p) {
    for (int c = 0; c < 3; ++c) {
      img.pixels[3 * p + c] = od_to_rgb(h[c] * conc[p][0] + e[c] * conc[p][1]);
    }
  }
  return img;
}

// Two independent rectified gratings: each stain is absent over part of the
// image, so near-pure pixels of both stains exist.
std::vector<std::array<double, 2>> smooth_concentrations(std::size_t side, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double f1 = 1 + 2 * u(rng), f2 = 1 + 2 * u(rng), p1 = 6 * u(rng), p2 = 6 * u(rng);
  std::vector<std::array<double, 2>> c(side * side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      double a = double(x) / double(side), b = double(y) / double(side);
      double h = std::sin(2 * std::numbers::pi * f1 * a + p1);
      double e = std::sin(2 * std::numbers::pi * f2 * b + p2);
      c[y * side + x] = {1.2 * std::max(0.0, h), 0.8 * std::max(0.0, e)};
    }
  }
  return c;
}

const std::array<double, 3> kH = unit({0.65, 0.70, 0.29});
const std::array<double, 3> kE = unit({0.07, 0.99, 0.11});

}  // namespace

TEST_CASE("patch grid matches the count formula and an enumeration oracle") {
  CHECK(patch_count(3000, 2000, 1000, 1000) == 6);
  CHECK(patch_count(3000, 2000, 1000, 500) == 15);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    std::size_t w = std::uniform_int_distribution<std::size_t>(1, 400)(rng);
    std::size_t h = std::uniform_int_distribution<std::size_t>(1, 400)(rng);
    std::size_t win = std::uniform_int_distribution<std::size_t>(1, std::min(w, h))(rng);
    std::size_t s = std::uniform_int_distribution<std::size_t>(1, 2 * win)(rng);
    REQUIRE(patch_count(w, h, win, s) == brute_patch_count(w, h, win, s));
    auto grid = patch_grid(w, h, win, s);
    REQUIRE(grid.size() == brute_patch_count(w, h, win, s));
    for (const auto& o : grid) REQUIRE((o.x + win <= w && o.y + win <= h));
  }
  CHECK_THROWS_AS(patch_count(100, 50, 60, 10), std::invalid_argument);
  CHECK_THROWS_AS(patch_count(100, 100, 10, 0), std::invalid_argument);
}

TEST_CASE("stride equal to window partitions an exactly tiled image") {
  Image img(60, 40, 1);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = std::uint8_t(i % 251);
  auto patches = extract_patches(img, 20, 20);
  REQUIRE(patches.size() == 6);
  std::vector<int> covered(img.pixel_count(), 0);
  for (const auto& p : patches) {
    for (std::size_t y = 0; y < 20; ++y) {
      for (std::size_t x = 0; x < 20; ++x) {
        ++covered[(p.origin.y + y) * 60 + p.origin.x + x];
        REQUIRE(p.pixels.at(x, y, 0) == img.at(p.origin.x + x, p.origin.y + y, 0));
      }
    }
  }
  CHECK(std::all_of(covered.begin(), covered.end(), [](int c) { return c == 1; }));
}

TEST_CASE("budget halves the stride until enough patches exist") {
  std::vector<std::array<std::size_t, 2>> sizes{{128, 128}, {128, 128}};
  CHECK(stride_for_budget(sizes, 64, 8) == 64);   // 2*4 = 8
  CHECK(stride_for_budget(sizes, 64, 9) == 32);   // 2*9 = 18
  CHECK(stride_for_budget(sizes, 64, 100000) == 1);
}

TEST_CASE("bilinear resize") {
  Image flat(50, 50, 3);
  for (std::size_t p = 0; p < flat.pixel_count(); ++p) {
    flat.pixels[3 * p] = 10, flat.pixels[3 * p + 1] = 200, flat.pixels[3 * p + 2] = 77;
  }
  auto small = resize_bilinear(flat, 11, 11);
  for (std::size_t p = 0; p < small.pixel_count(); ++p) {
    REQUIRE(small.pixels[3 * p] == 10);
    REQUIRE(small.pixels[3 * p + 1] == 200);
    REQUIRE(small.pixels[3 * p + 2] == 77);
  }

  Image checker(2, 2, 1);
  checker.pixels = {0, 255, 255, 0};
  auto one = resize_bilinear(checker, 1, 1);
  CHECK(std::abs(int(one.pixels[0]) - 128) <= 1);

  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    Image g(200, 200, 3);
    const double a = 255 * u(rng), bx = u(rng) - 0.5, by = u(rng) - 0.5;
    for (std::size_t y = 0; y < 200; ++y) {
      for (std::size_t x = 0; x < 200; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          double v = a + (bx * double(x) + by * double(y)) * (1.0 + double(c) * 0.1);
          g.at(x, y, c) = std::uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
        }
      }
    }
    auto r = resize_bilinear(g, 45, 45);
    for (std::size_t c = 0; c < 3; ++c) REQUIRE(std::abs(r.channel_mean(c) - g.channel_mean(c)) <= 2.0);
  }
}

TEST_CASE("optical density") {
  CHECK(rgb_to_od(255) == 0.0);
  CHECK(rgb_to_od(0) == rgb_to_od(1));  // floor of 1
  CHECK(od_to_rgb(0.0) == 255);
  // 255 * 10^-1 = 25.5 sits between the two neighbouring integers.
  CHECK(rgb_to_od(25) > 1.0);
  CHECK(rgb_to_od(26) < 1.0);
  CHECK(od_to_rgb(1.0) == 26);
  for (int i = 0; i < 256; ++i) {
    auto v = static_cast<std::uint8_t>(i);
    REQUIRE(rgb_to_od(v) >= 0.0);
    REQUIRE(std::abs(int(od_to_rgb(rgb_to_od(v))) - i) <= 1);
  }
  Image img(2, 1, 3);
  img.pixels = {255, 128, 1, 0, 64, 200};
  auto od = rgb_to_od(img);
  REQUIRE(od.size() == 6);
  for (int i = 0; i < 6; ++i) CHECK(od[i] == rgb_to_od(img.pixels[i]));
}

TEST_CASE("grayscale luminance") {
  CHECK(luminance(255, 255, 255) == 255);
  for (int v = 0; v < 256; ++v) {
    auto b = static_cast<std::uint8_t>(v);
    REQUIRE(luminance(b, b, b) == v);
  }
  CHECK(luminance(100, 150, 200) == 141);
  Image img(1, 1, 3);
  img.pixels = {100, 150, 200};
  auto g = to_grayscale(img);
  CHECK(g.channels == 1);
  CHECK(g.pixels[0] == 141);
}

TEST_CASE("png round trip") {
  auto dir = std::filesystem::temp_directory_path() / "hvgg_png_test";
  std::filesystem::create_directories(dir);
  Image rgb(7, 5, 3);
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) rgb.pixels[i] = std::uint8_t(i * 37 % 256);
  write_png((dir / "rgb.png").string(), rgb);
  CHECK(read_png((dir / "rgb.png").string(), 3) == rgb);
  CHECK(read_png((dir / "rgb.png").string(), 1) == to_grayscale(rgb));
  auto gray = to_grayscale(rgb);
  write_png((dir / "g.png").string(), gray);
  CHECK(read_png((dir / "g.png").string(), 1) == gray);
  CHECK_THROWS_AS(read_png((dir / "missing.png").string()), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("stain fit recovers planted factors") {
  Rng rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    // Random non-negative unit stains with distinct red absorbance.
    std::array<double, 3> h = unit({0.5 + 0.4 * u(rng), 0.5 + 0.4 * u(rng), 0.1 + 0.3 * u(rng)});
    std::array<double, 3> e = unit({0.02 + 0.1 * u(rng), 0.8 + 0.2 * u(rng), 0.05 + 0.2 * u(rng)});
    const std::size_t n = 4000;
    std::vector<double> od(3 * n);
    for (std::size_t p = 0; p < n; ++p) {
      // Mostly one dominant stain per pixel, as in stained tissue.
      double ch = u(rng) < 0.5 ? 0.2 + 1.2 * u(rng) : 0.1 * u(rng);
      double ce = u(rng) < 0.5 ? 0.2 + 1.0 * u(rng) : 0.1 * u(rng);
      if (ch + ce < 0.3) ch += 0.3;
      for (int c = 0; c < 3; ++c) od[3 * p + c] = h[c] * ch + e[c] * ce;
    }
    Rng fit_rng(trial);
    auto fit = fit_stain_model(od, {}, fit_rng);
    const auto& w = fit.model.w;
    for (int k = 0; k < 2; ++k) {
      double norm = 0;
      for (int c = 0; c < 3; ++c) {
        CHECK(w[c][k] >= 0.0);
        norm += w[c][k] * w[c][k];
      }
      CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
    }
    double direct = std::max(angle_deg(w, 0, h), angle_deg(w, 1, e));
    double swapped = std::max(angle_deg(w, 0, e), angle_deg(w, 1, h));
    CHECK(std::min(direct, swapped) < 5.0);
    CHECK(w[0][0] >= w[0][1]);  // larger red absorbance first
    for (std::size_t i = 1; i < fit.objective.size(); ++i) {
      REQUIRE(fit.objective[i] <= fit.objective[i - 1] * (1 + 1e-12));
    }
    CHECK(fit.objective.size() == 200);
  }
}

TEST_CASE("stain fit of a single-stain image leaves one row near zero") {
  Rng rng(5);
  std::uniform_real_distribution<double> u(0.2, 1.5);
  std::vector<double> od;
  for (int p = 0; p < 3000; ++p) {
    double c = u(rng);
    for (int ch = 0; ch < 3; ++ch) od.push_back(kH[ch] * c);
  }
  auto fit = fit_stain_model(od, {}, rng);
  auto lo = std::min(fit.model.scale[0], fit.model.scale[1]);
  auto hi = std::max(fit.model.scale[0], fit.model.scale[1]);
  CHECK(lo < 0.05 * hi);
}

TEST_CASE("stain fit rejects slides with too little tissue") {
  Image blank(40, 40, 3, 250);
  Rng rng(0);
  CHECK_THROWS_AS(fit_stain_model(blank, {}, rng), DataError);
  std::vector<double> od(3 * 999, 0.5);
  CHECK_THROWS_AS(fit_stain_model(od, {}, rng), DataError);
  std::vector<double> enough(3 * 1000, 0.5);
  enough[0] = 0.7;
  CHECK_NOTHROW(fit_stain_model(enough, {}, rng));
}

TEST_CASE("non-negative concentrations") {
  StainMatrix w{};
  for (int c = 0; c < 3; ++c) w[c] = {kH[c], kE[c]};
  std::array<double, 3> od{};
  for (int c = 0; c < 3; ++c) od[c] = 0.8 * kH[c] + 0.3 * kE[c];
  auto x = stain_concentrations(w, od);
  CHECK(x[0] == doctest::Approx(0.8));
  CHECK(x[1] == doctest::Approx(0.3));
  // Outside the cone: brute-force search over a fine grid is the oracle.
  Rng rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    std::array<double, 3> v{u(rng), u(rng), u(rng)};
    auto got = stain_concentrations(w, v);
    auto resid = [&](double a, double b) {
      double s = 0;
      for (int c = 0; c < 3; ++c) s += std::pow(v[c] - w[c][0] * a - w[c][1] * b, 2);
      return s;
    };
    double best = 1e9;
    for (double a = 0; a <= 2.0; a += 0.005) {
      for (double b = 0; b <= 2.0; b += 0.005) best = std::min(best, resid(a, b));
    }
    REQUIRE(got[0] >= 0.0);
    REQUIRE(got[1] >= 0.0);
    REQUIRE(resid(got[0], got[1]) <= best + 1e-9);
  }
}

TEST_CASE("stain normalization") {
  const std::size_t side = 64;
  Rng rng(21);
  auto conc = smooth_concentrations(side, rng);
  Image src = stained(conc, side, kH, kE);
  auto model = fit_stain_model(src, {}, rng).model;

  SUBCASE("self-normalization is idempotent") {
    auto out = normalize_stain(src, model, model);
    int worst = 0;
    for (std::size_t i = 0; i < src.pixels.size(); ++i) {
      worst = std::max(worst, std::abs(int(out.pixels[i]) - int(src.pixels[i])));
    }
    CHECK(worst <= 2);
    CHECK(std::abs(to_grayscale(out).mean() - to_grayscale(src).mean()) < 2.0);
  }
  SUBCASE("different stains, same concentrations, common target") {
    std::array<double, 3> h2 = unit({0.55, 0.80, 0.25});
    std::array<double, 3> e2 = unit({0.15, 0.95, 0.20});
    Image other = stained(conc, side, h2, e2);
    auto other_model = fit_stain_model(other, {}, rng).model;
    Image target = stained(smooth_concentrations(side, rng), side, kH, kE);
    auto target_model = fit_stain_model(target, {}, rng).model;
    auto a = normalize_stain(src, model, target_model);
    auto b = normalize_stain(other, other_model, target_model);
    double diff = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
      diff += std::abs(int(a.pixels[i]) - int(b.pixels[i]));
    }
    CHECK(diff / double(a.pixels.size()) < 3.0);
  }
  SUBCASE("background is unchanged") {
    Image white(16, 16, 3, 255);
    CHECK(normalize_stain(white, model, model) == white);
  }
}

namespace {

std::vector<Image> gray_patches(const std::vector<std::vector<std::uint8_t>>& raw, std::size_t s) {
  std::vector<Image> out;
  for (const auto& r : raw) {
    Image img(s, s, 1);
    img.pixels = r;
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace

TEST_CASE("auto-encoder") {
  CaeConfig cfg;
  cfg.input = 16;
  cfg.embedding = 8;
  cfg.batch_size = 8;
  Rng rng(4);

  SUBCASE("constant corpus is reconstructed almost exactly") {
    cfg.epochs = 500;
    cfg.batch_size = 4;
    std::vector<Image> patches(40, Image(16, 16, 1, 180));
    Cae cae(cfg, rng);
    auto r = train_cae(cae, patches, rng);
    // Pixel values live in [0, 1]; the variance of a uniform pixel is 1/12.
    CHECK(r.final_holdout_mse < 1e-3 / 12.0);
  }
  SUBCASE("held-out error falls and embeddings are deterministic") {
    cfg.epochs = 8;
    SyntheticSpec spec;
    spec.image_size = 16;
    spec.samples_per_class = 8;
    auto corpus = generate_synthetic(spec);
    std::vector<std::vector<std::uint8_t>> raw;
    for (const auto& s : corpus.images.samples) raw.push_back(s.pixels);
    auto patches = gray_patches(raw, 16);
    Cae cae(cfg, rng);
    auto r = train_cae(cae, patches, rng);
    CHECK(r.final_holdout_mse < r.initial_holdout_mse);
    CHECK(r.epoch_loss.size() == 8);

    std::vector<Image> twins{patches[3], patches[3], patches[7]};
    auto e = embed(cae, twins);
    REQUIRE(e.size() == 3);
    CHECK(e[0].size() == 8);
    CHECK(e[0] == e[1]);
    CHECK(e[0] != e[2]);
  }
  SUBCASE("too few patches") {
    std::vector<Image> patches(15, Image(16, 16, 1, 0));
    Cae cae(cfg, rng);
    CHECK_THROWS_AS(train_cae(cae, patches, rng), DataError);
  }
  CHECK_THROWS_AS(Cae(CaeConfig{.input = 12}, rng), std::invalid_argument);
}

TEST_CASE("k-means") {
  std::vector<std::vector<double>> pts{{0, 0}, {10, 10}, {0.1, 0}, {10.1, 10}};
  Rng rng(0);
  auto r = kmeans(pts, 2, rng);
  CHECK(r.labels[0] == r.labels[2]);
  CHECK(r.labels[1] == r.labels[3]);
  CHECK(r.labels[0] != r.labels[1]);

  std::normal_distribution<double> n(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::vector<double>> cloud;
    for (int i = 0; i < 200; ++i) cloud.push_back({n(rng), n(rng), n(rng) * 3});
    auto km = kmeans(cloud, 2, rng);
    REQUIRE(km.iterations <= 100);
    for (std::size_t i = 1; i < km.objective.size(); ++i) {
      REQUIRE(km.objective[i] <= km.objective[i - 1] + 1e-9);
    }
  }
}

TEST_CASE("filter keeps the darker cluster") {
  std::vector<std::vector<double>> emb{{0, 0}, {0.1, 0}, {10, 10}, {10.1, 10}};
  std::vector<double> bright{120, 130, 240, 250};
  Rng rng(1);
  auto a = filter_patches(emb, bright, rng);
  CHECK(a.kept == std::vector<bool>{true, true, false, false});
  CHECK(a.centroids.size() == 2);

  log::quiet() = true;
  std::vector<std::vector<double>> same(5, {1.0, 2.0});
  auto d = filter_patches(same, std::vector<double>(5, 100.0), rng);
  log::quiet() = false;
  CHECK(d.degenerate);
  CHECK(std::all_of(d.kept.begin(), d.kept.end(), [](bool k) { return k; }));
  CHECK_THROWS_AS(filter_patches({{1.0}}, std::vector<double>{1.0}, rng), DataError);
}

TEST_CASE("filter drops blank patches from a labelled corpus") {
  SyntheticSpec spec;
  spec.samples_per_class = 12;
  auto corpus = generate_synthetic(spec);
  std::vector<std::vector<std::uint8_t>> raw;
  std::vector<bool> blank;
  Rng rng(9);
  std::normal_distribution<double> n(0.0, 3.0);
  for (const auto& s : corpus.images.samples) {
    raw.push_back(s.pixels);
    blank.push_back(false);
  }
  for (int i = 0; i < 60; ++i) {
    std::vector<std::uint8_t> px(32 * 32);
    for (auto& p : px) p = std::uint8_t(std::clamp(std::lround(242 + n(rng)), 0L, 255L));
    raw.push_back(px);
    blank.push_back(true);
  }
  auto patches = gray_patches(raw, 32);
  CaeConfig cfg;
  cfg.epochs = 3;
  Cae cae(cfg, rng);
  train_cae(cae, patches, rng);
  auto emb = embed(cae, patches);
  std::vector<double> bright;
  for (const auto& p : patches) bright.push_back(p.mean());
  auto a = filter_patches(emb, bright, rng);
  std::size_t blanks = 0, dropped = 0;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (!blank[i]) continue;
    ++blanks;
    dropped += !a.kept[i];
  }
  CHECK(double(dropped) >= 0.98 * double(blanks));
}
