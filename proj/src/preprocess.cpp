#include "hvgg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <tuple>

#include <Eigen/Dense>

#include "hvgg/error.hpp"
#include "hvgg/log.hpp"

namespace hvgg {

double Image::channel_mean(std::size_t c) const {
  if (pixel_count() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = c; i < pixels.size(); i += channels) s += pixels[i];
  return s / double(pixel_count());
}

double Image::mean() const {
  if (pixels.empty()) return 0.0;
  double s = 0.0;
  for (auto p : pixels) s += p;
  return s / double(pixels.size());
}

// ---- patching -------------------------------------------------------------

std::size_t patch_count(std::size_t width, std::size_t height, std::size_t window,
                        std::size_t stride) {
  if (stride == 0) throw std::invalid_argument("patch stride must be at least 1");
  if (window == 0) throw std::invalid_argument("patch window must be positive");
  if (window > width || window > height) {
    throw std::invalid_argument("patch window " + std::to_string(window) + " exceeds image " +
                                std::to_string(width) + "x" + std::to_string(height));
  }
  return ((width - window) / stride + 1) * ((height - window) / stride + 1);
}

std::vector<PatchOrigin> patch_grid(std::size_t width, std::size_t height, std::size_t window,
                                    std::size_t stride) {
  std::vector<PatchOrigin> out;
  out.reserve(patch_count(width, height, window, stride));
  for (std::size_t y = 0; y + window <= height; y += stride) {
    for (std::size_t x = 0; x + window <= width; x += stride) out.push_back({x, y});
  }
  return out;
}

Image crop(const Image& image, std::size_t x, std::size_t y, std::size_t w, std::size_t h) {
  if (x + w > image.width || y + h > image.height) throw std::out_of_range("crop outside image");
  Image out(w, h, image.channels);
  const std::size_t row = w * image.channels;
  for (std::size_t r = 0; r < h; ++r) {
    const auto* src = image.pixels.data() + ((y + r) * image.width + x) * image.channels;
    std::copy(src, src + row, out.pixels.begin() + r * row);
  }
  return out;
}

std::vector<RawPatch> extract_patches(const Image& image, std::size_t window, std::size_t stride) {
  std::vector<RawPatch> out;
  for (const auto& o : patch_grid(image.width, image.height, window, stride)) {
    out.push_back({o, crop(image, o.x, o.y, window, window)});
  }
  return out;
}

std::size_t stride_for_budget(std::span<const std::array<std::size_t, 2>> sizes,
                              std::size_t window, std::size_t budget) {
  std::size_t stride = window;
  for (;;) {
    std::size_t total = 0;
    for (const auto& s : sizes) total += patch_count(s[0], s[1], window, stride);
    if (total >= budget || stride == 1) return stride;
    stride = std::max<std::size_t>(1, stride / 2);
  }
}

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0 || image.width == 0 || image.height == 0) {
    throw std::invalid_argument("resize to or from an empty image");
  }
  if (width == image.width && height == image.height) return image;
  Image out(width, height, image.channels);
  const double sx = double(image.width) / double(width);
  const double sy = double(image.height) / double(height);
  auto taps = [](std::size_t i, double scale, std::size_t n) {
    double s = std::clamp((double(i) + 0.5) * scale - 0.5, 0.0, double(n - 1));
    auto i0 = static_cast<std::size_t>(s);
    std::size_t i1 = std::min(i0 + 1, n - 1);
    return std::tuple{i0, i1, s - double(i0)};
  };
  for (std::size_t y = 0; y < height; ++y) {
    auto [y0, y1, fy] = taps(y, sy, image.height);
    for (std::size_t x = 0; x < width; ++x) {
      auto [x0, x1, fx] = taps(x, sx, image.width);
      for (std::size_t c = 0; c < image.channels; ++c) {
        double top = (1 - fx) * image.at(x0, y0, c) + fx * image.at(x1, y0, c);
        double bot = (1 - fx) * image.at(x0, y1, c) + fx * image.at(x1, y1, c);
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround((1 - fy) * top + fy * bot));
      }
    }
  }
  return out;
}

// ---- colour -----------------------------------------------------------------

double rgb_to_od(std::uint8_t intensity) {
  return -std::log10(double(std::max<std::uint8_t>(intensity, 1)) / 255.0);
}

std::uint8_t od_to_rgb(double od) {
  double v = 255.0 * std::pow(10.0, -od);
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

std::vector<double> rgb_to_od(const Image& rgb) {
  if (rgb.channels != 3) throw std::invalid_argument("optical density needs an RGB image");
  std::array<double, 256> table;
  for (int i = 0; i < 256; ++i) table[i] = rgb_to_od(static_cast<std::uint8_t>(i));
  std::vector<double> out(rgb.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = table[rgb.pixels[i]];
  return out;
}

std::uint8_t luminance(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return static_cast<std::uint8_t>((299u * r + 587u * g + 114u * b + 500u) / 1000u);
}

Image to_grayscale(const Image& rgb) {
  if (rgb.channels == 1) return rgb;
  if (rgb.channels != 3) throw std::invalid_argument("grayscale conversion needs an RGB image");
  Image out(rgb.width, rgb.height, 1);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = luminance(rgb.pixels[3 * i], rgb.pixels[3 * i + 1], rgb.pixels[3 * i + 2]);
  }
  return out;
}

// ---- stain model ------------------------------------------------------------

std::array<double, 2> stain_concentrations(const StainMatrix& w, std::span<const double, 3> od) {
  double a00 = 0, a01 = 0, a11 = 0, b0 = 0, b1 = 0;
  for (int c = 0; c < 3; ++c) {
    a00 += w[c][0] * w[c][0];
    a01 += w[c][0] * w[c][1];
    a11 += w[c][1] * w[c][1];
    b0 += w[c][0] * od[c];
    b1 += w[c][1] * od[c];
  }
  const double det = a00 * a11 - a01 * a01;
  if (det > 1e-12 * a00 * a11) {
    double c0 = (a11 * b0 - a01 * b1) / det;
    double c1 = (a00 * b1 - a01 * b0) / det;
    if (c0 >= 0 && c1 >= 0) return {c0, c1};
  }
  // Active set: one stain at zero. Residual of the single-column fit with
  // coefficient x is |od|^2 - b^2/a, so compare b^2/a.
  double x0 = a00 > 0 ? std::max(0.0, b0 / a00) : 0.0;
  double x1 = a11 > 0 ? std::max(0.0, b1 / a11) : 0.0;
  double gain0 = x0 * b0, gain1 = x1 * b1;
  return gain0 >= gain1 ? std::array<double, 2>{x0, 0.0} : std::array<double, 2>{0.0, x1};
}

namespace {

double percentile99(std::vector<double> v) {
  if (v.empty()) return 0.0;
  auto k = static_cast<std::size_t>(std::ceil(0.99 * double(v.size()))) - 1;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

// Starting stains from the angular extremes of the OD cloud in its principal
// plane (1st and 99th percentile angles). Near-pure pixels of each stain sit at
// the extremes, so the factorization starts close to the answer.
StainMatrix initial_stains(const std::vector<double>& v) {
  const std::size_t n = v.size() / 3;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < n; ++i) mean += Eigen::Vector3d(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
  mean /= double(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Vector3d d = Eigen::Vector3d(v[3 * i], v[3 * i + 1], v[3 * i + 2]) - mean;
    cov += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  Eigen::Vector3d e1 = eig.eigenvectors().col(2), e2 = eig.eigenvectors().col(1);
  if (e1.sum() < 0) e1 = -e1;
  if (e2.sum() < 0) e2 = -e2;
  std::vector<double> phi(n);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::Vector3d p(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
    phi[i] = std::atan2(p.dot(e2), p.dot(e1));
  }
  std::sort(phi.begin(), phi.end());
  const std::array<double, 2> ends{phi[std::size_t(0.01 * double(n - 1))],
                                   phi[std::size_t(0.99 * double(n - 1))]};
  StainMatrix w{};
  for (int k = 0; k < 2; ++k) {
    Eigen::Vector3d d = (std::cos(ends[k]) * e1 + std::sin(ends[k]) * e2).cwiseMax(0.0);
    if (d.norm() == 0) d = e1.cwiseAbs();
    d.normalize();
    for (int c = 0; c < 3; ++c) w[c][k] = d[c];
  }
  return w;
}

}  // namespace

StainFit fit_stain_model(std::span<const double> od, const StainFitOptions& options, Rng& rng) {
  if (od.size() % 3 != 0) throw std::invalid_argument("OD buffer must hold 3 values per pixel");
  if (options.lambda < 0 || options.beta < 0) {
    throw std::invalid_argument("stain lambda and beta must be non-negative");
  }
  std::vector<std::size_t> tissue;
  for (std::size_t p = 0; p < od.size() / 3; ++p) {
    if (std::max({od[3 * p], od[3 * p + 1], od[3 * p + 2]}) > options.beta) tissue.push_back(p);
  }
  if (tissue.size() < options.min_tissue) {
    throw DataError("only " + std::to_string(tissue.size()) + " tissue pixels (need " +
                    std::to_string(options.min_tissue) + "); skip this slide");
  }
  if (options.max_pixels > 0 && tissue.size() > options.max_pixels) {
    for (std::size_t i = 0; i < options.max_pixels; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, tissue.size() - 1);
      std::swap(tissue[i], tissue[pick(rng)]);
    }
    tissue.resize(options.max_pixels);
    std::sort(tissue.begin(), tissue.end());
  }

  const std::size_t n = tissue.size();
  std::vector<double> v(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) v[3 * i + c] = od[3 * tissue[i] + c];
  }

  StainMatrix w = initial_stains(v);
  std::vector<double> h(2 * n, 0.0);  // h[2*i + k]
  const double half_lambda = 0.5 * options.lambda;

  auto objective = [&] {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) {
        double r = v[3 * i + c] - w[c][0] * h[2 * i] - w[c][1] * h[2 * i + 1];
        s += r * r;
      }
      s += options.lambda * (h[2 * i] + h[2 * i + 1]);
    }
    return s;
  };

  StainFit fit;
  fit.tissue_pixels = n;
  fit.objective.reserve(options.iterations);
  for (std::size_t it = 0; it < options.iterations; ++it) {
    // Concentration rows: exact minimizer of the penalized least squares with
    // the other row fixed (columns have unit norm).
    for (int k = 0; k < 2; ++k) {
      const int o = 1 - k;
      for (std::size_t i = 0; i < n; ++i) {
        double d = 0;
        for (int c = 0; c < 3; ++c) d += w[c][k] * (v[3 * i + c] - w[c][o] * h[2 * i + o]);
        h[2 * i + k] = std::max(0.0, d - half_lambda);
      }
    }
    // Stain columns: maximize w.g over non-negative unit vectors, where g is
    // the residual of the other stain projected on this concentration row.
    for (int k = 0; k < 2; ++k) {
      const int o = 1 - k;
      std::array<double, 3> g{};
      double hh = 0;
      for (std::size_t i = 0; i < n; ++i) {
        hh += h[2 * i + k] * h[2 * i + k];
        for (int c = 0; c < 3; ++c) {
          g[c] += (v[3 * i + c] - w[c][o] * h[2 * i + o]) * h[2 * i + k];
        }
      }
      if (hh == 0) continue;
      double norm = 0;
      for (int c = 0; c < 3; ++c) norm += std::max(0.0, g[c]) * std::max(0.0, g[c]);
      if (norm > 0) {
        for (int c = 0; c < 3; ++c) w[c][k] = std::max(0.0, g[c]) / std::sqrt(norm);
      } else {
        int best = static_cast<int>(std::max_element(g.begin(), g.end()) - g.begin());
        for (int c = 0; c < 3; ++c) w[c][k] = c == best ? 1.0 : 0.0;
      }
    }
    fit.objective.push_back(objective());
  }
  if (!std::isfinite(fit.objective.empty() ? 0.0 : fit.objective.back())) {
    throw NumericError("stain factorization diverged");
  }

  const bool swapped = w[0][1] > w[0][0];
  if (swapped) {
    for (int c = 0; c < 3; ++c) std::swap(w[c][0], w[c][1]);
  }
  fit.model.w = w;
  fit.model.lambda = options.lambda;
  fit.model.beta = options.beta;
  std::vector<double> c0(n), c1(n);
  for (std::size_t i = 0; i < n; ++i) {
    c0[i] = h[2 * i];
    c1[i] = h[2 * i + 1];
  }
  if (swapped) std::swap(c0, c1);
  fit.model.scale = {percentile99(std::move(c0)), percentile99(std::move(c1))};
  return fit;
}

StainFit fit_stain_model(const Image& rgb, const StainFitOptions& options, Rng& rng) {
  auto od = rgb_to_od(rgb);
  return fit_stain_model(od, options, rng);
}

Image normalize_stain(const Image& rgb, const StainModel& source, const StainModel& target) {
  if (rgb.channels != 3) throw std::invalid_argument("stain normalization needs an RGB image");
  std::array<double, 2> ratio{1.0, 1.0};
  for (int k = 0; k < 2; ++k) {
    if (source.scale[k] > 1e-6) {
      ratio[k] = target.scale[k] / source.scale[k];
    } else {
      log::warn("source stain " + std::to_string(k) + " has a degenerate percentile; not rescaled");
    }
  }
  // Least-squares coordinates in the source stain plane. Unlike the
  // non-negative solve these reproduce every in-plane pixel exactly, so a
  // model normalized against itself changes nothing beyond rounding.
  const auto& w = source.w;
  double a00 = 0, a01 = 0, a11 = 0;
  for (int c = 0; c < 3; ++c) {
    a00 += w[c][0] * w[c][0];
    a01 += w[c][0] * w[c][1];
    a11 += w[c][1] * w[c][1];
  }
  const double det = a00 * a11 - a01 * a01;
  const bool planar = det > 1e-9;
  Image out(rgb.width, rgb.height, 3);
  for (std::size_t p = 0; p < rgb.pixel_count(); ++p) {
    std::array<double, 3> od{rgb_to_od(rgb.pixels[3 * p]), rgb_to_od(rgb.pixels[3 * p + 1]),
                             rgb_to_od(rgb.pixels[3 * p + 2])};
    std::array<double, 2> c;
    if (planar) {
      double b0 = 0, b1 = 0;
      for (int ch = 0; ch < 3; ++ch) {
        b0 += w[ch][0] * od[ch];
        b1 += w[ch][1] * od[ch];
      }
      c = {(a11 * b0 - a01 * b1) / det, (a00 * b1 - a01 * b0) / det};
    } else {
      c = stain_concentrations(w, od);
    }
    c[0] *= ratio[0];
    c[1] *= ratio[1];
    for (int ch = 0; ch < 3; ++ch) {
      double v = target.w[ch][0] * c[0] + target.w[ch][1] * c[1];
      out.pixels[3 * p + ch] = od_to_rgb(std::max(0.0, v));
    }
  }
  return out;
}

}  // namespace hvgg
