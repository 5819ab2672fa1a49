#pragma once

// Slide preprocessing: sliding-window patching, bilinear resize, optical
// density and sparse-NMF stain normalization, grayscale conversion, and the
// auto-encoder + k-means filter that drops background patches.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hvgg/model.hpp"
#include "hvgg/tensor.hpp"

namespace hvgg {

/// 8-bit raster, row-major, channels interleaved (1 = gray, 3 = RGB).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return width * height; }
  double channel_mean(std::size_t c) const;
  double mean() const;
  bool operator==(const Image&) const = default;
};

// PNG I/O. Reads convert to the requested channel count; failures throw DataError.
Image read_png(const std::string& path, std::size_t channels = 3);
void write_png(const std::string& path, const Image& image);

// ---- patching -------------------------------------------------------------

struct PatchOrigin {
  std::size_t x = 0;
  std::size_t y = 0;
  bool operator==(const PatchOrigin&) const = default;
};

/// (floor((W-w)/s)+1) * (floor((H-w)/s)+1); throws std::invalid_argument when
/// the window does not fit or the stride is zero.
std::size_t patch_count(std::size_t width, std::size_t height, std::size_t window,
                        std::size_t stride);
/// Top-left corners in row-major order (y outer, x inner).
std::vector<PatchOrigin> patch_grid(std::size_t width, std::size_t height, std::size_t window,
                                    std::size_t stride);

Image crop(const Image& image, std::size_t x, std::size_t y, std::size_t w, std::size_t h);

struct RawPatch {
  PatchOrigin origin;
  Image pixels;
};
std::vector<RawPatch> extract_patches(const Image& image, std::size_t window, std::size_t stride);

/// Largest stride (halving from `window`) whose grid yields at least `budget`
/// patches on the given images; stops at 1.
std::size_t stride_for_budget(std::span<const std::array<std::size_t, 2>> sizes,
                              std::size_t window, std::size_t budget);

/// Bilinear interpolation with pixel-centre alignment and edge clamping.
Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);

// ---- colour -----------------------------------------------------------------

double rgb_to_od(std::uint8_t intensity);
std::uint8_t od_to_rgb(double od);
/// Three OD values per pixel, in pixel order.
std::vector<double> rgb_to_od(const Image& rgb);

/// round(0.299 R + 0.587 G + 0.114 B), computed in integer arithmetic.
std::uint8_t luminance(std::uint8_t r, std::uint8_t g, std::uint8_t b);
Image to_grayscale(const Image& rgb);

using StainMatrix = std::array<std::array<double, 2>, 3>;  // [channel][stain]

struct StainModel {
  StainMatrix w{};
  std::array<double, 2> scale{};  // 99th percentile of each concentration row
  double lambda = 0.1;
  double beta = 0.15;
};

struct StainFitOptions {
  double lambda = 0.1;
  double beta = 0.15;
  std::size_t iterations = 200;
  std::size_t min_tissue = 1000;
  std::size_t max_pixels = 20000;  // tissue pixels beyond this are subsampled
};

struct StainFit {
  StainModel model;
  std::vector<double> objective;  // one value per iteration
  std::size_t tissue_pixels = 0;
};

/// Sparse NMF of tissue OD pixels (max channel > beta) by hierarchical
/// alternating least squares, started from the angular extremes of the OD
/// cloud. Percentiles are taken over the fitted sparse concentrations. Columns are unit-norm, non-negative, and ordered
/// with the larger red-channel OD first. Throws DataError when fewer than
/// `min_tissue` tissue pixels exist so the caller can skip the slide.
StainFit fit_stain_model(std::span<const double> od, const StainFitOptions& options, Rng& rng);
StainFit fit_stain_model(const Image& rgb, const StainFitOptions& options, Rng& rng);

/// Two-variable non-negative least squares of one OD pixel against W.
std::array<double, 2> stain_concentrations(const StainMatrix& w, std::span<const double, 3> od);

/// Least-squares concentrations in the source stain plane, rescaled per stain
/// by the ratio of percentiles, recombined with the target matrix.
Image normalize_stain(const Image& rgb, const StainModel& source, const StainModel& target);

// ---- auto-encoder filter ---------------------------------------------------

struct CaeConfig {
  std::size_t input = 32;  // side of the square grayscale input
  std::size_t embedding = 64;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double holdout = 0.1;  // fraction of patches held out for the error report
};

class Cae {
 public:
  Cae(const CaeConfig& config, Rng& rng);

  const CaeConfig& config() const { return config_; }
  std::size_t embedding_dim() const { return config_.embedding; }

  // images: [N, 1, S, S] in [0, 1].
  Tensor encode(Tape& tape, const Tensor& images);
  Tensor decode(Tape& tape, const Tensor& code);
  Tensor reconstruct(Tape& tape, const Tensor& images);

  std::vector<NamedTensor> parameters();
  std::size_t parameter_count();

 private:
  struct Layer {
    Tensor weight;
    Tensor bias;
  };
  CaeConfig config_;
  std::array<Layer, 3> enc_;
  Layer enc_fc_;
  Layer dec_fc_;
  std::array<Layer, 3> dec_;
};

struct CaeTraining {
  std::vector<double> epoch_loss;
  double initial_holdout_mse = 0;
  double final_holdout_mse = 0;
};

/// Grayscale patches of side config.input, as [N, 1, S, S] scaled to [0, 1].
Tensor cae_batch(std::span<const Image> patches, std::span<const std::size_t> indices);

/// Trains on a seeded shuffle of the patches with RMSprop and MSE.
/// Requires at least 2 * batch_size patches.
CaeTraining train_cae(Cae& cae, std::span<const Image> patches, Rng& rng);
double reconstruction_mse(Cae& cae, std::span<const Image> patches,
                          std::span<const std::size_t> indices);
/// One row of `embedding_dim` values per patch.
std::vector<std::vector<double>> embed(Cae& cae, std::span<const Image> patches);

struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> labels;
  std::vector<double> objective;  // after each assignment step
  std::size_t iterations = 0;
};

/// k-means++ seeding then Lloyd iterations until assignments stop changing or
/// `max_iterations` is reached.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, Rng& rng,
                    std::size_t max_iterations = 100);

struct ClusterAssignment {
  std::vector<std::vector<double>> centroids;  // 2 x d (empty when degenerate)
  std::vector<std::size_t> cluster;
  std::vector<bool> kept;
  std::size_t useless_cluster = 1;
  bool degenerate = false;  // identical embeddings: everything kept
};

/// Two-cluster split; the cluster whose patches are brighter on average is
/// dropped. `brightness` holds one mean pixel intensity per patch.
ClusterAssignment filter_patches(const std::vector<std::vector<double>>& embeddings,
                                 std::span<const double> brightness, Rng& rng);

}  // namespace hvgg
