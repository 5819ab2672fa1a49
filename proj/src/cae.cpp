#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "hvgg/dataset.hpp"
#include "hvgg/error.hpp"
#include "hvgg/log.hpp"
#include "hvgg/preprocess.hpp"
#include "hvgg/training.hpp"

namespace hvgg {

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), Real(0), true);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / double(fan_in)));
  for (auto& v : t.data()) v = static_cast<Real>(normal(rng));
  return t;
}

Tensor zeros(std::size_t n) { return Tensor(Shape{n}, Real(0), true); }

}  // namespace

Cae::Cae(const CaeConfig& config, Rng& rng) : config_(config) {
  if (config.input < 8 || config.input % 8 != 0) {
    throw std::invalid_argument("CAE input side must be a positive multiple of 8");
  }
  if (config.embedding < 2) throw std::invalid_argument("CAE embedding must be at least 2");
  if (config.batch_size < 1) throw std::invalid_argument("CAE batch_size must be positive");
  const std::array<std::size_t, 4> ch{1, 16, 32, 64};
  for (std::size_t i = 0; i < 3; ++i) {
    enc_[i] = {he_normal(Shape{ch[i + 1], ch[i], 3, 3}, ch[i] * 9, rng), zeros(ch[i + 1])};
  }
  const std::size_t side = config.input / 8;
  const std::size_t flat = ch[3] * side * side;
  enc_fc_ = {he_normal(Shape{flat, config.embedding}, flat, rng), zeros(config.embedding)};
  dec_fc_ = {he_normal(Shape{config.embedding, flat}, config.embedding, rng), zeros(flat)};
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t in = ch[3 - i], out = ch[2 - i];
    dec_[i] = {he_normal(Shape{out, in, 3, 3}, in * 9, rng), zeros(out)};
  }
}

Tensor Cae::encode(Tape& tape, const Tensor& images) {
  Tensor x = images;
  for (auto& l : enc_) {
    x = ops::relu(tape, ops::add_bias(tape, ops::conv2d(tape, x, l.weight, 2), l.bias));
  }
  x = ops::flatten(tape, x);
  return ops::add_bias(tape, ops::matmul(tape, x, enc_fc_.weight), enc_fc_.bias);
}

Tensor Cae::decode(Tape& tape, const Tensor& code) {
  const std::size_t side = config_.input / 8;
  Tensor x = ops::relu(tape, ops::add_bias(tape, ops::matmul(tape, code, dec_fc_.weight),
                                           dec_fc_.bias));
  x = ops::reshape(tape, x, Shape{code.dim(0), 64, side, side});
  for (std::size_t i = 0; i < 3; ++i) {
    x = ops::add_bias(tape, ops::conv2d(tape, ops::upsample2x(tape, x), dec_[i].weight),
                      dec_[i].bias);
    if (i < 2) x = ops::relu(tape, x);
  }
  return x;
}

Tensor Cae::reconstruct(Tape& tape, const Tensor& images) {
  return decode(tape, encode(tape, images));
}

std::vector<NamedTensor> Cae::parameters() {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < 3; ++i) {
    out.push_back({"enc" + std::to_string(i) + ".w", enc_[i].weight});
    out.push_back({"enc" + std::to_string(i) + ".b", enc_[i].bias});
  }
  out.push_back({"enc_fc.w", enc_fc_.weight});
  out.push_back({"enc_fc.b", enc_fc_.bias});
  out.push_back({"dec_fc.w", dec_fc_.weight});
  out.push_back({"dec_fc.b", dec_fc_.bias});
  for (std::size_t i = 0; i < 3; ++i) {
    out.push_back({"dec" + std::to_string(i) + ".w", dec_[i].weight});
    out.push_back({"dec" + std::to_string(i) + ".b", dec_[i].bias});
  }
  return out;
}

std::size_t Cae::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

Tensor cae_batch(std::span<const Image> patches, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("empty CAE batch");
  const auto& first = patches[indices[0]];
  const std::size_t s = first.width;
  Tensor out(Shape{indices.size(), 1, s, s});
  auto data = out.data();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = patches[indices[b]];
    if (img.channels != 1 || img.width != s || img.height != s) {
      throw DataError("CAE input patches must be single-channel " + std::to_string(s) + "x" +
                      std::to_string(s));
    }
    for (std::size_t i = 0; i < s * s; ++i) data[b * s * s + i] = Real(img.pixels[i]) / Real(255);
  }
  return out;
}

namespace {

Tensor mse(Tape& tape, const Tensor& a, const Tensor& b) {
  Tensor d = ops::sub(tape, a, b);
  return ops::mean(tape, ops::mul(tape, d, d));
}

}  // namespace

double reconstruction_mse(Cae& cae, std::span<const Image> patches,
                          std::span<const std::size_t> indices) {
  double total = 0;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    auto idx = indices.subspan(start, std::min(chunk, indices.size() - start));
    Tape tape(false);
    Tensor x = cae_batch(patches, idx);
    total += double(mse(tape, cae.reconstruct(tape, x), x).item()) * double(idx.size());
  }
  return indices.empty() ? 0.0 : total / double(indices.size());
}

CaeTraining train_cae(Cae& cae, std::span<const Image> patches, Rng& rng) {
  const auto& cfg = cae.config();
  if (patches.size() < 2 * cfg.batch_size) {
    throw DataError("CAE training needs at least " + std::to_string(2 * cfg.batch_size) +
                    " patches, got " + std::to_string(patches.size()));
  }
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto held = static_cast<std::size_t>(std::lround(cfg.holdout * double(patches.size())));
  held = std::clamp<std::size_t>(held, 1, patches.size() - cfg.batch_size);
  std::vector<std::size_t> holdout(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());

  CaeTraining result;
  result.initial_holdout_mse = reconstruction_mse(cae, patches, holdout);
  RmsProp opt(cae.parameters());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum = 0;
    std::size_t steps = 0;
    for (const auto& b : batch_indices(train.size(), std::max<std::size_t>(2, cfg.batch_size), rng)) {
      std::vector<std::size_t> idx(b.size());
      for (std::size_t i = 0; i < b.size(); ++i) idx[i] = train[b[i]];
      Tape tape;
      Tensor x = cae_batch(patches, idx);
      Tensor loss = mse(tape, cae.reconstruct(tape, x), x);
      if (!std::isfinite(loss.item())) throw NumericError("CAE loss is not finite");
      for (auto& p : cae.parameters()) p.tensor.zero_grad();
      tape.backward(loss);
      opt.step(cfg.lr);
      sum += loss.item();
      ++steps;
    }
    result.epoch_loss.push_back(steps ? sum / double(steps) : 0.0);
  }
  result.final_holdout_mse = reconstruction_mse(cae, patches, holdout);
  return result;
}

std::vector<std::vector<double>> embed(Cae& cae, std::span<const Image> patches) {
  std::vector<std::vector<double>> out;
  out.reserve(patches.size());
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < patches.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, patches.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Tape tape(false);
    Tensor code = cae.encode(tape, cae_batch(patches, idx));
    auto d = code.data();
    const std::size_t dim = code.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.emplace_back(d.begin() + static_cast<std::ptrdiff_t>(i * dim),
                       d.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
    }
  }
  return out;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k, Rng& rng,
                    std::size_t max_iterations) {
  const std::size_t n = points.size();
  if (k == 0 || n < k) throw std::invalid_argument("k-means needs at least k points");
  for (const auto& p : points) {
    if (p.size() != points[0].size()) throw std::invalid_argument("ragged k-means input");
  }

  KMeansResult r;
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  r.centroids.push_back(points[first(rng)]);
  std::vector<double> d2(n);
  while (r.centroids.size() < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : r.centroids) best = std::min(best, sq_dist(points[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      while (pick + 1 < n && u >= d2[pick]) u -= d2[pick++];
      while (d2[pick] == 0 && pick + 1 < n) ++pick;  // never duplicate a centre
    }
    r.centroids.push_back(points[pick]);
  }

  r.labels.assign(n, k);
  for (std::size_t it = 0; it < max_iterations; ++it) {
    bool changed = false;
    double objective = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = sq_dist(points[i], r.centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        double d = sq_dist(points[i], r.centroids[c]);
        if (d < bd) bd = d, best = c;
      }
      objective += bd;
      if (r.labels[i] != best) changed = true, r.labels[i] = best;
    }
    r.objective.push_back(objective);
    r.iterations = it + 1;
    if (!changed) break;
    std::vector<std::vector<double>> sums(k, std::vector<double>(points[0].size(), 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[r.labels[i]];
      for (std::size_t j = 0; j < points[i].size(); ++j) sums[r.labels[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // keep an emptied centre where it was
      for (auto& v : sums[c]) v /= double(counts[c]);
      r.centroids[c] = std::move(sums[c]);
    }
  }
  return r;
}

ClusterAssignment filter_patches(const std::vector<std::vector<double>>& embeddings,
                                 std::span<const double> brightness, Rng& rng) {
  if (embeddings.size() != brightness.size()) {
    throw std::invalid_argument("one brightness value per embedding required");
  }
  if (embeddings.size() < 2) throw DataError("filtering needs at least 2 patches");
  ClusterAssignment out;
  const bool identical = std::all_of(embeddings.begin(), embeddings.end(),
                                     [&](const auto& e) { return e == embeddings[0]; });
  if (identical) {
    log::warn("all patch embeddings are identical; keeping every patch");
    out.degenerate = true;
    out.cluster.assign(embeddings.size(), 0);
    out.kept.assign(embeddings.size(), true);
    return out;
  }
  auto km = kmeans(embeddings, 2, rng);
  std::array<double, 2> sum{}, count{};
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    sum[km.labels[i]] += brightness[i];
    count[km.labels[i]] += 1;
  }
  std::array<double, 2> mean{};
  for (int c = 0; c < 2; ++c) mean[c] = count[c] > 0 ? sum[c] / count[c] : -1.0;
  out.useless_cluster = mean[1] > mean[0] ? 1 : 0;
  out.centroids = std::move(km.centroids);
  out.cluster = std::move(km.labels);
  out.kept.resize(out.cluster.size());
  for (std::size_t i = 0; i < out.cluster.size(); ++i) {
    out.kept[i] = out.cluster[i] != out.useless_cluster;
  }
  return out;
}

}  // namespace hvgg
