#include "hvgg/training.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <stdexcept>
#include <thread>

#include "hvgg/error.hpp"
#include "hvgg/log.hpp"

namespace hvgg {

namespace {

std::string format_double(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_double(std::string_view s, const std::string& context) {
  double v = 0.0;
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw std::invalid_argument(context + ": '" + std::string(s) + "' is not a number");
  }
  return v;
}

int parse_epoch(std::string_view s, const std::string& context) {
  const double v = parse_double(s, context);
  if (v != std::floor(v)) throw std::invalid_argument(context + ": epoch must be an integer");
  return static_cast<int>(v);
}

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  while (true) {
    const auto pos = text.find(sep);
    parts.push_back(text.substr(0, pos));
    if (pos == std::string_view::npos) break;
    text.remove_prefix(pos + 1);
  }
  return parts;
}

template <typename Anchors>
void check_epochs(const Anchors& anchors, const char* what) {
  if (anchors.empty()) throw std::invalid_argument(std::string(what) + ": no anchors");
  if (anchors.front().epoch != 1) {
    throw std::invalid_argument(std::string(what) + ": first anchor must be at epoch 1");
  }
  for (std::size_t i = 1; i < anchors.size(); ++i) {
    if (anchors[i].epoch <= anchors[i - 1].epoch) {
      throw std::invalid_argument(std::string(what) + ": epochs must strictly increase");
    }
  }
}

template <typename Anchors>
const auto& anchor_at(const Anchors& anchors, int epoch) {
  if (epoch < 1) throw std::invalid_argument("epoch must be at least 1");
  if (anchors.empty()) throw std::invalid_argument("schedule has no anchors");
  auto it = std::upper_bound(anchors.begin(), anchors.end(), epoch,
                             [](int e, const auto& a) { return e < a.epoch; });
  return *std::prev(it);
}

}  // namespace

LossWeightSchedule LossWeightSchedule::coarse_to_fine() {
  return {{{1, {0.98, 0.02}}, {5, {0.30, 0.70}}, {10, {0.10, 0.90}}, {15, {0.00, 1.00}}}};
}

LossWeightSchedule LossWeightSchedule::single_level() { return {{{1, {1.0}}}}; }

LossWeightSchedule LossWeightSchedule::parse(const std::string& text) {
  LossWeightSchedule s;
  for (auto part : split(text, ';')) {
    if (part.find_first_not_of(' ') == std::string_view::npos) continue;
    const auto colon = part.find(':');
    if (colon == std::string_view::npos) {
      throw std::invalid_argument("loss weight anchor '" + std::string(part) +
                                  "' must look like epoch:w1,w2");
    }
    Anchor a;
    a.epoch = parse_epoch(part.substr(0, colon), "loss weight schedule");
    for (auto w : split(part.substr(colon + 1), ',')) {
      a.weights.push_back(parse_double(w, "loss weight schedule"));
    }
    s.anchors.push_back(std::move(a));
  }
  s.validate();
  return s;
}

std::string LossWeightSchedule::to_string() const {
  std::string out;
  for (const auto& a : anchors) {
    if (!out.empty()) out += ';';
    out += std::to_string(a.epoch) + ':';
    for (std::size_t k = 0; k < a.weights.size(); ++k) {
      if (k) out += ',';
      out += format_double(a.weights[k]);
    }
  }
  return out;
}

void LossWeightSchedule::validate() const {
  check_epochs(anchors, "loss weight schedule");
  const std::size_t k = anchors.front().weights.size();
  if (k == 0) throw std::invalid_argument("loss weight schedule: empty weight vector");
  for (const auto& a : anchors) {
    if (a.weights.size() != k) {
      throw std::invalid_argument("loss weight schedule: anchors differ in length");
    }
    double total = 0.0;
    for (double w : a.weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("loss weight schedule: negative weight");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("loss weight schedule: weights at epoch " +
                                  std::to_string(a.epoch) + " sum to " + format_double(total));
    }
  }
}

LrSchedule LrSchedule::step_decay() { return {{{1, 1e-3}, {11, 5e-4}, {16, 1e-4}}}; }

LrSchedule LrSchedule::parse(const std::string& text) {
  LrSchedule s;
  for (auto part : split(text, ';')) {
    if (part.find_first_not_of(' ') == std::string_view::npos) continue;
    const auto colon = part.find(':');
    if (colon == std::string_view::npos) {
      throw std::invalid_argument("learning-rate anchor '" + std::string(part) +
                                  "' must look like epoch:rate");
    }
    s.anchors.push_back({parse_epoch(part.substr(0, colon), "learning-rate schedule"),
                         parse_double(part.substr(colon + 1), "learning-rate schedule")});
  }
  s.validate();
  return s;
}

std::string LrSchedule::to_string() const {
  std::string out;
  for (const auto& a : anchors) {
    if (!out.empty()) out += ';';
    out += std::to_string(a.epoch) + ':' + format_double(a.rate);
  }
  return out;
}

void LrSchedule::validate() const {
  check_epochs(anchors, "learning-rate schedule");
  for (const auto& a : anchors) {
    if (!(a.rate > 0.0) || !std::isfinite(a.rate)) {
      throw std::invalid_argument("learning-rate schedule: rates must be positive");
    }
  }
}

const std::vector<double>& weights_at(const LossWeightSchedule& schedule, int epoch) {
  return anchor_at(schedule.anchors, epoch).weights;
}

double lr_at(const LrSchedule& schedule, int epoch) {
  return anchor_at(schedule.anchors, epoch).rate;
}

Tensor hierarchical_loss(Tape& tape, std::span<const Tensor> heads,
                         std::span<const std::vector<std::size_t>> targets,
                         std::span<const double> weights) {
  if (heads.size() != targets.size() || heads.size() != weights.size() || heads.empty()) {
    throw std::invalid_argument("hierarchical_loss: " + std::to_string(heads.size()) +
                                " heads, " + std::to_string(targets.size()) + " target sets, " +
                                std::to_string(weights.size()) + " weights");
  }
  std::vector<Tensor> terms;
  std::vector<double> used;
  for (std::size_t k = 0; k < heads.size(); ++k) {
    if (weights[k] == 0.0) {
      // Still validate the targets of a silent head.
      const std::size_t classes = heads[k].dim(1);
      for (auto t : targets[k]) {
        if (t >= classes) {
          throw std::out_of_range("hierarchical_loss: target " + std::to_string(t) +
                                  " out of range for head " + std::to_string(k));
        }
      }
      continue;
    }
    terms.push_back(ops::cross_entropy(tape, heads[k], targets[k]));
    used.push_back(weights[k]);
  }
  if (terms.empty()) throw std::invalid_argument("hierarchical_loss: all weights are zero");
  return ops::weighted_sum(tape, terms, used);
}

RmsProp::RmsProp(std::vector<NamedTensor> params, double rho, double eps)
    : params_(std::move(params)), rho_(rho), eps_(eps) {
  for (const auto& p : params_) acc_.emplace_back(p.tensor.size(), 0.0);
}

void RmsProp::step(double lr) {
  for (auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (Real g : std::as_const(p.tensor).grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
    }
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    if (!t.has_grad()) continue;
    auto theta = t.data();
    auto g = std::as_const(t).grad();
    auto& acc = acc_[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g[j];
      acc[j] = rho_ * acc[j] + (1.0 - rho_) * gj * gj;
      theta[j] = static_cast<Real>(double(theta[j]) - lr * gj / (std::sqrt(acc[j]) + eps_));
    }
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (runs < 1) throw std::invalid_argument("runs must be at least 1");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2");
  loss_weights.validate();
  lr.validate();
}

nlohmann::json EpochLog::to_json() const {
  nlohmann::json j;
  j["run"] = run;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["loss_weights"] = loss_weights;
  j["train_loss"] = train_loss;
  j["dev_coarse_acc"] = dev_coarse_acc ? nlohmann::json(*dev_coarse_acc) : nlohmann::json();
  j["dev_fine_acc"] = dev_fine_acc ? nlohmann::json(*dev_fine_acc) : nlohmann::json();
  return j;
}

std::vector<EpochLog> train(Network& network, const ImageSet& train_set,
                            const ImageSet* development, const TrainConfig& config, Rng& rng,
                            int run_index) {
  config.validate();
  if (train_set.size() < 2) throw DataError("training needs at least 2 examples");
  if (train_set.height != network.spec().height || train_set.width != network.spec().width) {
    throw DataError("training images are " + std::to_string(train_set.height) + "x" +
                    std::to_string(train_set.width) + ", network expects " +
                    std::to_string(network.spec().height) + "x" +
                    std::to_string(network.spec().width));
  }
  const bool hier = network.hierarchical();
  const LossWeightSchedule schedule =
      hier ? config.loss_weights : LossWeightSchedule::single_level();
  if (schedule.levels() != (hier ? 2u : 1u)) {
    throw std::invalid_argument("loss weight schedule has " + std::to_string(schedule.levels()) +
                                " levels, the network has " + (hier ? "2" : "1"));
  }
  if (!development || development->empty()) {
    log::warn("no development set; per-epoch development accuracy is not reported");
  }

  RmsProp optimizer(network.parameters());
  std::vector<EpochLog> logs;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochLog entry;
    entry.run = run_index;
    entry.epoch = epoch;
    entry.lr = lr_at(config.lr, epoch);
    entry.loss_weights = weights_at(schedule, epoch);

    const auto batches = batch_indices(train_set.size(), config.batch_size, rng);
    double loss_total = 0.0;
    for (const auto& idx : batches) {
      const auto batch = gather_batch(train_set, idx);
      Tape tape;
      const auto out = network.forward(tape, batch.images, Mode::train, rng);
      std::vector<Tensor> heads;
      std::vector<std::vector<std::size_t>> targets;
      if (hier) {
        heads = {out.coarse, out.fine};
        targets = {batch.coarse_targets, batch.fine_targets};
      } else {
        heads = {out.fine};
        targets = {batch.fine_targets};
      }
      const Tensor loss = hierarchical_loss(tape, heads, targets, entry.loss_weights);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      network.zero_grad();
      tape.backward(loss);
      optimizer.step(entry.lr);
      loss_total += loss.item();
    }
    entry.train_loss = loss_total / static_cast<double>(batches.size());
    if (development && !development->empty()) {
      const auto bundle = predict(network, *development);
      entry.dev_coarse_acc = overall_accuracy(bundle, Level::coarse);
      entry.dev_fine_acc = overall_accuracy(bundle, Level::fine);
    }
    logs.push_back(std::move(entry));
  }
  return logs;
}

namespace {

std::vector<double> softmax_row(std::span<const Real> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  std::vector<double> p(row.size());
  double total = 0.0;
  for (std::size_t c = 0; c < row.size(); ++c) total += (p[c] = std::exp(double(row[c]) - mx));
  for (auto& v : p) v /= total;
  return p;
}

}  // namespace

PredictionBundle predict(Network& network, const ImageSet& set, std::size_t batch_size) {
  const auto& h = network.spec().hierarchy;
  PredictionBundle bundle;
  bundle.fine_classes = h.fine_count();
  bundle.coarse_classes = h.coarse_count();
  Rng unused(0);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(set.size(), start + batch_size); ++i) idx.push_back(i);
    const auto batch = gather_batch(set, idx);
    Tape tape(false);
    const auto out = network.forward(tape, batch.images, Mode::infer, unused);
    const std::size_t kf = h.fine_count(), kc = h.coarse_count();
    for (std::size_t n = 0; n < idx.size(); ++n) {
      Prediction p;
      p.fine_probs = softmax_row(out.fine.data().subspan(n * kf, kf));
      p.coarse_probs = out.coarse.defined() ? softmax_row(out.coarse.data().subspan(n * kc, kc))
                                            : lift_to_coarse(p.fine_probs, h);
      p.true_fine = batch.fine_targets[n];
      p.true_coarse = batch.coarse_targets[n];
      bundle.items.push_back(std::move(p));
    }
  }
  return bundle;
}

namespace {

[[noreturn]] void rethrow_with_context(std::exception_ptr error, int run, std::uint64_t seed) {
  const std::string prefix =
      "run " + std::to_string(run) + " (seed " + std::to_string(seed) + ") failed: ";
  try {
    std::rethrow_exception(error);
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const DataError& e) {
    throw DataError(prefix + e.what());
  } catch (const UsageError& e) {
    throw UsageError(prefix + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(prefix + e.what());
  }
}

}  // namespace

std::vector<RunResult> multi_run(const TrainConfig& config, const ModelSpec& spec,
                                 bool hierarchical, const ImageSet& train_set,
                                 const ImageSet* development, const ImageSet& test_set,
                                 const RunCallback& on_done) {
  config.validate();
  spec.validate();
  const auto runs = static_cast<std::size_t>(config.runs);
  std::vector<RunResult> results(runs);
  std::vector<std::exception_ptr> errors(runs);
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t r = next++; r < runs; r = next++) {
      const std::uint64_t seed = config.seed + r;
      try {
        Rng rng(seed);
        Network net(spec, hierarchical, rng);
        RunResult result;
        result.run = static_cast<int>(r);
        result.seed = seed;
        result.log = train(net, train_set, development, config, rng, static_cast<int>(r));
        result.test = predict(net, test_set);
        if (on_done) on_done(result, net);
        results[r] = std::move(result);
      } catch (...) {
        errors[r] = std::current_exception();
      }
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(config.workers, 1, runs);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  for (std::size_t r = 0; r < runs; ++r) {
    if (errors[r]) rethrow_with_context(errors[r], static_cast<int>(r), config.seed + r);
  }
  return results;
}

}  // namespace hvgg
