#pragma once

// Weighted multi-level cross-entropy, the epoch schedules, RMSprop and the
// repeated-run training protocol.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hvgg/dataset.hpp"
#include "hvgg/metrics.hpp"
#include "hvgg/model.hpp"
#include "hvgg/tensor.hpp"

namespace hvgg {

struct LossWeightSchedule {
  struct Anchor {
    int epoch = 1;
    std::vector<double> weights;
    bool operator==(const Anchor&) const = default;
  };
  std::vector<Anchor> anchors;

  /// (1,[0.98,0.02]) (5,[0.30,0.70]) (10,[0.10,0.90]) (15,[0.00,1.00])
  static LossWeightSchedule coarse_to_fine();
  /// Degenerate single-level schedule used for flat networks.
  static LossWeightSchedule single_level();

  /// "1:0.98,0.02;5:0.3,0.7"
  static LossWeightSchedule parse(const std::string& text);
  std::string to_string() const;

  std::size_t levels() const { return anchors.empty() ? 0 : anchors.front().weights.size(); }
  // Throws std::invalid_argument naming the violated invariant.
  void validate() const;
  bool operator==(const LossWeightSchedule&) const = default;
};

struct LrSchedule {
  struct Anchor {
    int epoch = 1;
    double rate = 0.0;
    bool operator==(const Anchor&) const = default;
  };
  std::vector<Anchor> anchors;

  /// (1,1e-3) (11,5e-4) (16,1e-4)
  static LrSchedule step_decay();
  /// "1:1e-3;11:5e-4"
  static LrSchedule parse(const std::string& text);
  std::string to_string() const;
  void validate() const;
  bool operator==(const LrSchedule&) const = default;
};

/// Weights of the latest anchor at or before `epoch` (1-based).
const std::vector<double>& weights_at(const LossWeightSchedule& schedule, int epoch);
double lr_at(const LrSchedule& schedule, int epoch);

/// sum_k w_k * mean-over-batch cross-entropy of head k. Heads with zero weight
/// are left out of the graph, so their parameters receive exactly zero gradient.
Tensor hierarchical_loss(Tape& tape, std::span<const Tensor> heads,
                         std::span<const std::vector<std::size_t>> targets,
                         std::span<const double> weights);

/// RMSprop without momentum:
///   acc <- rho * acc + (1 - rho) * g^2
///   theta <- theta - lr * g / (sqrt(acc) + eps)
class RmsProp {
 public:
  explicit RmsProp(std::vector<NamedTensor> params, double rho = 0.9, double eps = 1e-8);

  // Throws NumericError naming the first parameter with a non-finite gradient;
  // no parameter is modified in that case.
  void step(double lr);

  const std::vector<NamedTensor>& params() const { return params_; }
  std::span<const double> accumulator(std::size_t i) const { return acc_.at(i); }

 private:
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> acc_;
  double rho_;
  double eps_;
};

struct TrainConfig {
  int epochs = 20;
  int runs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  LossWeightSchedule loss_weights = LossWeightSchedule::coarse_to_fine();
  LrSchedule lr = LrSchedule::step_decay();
  Preset preset = Preset::desk;
  // Runs executed concurrently by multi_run; results do not depend on it.
  std::size_t workers = 1;

  void validate() const;
};

struct EpochLog {
  int run = 0;
  int epoch = 0;
  double lr = 0.0;
  std::vector<double> loss_weights;
  double train_loss = 0.0;
  std::optional<double> dev_coarse_acc;
  std::optional<double> dev_fine_acc;

  nlohmann::json to_json() const;
};

/// Trains in place. `development` may be null; it is only monitored.
std::vector<EpochLog> train(Network& network, const ImageSet& train_set,
                            const ImageSet* development, const TrainConfig& config, Rng& rng,
                            int run_index = 0);

/// Inference-mode predictions. Flat networks report lifted fine probabilities
/// at the coarse level.
PredictionBundle predict(Network& network, const ImageSet& set, std::size_t batch_size = 64);

struct RunResult {
  int run = 0;
  std::uint64_t seed = 0;
  std::vector<EpochLog> log;
  PredictionBundle test;
};

/// Called from the worker that finished the run, before its network is freed.
using RunCallback = std::function<void(const RunResult&, Network&)>;

/// Independent train+evaluate cycles with seeds seed+0 ... seed+runs-1. Each
/// run seeds one generator that initializes the network, then drives shuffling
/// and dropout. Results come back in run order.
std::vector<RunResult> multi_run(const TrainConfig& config, const ModelSpec& spec,
                                 bool hierarchical, const ImageSet& train_set,
                                 const ImageSet* development, const ImageSet& test_set,
                                 const RunCallback& on_done = {});

}  // namespace hvgg
