#pragma once

// VGG-style networks: the flat VGG16 baseline and the branched variant that
// adds a fully-connected coarse-category head to an intermediate block.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hvgg/hierarchy.hpp"
#include "hvgg/tensor.hpp"

namespace hvgg {

enum class Preset { full, desk };

std::string to_string(Preset preset);
Preset preset_from_string(const std::string& name);

struct ConvBlockSpec {
  std::size_t convs = 0;
  std::size_t filters = 0;
  bool operator==(const ConvBlockSpec&) const = default;
};

struct ModelSpec {
  std::size_t channels = 1;
  std::size_t height = 224;
  std::size_t width = 224;
  std::vector<ConvBlockSpec> blocks;
  // 1-based block index after whose pool the coarse branch taps.
  std::size_t branch_attach = 3;
  std::vector<std::size_t> branch_widths;
  std::vector<std::size_t> head_widths;
  ClassHierarchy hierarchy = ClassHierarchy::gastrointestinal();
  Preset preset = Preset::full;
  double dropout = 0.5;

  /// VGG16: 13 conv layers in 5 blocks, two 4096-wide hidden layers, 224x224 input.
  static ModelSpec full();
  /// Same layer ordering at CI scale: 32x32 input, 3 single-conv blocks, thin heads.
  static ModelSpec desk();
  static ModelSpec for_preset(Preset preset);

  // Throws std::invalid_argument listing the violated invariant.
  void validate() const;

  // Spatial extent of the feature map after `blocks_done` blocks.
  std::size_t extent_after(std::size_t blocks_done) const;

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
  std::string hash() const;

  bool operator==(const ModelSpec&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct NamedBuffer {
  std::string name;
  std::vector<Real>* values;
};

class Network {
 public:
  struct Output {
    Tensor coarse;  // undefined for flat networks
    Tensor fine;
  };

  Network(ModelSpec spec, bool hierarchical, Rng& rng);
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  const ModelSpec& spec() const { return spec_; }
  bool hierarchical() const { return coarse_head_.has_value(); }

  /// Logits for both heads (flat networks leave `coarse` undefined).
  Output forward(Tape& tape, const Tensor& images, Mode mode, Rng& rng);

  std::vector<NamedTensor> parameters();
  std::vector<NamedTensor> branch_parameters();
  std::vector<NamedBuffer> buffers();

  // Conv plus fully-connected layers, output layers included.
  std::size_t trainable_layer_count() const;
  std::size_t parameter_count();

  void zero_grad();

 private:
  struct ConvUnit {
    Tensor kernel;
    Tensor bias;
    BatchNormState bn;
  };
  struct DenseUnit {
    Tensor weight;  // [in, out]
    Tensor bias;
    BatchNormState bn;
  };
  struct Head {
    std::vector<DenseUnit> hidden;
    Tensor out_weight;
    Tensor out_bias;
  };

  static Head make_head(std::size_t in, const std::vector<std::size_t>& widths, std::size_t out,
                        Rng& rng);
  Tensor run_head(Tape& tape, Head& head, const Tensor& features, Mode mode, Rng& rng);
  static void collect(Head& head, const std::string& prefix, std::vector<NamedTensor>& out);

  ModelSpec spec_;
  std::vector<std::vector<ConvUnit>> blocks_;
  Head fine_head_;
  std::optional<Head> coarse_head_;
};

Network build_flat(const ModelSpec& spec, Rng& rng);
Network build_hierarchical(const ModelSpec& spec, Rng& rng);

/// Parent category of a fine class.
std::size_t lift_to_coarse(std::size_t fine_index, const ClassHierarchy& hierarchy);
/// Sums child probabilities per coarse category.
std::vector<double> lift_to_coarse(std::span<const double> fine_probs,
                                   const ClassHierarchy& hierarchy);

struct CheckpointInfo {
  ModelSpec spec;
  bool hierarchical = false;
  std::string config_hash;
};

// Binary container: a magic line, a JSON header (spec, spec hash, tensor names
// and shapes) and little-endian float64 payloads in header order.
void save_checkpoint(const std::filesystem::path& path, Network& network,
                     const std::string& config_hash = {});
std::pair<Network, CheckpointInfo> load_checkpoint(const std::filesystem::path& path);
// Rejects checkpoints whose spec hash differs from `expected`.
std::pair<Network, CheckpointInfo> load_checkpoint(const std::filesystem::path& path,
                                                   const ModelSpec& expected);

}  // namespace hvgg
