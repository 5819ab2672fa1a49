#pragma once

// Stage commands wiring the modules into file-based runs, and the flat
// key=value run configuration that drives them.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hvgg/dataset.hpp"
#include "hvgg/hierarchy.hpp"
#include "hvgg/metrics.hpp"
#include "hvgg/model.hpp"
#include "hvgg/preprocess.hpp"
#include "hvgg/training.hpp"

namespace hvgg {

struct RunConfig {
  // Relative paths resolve against this directory (the config file's).
  std::filesystem::path base_dir = ".";
  std::string manifest = "out/synth/manifest.csv";
  std::string output_dir = "out";
  ClassHierarchy hierarchy = ClassHierarchy::gastrointestinal();

  // synthetic slides
  std::size_t synth_samples = 50;  // slides per fine class
  std::size_t synth_tile = 64;
  double synth_noise = 0.1;
  double synth_base_amplitude = 0.2;
  double synth_fine_amplitude = 0.1;
  std::size_t synth_max_per_patient = 3;

  // patching
  std::size_t window = 64;
  std::size_t patch_size = 32;
  std::size_t stride = 0;  // 0 = window
  std::map<std::string, std::size_t> class_strides;  // fine class name -> stride
  std::size_t patch_budget = 0;                      // 0 = off

  // filtering
  CaeConfig cae;

  // stain normalization
  StainFitOptions stain;
  std::string reference;  // empty: first kept patch in index order
  std::size_t normalize_samples = 3;

  std::array<double, 3> split_ratios{0.5, 0.2, 0.3};

  TrainConfig train;
  std::optional<std::size_t> branch_attach;
  std::optional<std::vector<std::size_t>> branch_widths;
  CiMethod ci = CiMethod::normal;

  /// Throws UsageError on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// Every key with its current value, one "key = value" per line, sorted.
  std::string render() const;
  /// FNV-1a digest of render(), excluding keys that cannot change results.
  std::string hash() const;

  void validate() const;

  std::filesystem::path resolve(const std::string& path) const;
  std::filesystem::path stage_dir(const std::string& stage) const;
  /// Per-purpose seed derived from the root seed and a stage name.
  std::uint64_t subseed(std::string_view name) const;
  ModelSpec model_spec() const;
  std::size_t stride_for(const std::string& fine_class) const;

  /// '#' starts a comment; blank lines are ignored.
  static RunConfig parse(std::istream& in, const std::filesystem::path& base_dir = ".");
  static RunConfig load(const std::filesystem::path& path);
};

struct ConfigKey {
  std::string name;
  std::string doc;
};
/// Documented keys in render order (per-class strides are "patch.stride.<fine class>").
const std::vector<ConfigKey>& config_keys();

// ---- synthetic slides -------------------------------------------------------

struct SyntheticSlide {
  Image rgb;
  std::size_t blank_tile = 0;  // row-major index in the 2x2 grid
};

/// 2x2 grid of tiles: three stained textures of the class and one blank
/// background tile, under a per-slide perturbation of the stain vectors.
SyntheticSlide render_slide(const SyntheticSpec& spec, std::size_t fine, std::size_t tile,
                            Rng& rng);

// ---- patch index --------------------------------------------------------------

struct PatchEntry {
  std::string patch_path;  // relative to the index directory
  std::string wsi_id;
  std::string patient_id;
  std::string coarse_label;
  std::string fine_label;
  bool kept = true;
  std::size_t x = 0;
  std::size_t y = 0;
};

struct PatchIndex {
  std::string config_hash;
  std::vector<PatchEntry> entries;

  void save(const std::filesystem::path& path, const std::vector<std::string>& extra = {}) const;
  static PatchIndex load(const std::filesystem::path& path);
};

// ---- stage commands -----------------------------------------------------------

void cmd_synth(const RunConfig& config, std::ostream& out,
               std::optional<std::size_t> samples = std::nullopt);
void cmd_patch(const RunConfig& config, std::ostream& out);
void cmd_filter(const RunConfig& config, std::ostream& out);
void cmd_normalize(const RunConfig& config, std::ostream& out,
                   std::optional<std::size_t> samples = std::nullopt);
void cmd_train(const RunConfig& config, bool hierarchical, std::ostream& out);
ComparisonReport cmd_evaluate(const RunConfig& config, std::ostream& out);

/// Normalized patches joined with their manifest rows, ready for training.
ImageSet load_normalized(const RunConfig& config);

}  // namespace hvgg
