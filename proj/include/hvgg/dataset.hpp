#pragma once

// Manifest ingestion, patient-grouped splitting, batching and the synthetic
// hierarchical texture corpus.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hvgg/hierarchy.hpp"
#include "hvgg/tensor.hpp"

namespace hvgg {

struct ManifestRow {
  std::string patient_id;
  std::string wsi_id;
  std::string image_path;  // relative paths resolve against the manifest's directory
  std::size_t coarse = 0;
  std::size_t fine = 0;
};

struct Manifest {
  ClassHierarchy hierarchy;
  std::vector<ManifestRow> rows;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestRow& row) const;
};

/// Header: patient_id,wsi_id,image_path,coarse_label,fine_label (label names).
Manifest load_manifest(const std::filesystem::path& path, const ClassHierarchy& hierarchy);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest,
                   const std::vector<std::string>& comments = {});

enum class Split { train = 0, development = 1, test = 2 };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct SplitAssignment {
  std::map<std::string, Split> by_patient;

  Split of(const std::string& patient_id) const;  // throws DataError when unknown
  // WSI counts per split in train/development/test order.
  std::array<std::size_t, 3> wsi_counts(const Manifest& manifest) const;

  void save(const std::filesystem::path& path, const std::vector<std::string>& comments = {}) const;
  static SplitAssignment load(const std::filesystem::path& path);
};

/// Greedy deficit balancing: shuffle patients, then give each one to the split
/// whose WSI count lags its target the most (ties go to the earlier split).
SplitAssignment split_by_patient(const Manifest& manifest, std::array<double, 3> ratios, Rng& rng);

/// One grayscale example with its labels and provenance.
struct Sample {
  std::string patient_id;
  std::string wsi_id;
  std::size_t coarse = 0;
  std::size_t fine = 0;
  std::vector<std::uint8_t> pixels;  // row-major height x width
};

struct ImageSet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  // Throws DataError on pixel-count or label mismatches.
  void validate(const ClassHierarchy& hierarchy) const;
};

/// Throws DataError naming a patient that occurs in more than one set.
void audit_no_leakage(const ImageSet& train, const ImageSet& development, const ImageSet& test);

struct LabeledBatch {
  Tensor images;  // [N, 1, H, W], pixels scaled to [0, 1]
  std::vector<std::size_t> coarse_targets;
  std::vector<std::size_t> fine_targets;
};

LabeledBatch gather_batch(const ImageSet& set, std::span<const std::size_t> indices);

/// Seeded shuffle into full groups of `batch_size`; the incomplete remainder
/// is dropped for the epoch. A set smaller than one batch forms a single batch
/// when it holds at least the two examples batch normalization needs.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                    Rng& rng);
std::vector<LabeledBatch> make_batches(const ImageSet& set, std::size_t batch_size, Rng& rng);

struct SyntheticSpec {
  ClassHierarchy hierarchy = ClassHierarchy::gastrointestinal();
  std::size_t image_size = 32;
  std::size_t samples_per_class = 50;
  double noise = 0.1;           // standard deviation of additive Gaussian noise
  double base_amplitude = 0.2;  // family grating
  double fine_amplitude = 0.1;
  bool phase_jitter = true;     // random phase of the fine pattern per image
  std::size_t max_per_patient = 3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticCorpus {
  ImageSet images;
  Manifest manifest;  // image_path = images/<wsi_id>.png
};

/// Texture value in [0, 1] at pixel (x, y): a family stripe orientation plus a
/// child-specific perpendicular grating.
double synthetic_intensity(const SyntheticSpec& spec, std::size_t coarse, std::size_t child,
                           double phase, std::size_t x, std::size_t y, std::size_t size);

/// Draws one image of the given fine class from the generator stream.
std::vector<std::uint8_t> render_synthetic(const SyntheticSpec& spec, std::size_t fine,
                                           std::size_t size, Rng& rng);

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

/// Subset of `set` whose patients are assigned to `split`.
ImageSet select_split(const ImageSet& set, const SplitAssignment& assignment, Split split);

}  // namespace hvgg
