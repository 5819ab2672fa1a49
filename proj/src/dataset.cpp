#include "hvgg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <set>
#include <stdexcept>

#include "hvgg/csv.hpp"
#include "hvgg/error.hpp"

namespace hvgg {

std::filesystem::path Manifest::resolve(const ManifestRow& row) const {
  std::filesystem::path p(row.image_path);
  return p.is_absolute() ? p : base_dir / p;
}

Manifest load_manifest(const std::filesystem::path& path, const ClassHierarchy& hierarchy) {
  const auto table = csv::read_file(path);
  if (table.header.empty()) throw DataError(path.string() + ": manifest is empty");
  const std::size_t c_patient = table.column("patient_id");
  const std::size_t c_wsi = table.column("wsi_id");
  const std::size_t c_path = table.column("image_path");
  const std::size_t c_coarse = table.column("coarse_label");
  const std::size_t c_fine = table.column("fine_label");
  if (table.rows.empty()) throw DataError(path.string() + ": manifest has no rows");

  Manifest m;
  m.hierarchy = hierarchy;
  m.base_dir = path.parent_path();
  std::set<std::string> seen;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& r = table.rows[i];
    // +2: one for the header, one for 1-based numbering.
    const std::string where = path.string() + " row " + std::to_string(i + 2) + ": ";
    ManifestRow row;
    row.patient_id = r[c_patient];
    row.wsi_id = r[c_wsi];
    row.image_path = r[c_path];
    if (row.patient_id.empty() || row.wsi_id.empty() || row.image_path.empty()) {
      throw DataError(where + "empty patient_id, wsi_id or image_path");
    }
    const auto coarse = hierarchy.coarse_index(r[c_coarse]);
    const auto fine = hierarchy.fine_index(r[c_fine]);
    if (!coarse) throw DataError(where + "unknown coarse label '" + r[c_coarse] + "'");
    if (!fine) throw DataError(where + "unknown fine label '" + r[c_fine] + "'");
    if (hierarchy.parent[*fine] != *coarse) {
      throw DataError(where + "fine label '" + r[c_fine] + "' belongs to '" +
                      hierarchy.coarse_names[hierarchy.parent[*fine]] + "', not '" + r[c_coarse] +
                      "'");
    }
    if (!seen.insert(row.wsi_id).second) {
      throw DataError(where + "duplicate wsi_id '" + row.wsi_id + "'");
    }
    row.coarse = *coarse;
    row.fine = *fine;
    m.rows.push_back(std::move(row));
  }
  return m;
}

void save_manifest(const std::filesystem::path& path, const Manifest& manifest,
                   const std::vector<std::string>& comments) {
  std::vector<csv::Row> rows;
  for (const auto& r : manifest.rows) {
    rows.push_back({r.patient_id, r.wsi_id, r.image_path, manifest.hierarchy.coarse_names[r.coarse],
                    manifest.hierarchy.fine_names[r.fine]});
  }
  csv::write_file(path, {"patient_id", "wsi_id", "image_path", "coarse_label", "fine_label"}, rows,
                  comments);
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::development: return "development";
    case Split::test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "development" || name == "dev") return Split::development;
  if (name == "test") return Split::test;
  throw DataError("unknown split '" + name + "'");
}

Split SplitAssignment::of(const std::string& patient_id) const {
  const auto it = by_patient.find(patient_id);
  if (it == by_patient.end()) throw DataError("patient '" + patient_id + "' has no split");
  return it->second;
}

std::array<std::size_t, 3> SplitAssignment::wsi_counts(const Manifest& manifest) const {
  std::array<std::size_t, 3> n{};
  for (const auto& r : manifest.rows) ++n[static_cast<std::size_t>(of(r.patient_id))];
  return n;
}

void SplitAssignment::save(const std::filesystem::path& path,
                           const std::vector<std::string>& comments) const {
  std::vector<csv::Row> rows;
  for (const auto& [patient, split] : by_patient) rows.push_back({patient, to_string(split)});
  csv::write_file(path, {"patient_id", "split"}, rows, comments);
}

SplitAssignment SplitAssignment::load(const std::filesystem::path& path) {
  const auto table = csv::read_file(path);
  const auto cp = table.column("patient_id");
  const auto cs = table.column("split");
  SplitAssignment a;
  for (const auto& r : table.rows) {
    if (!a.by_patient.emplace(r[cp], split_from_string(r[cs])).second) {
      throw DataError(path.string() + ": patient '" + r[cp] + "' listed twice");
    }
  }
  return a;
}

SplitAssignment split_by_patient(const Manifest& manifest, std::array<double, 3> ratios, Rng& rng) {
  for (double r : ratios) {
    if (!(r >= 0.0)) throw std::invalid_argument("split ratios must be non-negative");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must sum to 1");
  }
  // Patients in first-appearance order, so the shuffle input is deterministic.
  std::vector<std::string> patients;
  std::map<std::string, std::size_t> wsis;
  for (const auto& r : manifest.rows) {
    if (wsis[r.patient_id]++ == 0) patients.push_back(r.patient_id);
  }
  if (patients.size() < 3) {
    throw DataError("splitting needs at least 3 patients, manifest has " +
                    std::to_string(patients.size()));
  }
  std::shuffle(patients.begin(), patients.end(), rng);

  const double total = static_cast<double>(manifest.rows.size());
  std::array<double, 3> assigned{};
  SplitAssignment a;
  for (const auto& p : patients) {
    std::size_t best = 0;
    double best_deficit = -1e300;
    for (std::size_t s = 0; s < 3; ++s) {
      const double deficit = ratios[s] * total - assigned[s];
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = s;
      }
    }
    assigned[best] += static_cast<double>(wsis[p]);
    a.by_patient[p] = static_cast<Split>(best);
  }
  return a;
}

void ImageSet::validate(const ClassHierarchy& hierarchy) const {
  for (const auto& s : samples) {
    if (s.pixels.size() != height * width) {
      throw DataError("sample " + s.wsi_id + " has " + std::to_string(s.pixels.size()) +
                      " pixels, expected " + std::to_string(height * width));
    }
    if (s.fine >= hierarchy.fine_count() || hierarchy.parent[s.fine] != s.coarse) {
      throw DataError("sample " + s.wsi_id + " has labels inconsistent with the hierarchy");
    }
  }
}

void audit_no_leakage(const ImageSet& train, const ImageSet& development, const ImageSet& test) {
  std::map<std::string, int> owner;
  const ImageSet* sets[] = {&train, &development, &test};
  for (int i = 0; i < 3; ++i) {
    for (const auto& s : sets[i]->samples) {
      const auto [it, fresh] = owner.emplace(s.patient_id, i);
      if (!fresh && it->second != i) {
        throw DataError("patient '" + s.patient_id + "' appears in both " +
                        to_string(static_cast<Split>(it->second)) + " and " +
                        to_string(static_cast<Split>(i)));
      }
    }
  }
}

LabeledBatch gather_batch(const ImageSet& set, std::span<const std::size_t> indices) {
  const std::size_t hw = set.height * set.width;
  LabeledBatch b;
  b.images = Tensor({indices.size(), 1, set.height, set.width});
  auto out = b.images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = set.samples.at(indices[i]);
    for (std::size_t p = 0; p < hw; ++p) out[i * hw + p] = Real(s.pixels[p]) / Real(255);
    b.coarse_targets.push_back(s.coarse);
    b.fine_targets.push_back(s.fine);
  }
  return b;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                    Rng& rng) {
  if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2");
  if (count == 0) throw DataError("cannot batch an empty record set");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  if (count < batch_size) {
    if (count >= 2) batches.push_back(order);
    return batches;
  }
  for (std::size_t start = 0; start + batch_size <= count; start += batch_size) {
    batches.emplace_back(order.begin() + start, order.begin() + start + batch_size);
  }
  return batches;
}

std::vector<LabeledBatch> make_batches(const ImageSet& set, std::size_t batch_size, Rng& rng) {
  std::vector<LabeledBatch> out;
  for (const auto& idx : batch_indices(set.size(), batch_size, rng)) {
    out.push_back(gather_batch(set, idx));
  }
  return out;
}

void SyntheticSpec::validate() const {
  hierarchy.validate();
  if (image_size < 4) throw std::invalid_argument("synthetic image_size must be at least 4");
  if (samples_per_class == 0) throw std::invalid_argument("samples_per_class must be positive");
  if (max_per_patient == 0) throw std::invalid_argument("max_per_patient must be positive");
  if (noise < 0.0) throw std::invalid_argument("synthetic noise must be non-negative");
}

double synthetic_intensity(const SyntheticSpec& spec, std::size_t coarse, std::size_t child,
                           double phase, std::size_t x, std::size_t y, std::size_t size) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double families = static_cast<double>(spec.hierarchy.coarse_count());
  const auto kids = spec.hierarchy.children(coarse).size();
  const double theta = std::numbers::pi * static_cast<double>(coarse) / families;
  const double phi = theta + std::numbers::pi / 2;
  // Child gratings spread evenly between 3 and 10 cycles per image.
  const double freq = kids > 1 ? 3.0 + 7.0 * static_cast<double>(child) / double(kids - 1) : 3.0;
  const double u = static_cast<double>(x) / static_cast<double>(size);
  const double v = static_cast<double>(y) / static_cast<double>(size);
  const double base = spec.base_amplitude * std::cos(two_pi * 2.0 * (u * std::cos(theta) + v * std::sin(theta)));
  const double fine =
      spec.fine_amplitude * std::cos(two_pi * freq * (u * std::cos(phi) + v * std::sin(phi)) + phase);
  return 0.5 + base + fine;
}

std::vector<std::uint8_t> render_synthetic(const SyntheticSpec& spec, std::size_t fine,
                                           std::size_t size, Rng& rng) {
  const std::size_t coarse = spec.hierarchy.parent.at(fine);
  const auto kids = spec.hierarchy.children(coarse);
  const std::size_t child =
      static_cast<std::size_t>(std::find(kids.begin(), kids.end(), fine) - kids.begin());
  double phase = 0.0;
  if (spec.phase_jitter) {
    phase = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<std::uint8_t> pixels(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double value = synthetic_intensity(spec, coarse, child, phase, x, y, size);
      if (spec.noise > 0.0) value += spec.noise * noise(rng);
      value = std::clamp(value, 0.0, 1.0);
      pixels[y * size + x] = static_cast<std::uint8_t>(std::lround(value * 255.0));
    }
  }
  return pixels;
}

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticCorpus corpus;
  corpus.images.height = corpus.images.width = spec.image_size;
  corpus.manifest.hierarchy = spec.hierarchy;
  std::uniform_int_distribution<std::size_t> group(1, spec.max_per_patient);
  std::size_t patient_counter = 0, wsi_counter = 0;
  char buf[32];
  for (std::size_t fine = 0; fine < spec.hierarchy.fine_count(); ++fine) {
    std::size_t left_for_patient = 0;
    std::string patient;
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      if (left_for_patient == 0) {
        left_for_patient = group(rng);
        std::snprintf(buf, sizeof buf, "P%04zu", ++patient_counter);
        patient = buf;
      }
      --left_for_patient;
      std::snprintf(buf, sizeof buf, "S%05zu", ++wsi_counter);
      Sample s;
      s.patient_id = patient;
      s.wsi_id = buf;
      s.fine = fine;
      s.coarse = spec.hierarchy.parent[fine];
      s.pixels = render_synthetic(spec, fine, spec.image_size, rng);
      corpus.manifest.rows.push_back(
          {s.patient_id, s.wsi_id, "images/" + s.wsi_id + ".png", s.coarse, s.fine});
      corpus.images.samples.push_back(std::move(s));
    }
  }
  return corpus;
}

ImageSet select_split(const ImageSet& set, const SplitAssignment& assignment, Split split) {
  ImageSet out;
  out.height = set.height;
  out.width = set.width;
  for (const auto& s : set.samples) {
    if (assignment.of(s.patient_id) == split) out.samples.push_back(s);
  }
  return out;
}

}  // namespace hvgg
