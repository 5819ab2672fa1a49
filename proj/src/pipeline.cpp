#include "hvgg/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>

#include "hvgg/csv.hpp"
#include "hvgg/error.hpp"
#include "hvgg/hash.hpp"
#include "hvgg/log.hpp"

namespace hvgg {

namespace fs = std::filesystem;

// ---- value parsing ------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw UsageError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw UsageError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  std::string name;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  bool affects_results = true;
};

#define SIZE_FIELD(key, member, doc)                                                  \
  Field {                                                                             \
    key, doc, [](const RunConfig& c) { return std::to_string(c.member); },            \
        [](RunConfig& c, const std::string& v) { c.member = to_size(key, v); }        \
  }
#define REAL_FIELD(key, member, doc)                                                  \
  Field {                                                                             \
    key, doc, [](const RunConfig& c) { return fmt(c.member); },                       \
        [](RunConfig& c, const std::string& v) { c.member = to_double(key, v); }      \
  }
#define TEXT_FIELD(key, member, doc)                                                  \
  Field {                                                                             \
    key, doc, [](const RunConfig& c) { return c.member; },                            \
        [](RunConfig& c, const std::string& v) { c.member = v; }                      \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f{
        TEXT_FIELD("manifest", manifest, "slide manifest CSV (written by synth, read by patch)"),
        TEXT_FIELD("output_dir", output_dir, "root of the per-stage output directories"),
        Field{"hierarchy", "class tree as Coarse:fine|fine;Coarse:fine|...",
              [](const RunConfig& c) { return c.hierarchy.to_string(); },
              [](RunConfig& c, const std::string& v) {
                try {
                  c.hierarchy = ClassHierarchy::parse(v);
                } catch (const std::exception& e) {
                  throw UsageError(std::string("config key 'hierarchy': ") + e.what());
                }
              }},
        SIZE_FIELD("synth.samples", synth_samples, "synthetic slides per fine class"),
        SIZE_FIELD("synth.tile", synth_tile, "side of one synthetic slide tile (slides are 2x2 tiles)"),
        REAL_FIELD("synth.noise", synth_noise, "std. dev. of additive texture noise"),
        REAL_FIELD("synth.base_amplitude", synth_base_amplitude, "amplitude of the family grating"),
        REAL_FIELD("synth.fine_amplitude", synth_fine_amplitude, "amplitude of the child grating"),
        SIZE_FIELD("synth.max_per_patient", synth_max_per_patient, "max slides per synthetic patient"),
        SIZE_FIELD("patch.window", window, "sliding-window side in source pixels"),
        SIZE_FIELD("patch.size", patch_size, "side of the resized patch (= model input)"),
        SIZE_FIELD("patch.stride", stride, "default stride; 0 means stride = window"),
        SIZE_FIELD("patch.budget", patch_budget,
                   "per-class patch target: halve a class's stride until met; 0 = off"),
        SIZE_FIELD("cae.input", cae.input, "auto-encoder input side (patches are resized to it)"),
        SIZE_FIELD("cae.embedding", cae.embedding, "auto-encoder embedding dimension"),
        SIZE_FIELD("cae.epochs", cae.epochs, "auto-encoder training epochs"),
        SIZE_FIELD("cae.batch_size", cae.batch_size, "auto-encoder batch size"),
        REAL_FIELD("cae.lr", cae.lr, "auto-encoder RMSprop learning rate"),
        REAL_FIELD("cae.holdout", cae.holdout, "fraction of patches held out for the error report"),
        REAL_FIELD("stain.lambda", stain.lambda, "sparsity weight of the stain factorization"),
        REAL_FIELD("stain.beta", stain.beta, "OD threshold separating tissue from background"),
        SIZE_FIELD("stain.iterations", stain.iterations, "factorization iterations"),
        SIZE_FIELD("stain.min_tissue", stain.min_tissue, "minimum tissue pixels for a fit"),
        SIZE_FIELD("stain.max_pixels", stain.max_pixels, "tissue pixels sampled per fit; 0 = all"),
        TEXT_FIELD("stain.reference", reference,
                   "reference patch PNG for the target stains; empty = first kept patch"),
        SIZE_FIELD("normalize.samples", normalize_samples, "before/after triplets to emit"),
        Field{"split.ratios", "train,development,test WSI fractions",
              [](const RunConfig& c) {
                return fmt(c.split_ratios[0]) + "," + fmt(c.split_ratios[1]) + "," +
                       fmt(c.split_ratios[2]);
              },
              [](RunConfig& c, const std::string& v) {
                auto parts = split(v, ',');
                if (parts.size() != 3) throw UsageError("config key 'split.ratios': need 3 values");
                for (int i = 0; i < 3; ++i) c.split_ratios[i] = to_double("split.ratios", parts[i]);
              }},
        Field{"seed", "root seed; every stage derives a named sub-seed from it",
              [](const RunConfig& c) { return std::to_string(c.train.seed); },
              [](RunConfig& c, const std::string& v) { c.train.seed = to_size("seed", v); }},
        Field{"train.epochs", "epochs per run",
              [](const RunConfig& c) { return std::to_string(c.train.epochs); },
              [](RunConfig& c, const std::string& v) {
                c.train.epochs = static_cast<int>(to_size("train.epochs", v));
              }},
        Field{"train.runs", "independent runs per model family",
              [](const RunConfig& c) { return std::to_string(c.train.runs); },
              [](RunConfig& c, const std::string& v) {
                c.train.runs = static_cast<int>(to_size("train.runs", v));
              }},
        SIZE_FIELD("train.batch_size", train.batch_size, "training batch size"),
        Field{"train.loss_weights", "epoch:coarse,fine anchors separated by ';'",
              [](const RunConfig& c) { return c.train.loss_weights.to_string(); },
              [](RunConfig& c, const std::string& v) {
                try {
                  c.train.loss_weights = LossWeightSchedule::parse(v);
                } catch (const std::exception& e) {
                  throw UsageError(std::string("config key 'train.loss_weights': ") + e.what());
                }
              }},
        Field{"train.lr", "epoch:rate anchors separated by ';'",
              [](const RunConfig& c) { return c.train.lr.to_string(); },
              [](RunConfig& c, const std::string& v) {
                try {
                  c.train.lr = LrSchedule::parse(v);
                } catch (const std::exception& e) {
                  throw UsageError(std::string("config key 'train.lr': ") + e.what());
                }
              }},
        Field{"train.workers", "runs trained concurrently (does not change results)",
              [](const RunConfig& c) { return std::to_string(c.train.workers); },
              [](RunConfig& c, const std::string& v) {
                c.train.workers = to_size("train.workers", v);
              },
              false},
        Field{"model.preset", "desk or full",
              [](const RunConfig& c) { return to_string(c.train.preset); },
              [](RunConfig& c, const std::string& v) {
                try {
                  c.train.preset = preset_from_string(v);
                } catch (const std::exception& e) {
                  throw UsageError(std::string("config key 'model.preset': ") + e.what());
                }
              }},
        Field{"model.branch_attach", "block after which the coarse branch taps; 'preset' = default",
              [](const RunConfig& c) {
                return c.branch_attach ? std::to_string(*c.branch_attach) : std::string("preset");
              },
              [](RunConfig& c, const std::string& v) {
                if (v == "preset") {
                  c.branch_attach.reset();
                } else {
                  c.branch_attach = to_size("model.branch_attach", v);
                }
              }},
        Field{"model.branch_widths", "hidden widths of the coarse branch; 'preset' = default",
              [](const RunConfig& c) {
                return c.branch_widths ? fmt_sizes(*c.branch_widths) : std::string("preset");
              },
              [](RunConfig& c, const std::string& v) {
                if (v == "preset") {
                  c.branch_widths.reset();
                  return;
                }
                std::vector<std::size_t> w;
                for (const auto& p : split(v, ',')) w.push_back(to_size("model.branch_widths", p));
                c.branch_widths = w;
              }},
        Field{"evaluate.ci", "normal or student_t confidence half-widths",
              [](const RunConfig& c) {
                return std::string(c.ci == CiMethod::normal ? "normal" : "student_t");
              },
              [](RunConfig& c, const std::string& v) {
                if (v == "normal") {
                  c.ci = CiMethod::normal;
                } else if (v == "student_t") {
                  c.ci = CiMethod::student_t;
                } else {
                  throw UsageError("config key 'evaluate.ci': expected normal or student_t");
                }
              }},
    };
    return f;
  }();
  return table;
}

#undef SIZE_FIELD
#undef REAL_FIELD
#undef TEXT_FIELD

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.name == key) return &f;
  }
  return nullptr;
}

constexpr std::string_view kStridePrefix = "patch.stride.";

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& f : fields()) k.push_back({f.name, f.doc});
    k.push_back({"patch.stride.<fine class>", "per-class stride overriding patch.stride"});
    return k;
  }();
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key.starts_with(kStridePrefix)) {
    class_strides[key.substr(kStridePrefix.size())] = to_size(key, value);
    return;
  }
  const Field* f = find_field(key);
  if (!f) throw UsageError("unknown config key '" + key + "'");
  f->set(*this, value);
}

std::string RunConfig::get(const std::string& key) const {
  if (key.starts_with(kStridePrefix)) {
    auto it = class_strides.find(key.substr(kStridePrefix.size()));
    if (it == class_strides.end()) throw UsageError("no per-class stride for '" + key + "'");
    return std::to_string(it->second);
  }
  const Field* f = find_field(key);
  if (!f) throw UsageError("unknown config key '" + key + "'");
  return f->get(*this);
}

namespace {

std::vector<std::pair<std::string, std::string>> entries(const RunConfig& c, bool results_only) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) {
    if (results_only && !f.affects_results) continue;
    out.emplace_back(f.name, f.get(c));
  }
  for (const auto& [cls, s] : c.class_strides) {
    out.emplace_back(std::string(kStridePrefix) + cls, std::to_string(s));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::string RunConfig::render() const {
  std::string out;
  for (const auto& [k, v] : entries(*this, false)) out += k + " = " + v + "\n";
  return out;
}

std::string RunConfig::hash() const {
  std::string text;
  for (const auto& [k, v] : entries(*this, true)) text += k + "=" + v + "\n";
  return hex_digest(text);
}

void RunConfig::validate() const {
  auto fail = [](const std::string& what) { throw UsageError("config: " + what); };
  try {
    hierarchy.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (train.loss_weights.levels() != 2) fail("train.loss_weights needs 2 levels (coarse, fine)");
  if (window == 0 || patch_size == 0) fail("patch.window and patch.size must be positive");
  if (synth_samples == 0 || synth_tile < 8) fail("synth.samples >= 1 and synth.tile >= 8 required");
  if (synth_max_per_patient == 0) fail("synth.max_per_patient must be positive");
  for (const auto& [cls, s] : class_strides) {
    if (!hierarchy.fine_index(cls)) fail("patch.stride." + cls + " names no fine class");
    if (s == 0) fail("patch.stride." + cls + " must be positive");
  }
  double total = split_ratios[0] + split_ratios[1] + split_ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || *std::min_element(split_ratios.begin(), split_ratios.end()) < 0) {
    fail("split.ratios must be non-negative and sum to 1");
  }
  if (cae.input < 8 || cae.input % 8 != 0) fail("cae.input must be a positive multiple of 8");
  if (cae.embedding < 2) fail("cae.embedding must be at least 2");
  if (cae.batch_size < 2) fail("cae.batch_size must be at least 2");
  if (cae.holdout <= 0 || cae.holdout >= 1) fail("cae.holdout must lie in (0, 1)");
  if (stain.iterations == 0) fail("stain.iterations must be positive");
  if (stain.lambda < 0 || stain.beta < 0) fail("stain.lambda and stain.beta must be non-negative");
  try {
    ModelSpec spec = model_spec();
    if (spec.height != patch_size) {
      fail("patch.size " + std::to_string(patch_size) + " differs from the " +
           to_string(train.preset) + " model input " + std::to_string(spec.height));
    }
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
}

fs::path RunConfig::resolve(const std::string& path) const {
  fs::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

fs::path RunConfig::stage_dir(const std::string& stage) const { return resolve(output_dir) / stage; }

std::uint64_t RunConfig::subseed(std::string_view name) const {
  return fnv1a(std::to_string(train.seed) + "/" + std::string(name));
}

ModelSpec RunConfig::model_spec() const {
  ModelSpec spec = ModelSpec::for_preset(train.preset);
  spec.hierarchy = hierarchy;
  if (branch_attach) spec.branch_attach = *branch_attach;
  if (branch_widths) spec.branch_widths = *branch_widths;
  spec.validate();
  return spec;
}

std::size_t RunConfig::stride_for(const std::string& fine_class) const {
  auto it = class_strides.find(fine_class);
  if (it != class_strides.end()) return it->second;
  return stride == 0 ? window : stride;
}

RunConfig RunConfig::parse(std::istream& in, const fs::path& base_dir) {
  RunConfig c;
  c.base_dir = base_dir;
  std::string line;
  std::size_t number = 0;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++number;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(number) + ": expected key = value");
    }
    std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!seen.insert(key).second) {
      throw UsageError("config line " + std::to_string(number) + ": duplicate key '" + key + "'");
    }
    try {
      c.set(key, value);
    } catch (const UsageError& e) {
      throw UsageError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  return parse(in, path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

// ---- synthetic slides -----------------------------------------------------------

namespace {

constexpr std::array<double, 3> kHematoxylin{0.65, 0.70, 0.29};
constexpr std::array<double, 3> kEosin{0.07, 0.99, 0.11};

std::array<double, 3> jitter_unit(const std::array<double, 3>& v, Rng& rng) {
  std::normal_distribution<double> n(0.0, 0.04);
  std::array<double, 3> out;
  double norm = 0;
  for (int c = 0; c < 3; ++c) {
    out[c] = std::max(0.01, v[c] + n(rng));
    norm += out[c] * out[c];
  }
  for (auto& x : out) x /= std::sqrt(norm);
  return out;
}

}  // namespace

SyntheticSlide render_slide(const SyntheticSpec& spec, std::size_t fine, std::size_t tile,
                            Rng& rng) {
  SyntheticSlide slide;
  slide.rgb = Image(2 * tile, 2 * tile, 3);
  slide.blank_tile = std::uniform_int_distribution<std::size_t>(0, 3)(rng);
  const auto h = jitter_unit(kHematoxylin, rng);
  const auto e = jitter_unit(kEosin, rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double strength = 0.85 + 0.3 * u(rng);
  // Eosin follows a slow field of its own so the two stains vary independently.
  const double fx = 0.5 + u(rng), fy = 0.5 + u(rng), psi = 2 * std::numbers::pi * u(rng);
  std::normal_distribution<double> bg(0.0, 2.0);
  for (std::size_t t = 0; t < 4; ++t) {
    const std::size_t ox = (t % 2) * tile, oy = (t / 2) * tile;
    if (t == slide.blank_tile) {
      for (std::size_t y = 0; y < tile; ++y) {
        for (std::size_t x = 0; x < tile; ++x) {
          for (std::size_t c = 0; c < 3; ++c) {
            slide.rgb.at(ox + x, oy + y, c) =
                static_cast<std::uint8_t>(255 - std::min(20L, std::lround(std::abs(bg(rng)))));
          }
        }
      }
      continue;
    }
    auto texture = render_synthetic(spec, fine, tile, rng);
    for (std::size_t y = 0; y < tile; ++y) {
      for (std::size_t x = 0; x < tile; ++x) {
        const double g = texture[y * tile + x] / 255.0;
        const double m = 0.5 + 0.5 * std::sin(2 * std::numbers::pi *
                                                  (fx * double(ox + x) + fy * double(oy + y)) /
                                                  double(2 * tile) + psi);
        const double ch = strength * (0.25 + 1.0 * (1.0 - g));
        const double ce = strength * (0.2 + 0.5 * m);
        for (std::size_t c = 0; c < 3; ++c) {
          slide.rgb.at(ox + x, oy + y, c) = od_to_rgb(h[c] * ch + e[c] * ce);
        }
      }
    }
  }
  return slide;
}

// ---- patch index --------------------------------------------------------------------

namespace {

const csv::Row kIndexHeader{"patch_path", "wsi_id", "patient_id", "coarse_label",
                            "fine_label", "kept",   "x",          "y"};

std::string hash_comment(const std::string& hash) { return " config_hash: " + hash; }

std::string read_hash(const std::vector<std::string>& comments) {
  for (const auto& c : comments) {
    auto t = trim(c);
    if (t.starts_with("config_hash:")) return trim(t.substr(12));
  }
  return {};
}

}  // namespace

void PatchIndex::save(const fs::path& path, const std::vector<std::string>& extra) const {
  std::vector<csv::Row> rows;
  for (const auto& e : entries) {
    rows.push_back({e.patch_path, e.wsi_id, e.patient_id, e.coarse_label, e.fine_label,
                    e.kept ? "1" : "0", std::to_string(e.x), std::to_string(e.y)});
  }
  std::vector<std::string> comments{hash_comment(config_hash)};
  for (const auto& x : extra) comments.push_back(" " + x);
  csv::write_file(path, kIndexHeader, rows, comments);
}

PatchIndex PatchIndex::load(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("patch index " + path.string() + " does not exist");
  auto t = csv::read_file(path);
  PatchIndex idx;
  idx.config_hash = read_hash(t.comments);
  std::vector<std::size_t> col;
  for (const auto& name : kIndexHeader) col.push_back(t.column(name));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    PatchEntry e{r[col[0]], r[col[1]], r[col[2]], r[col[3]], r[col[4]], r[col[5]] == "1"};
    try {
      e.x = to_size("x", r[col[6]]);
      e.y = to_size("y", r[col[7]]);
    } catch (const UsageError&) {
      throw DataError(path.string() + " row " + std::to_string(i + 2) + ": bad coordinates");
    }
    idx.entries.push_back(std::move(e));
  }
  return idx;
}

// ---- commands -----------------------------------------------------------------------

namespace {

// Per-class summary rows in the hierarchy's fine order.
void print_class_table(std::ostream& out, const ClassHierarchy& h,
                       const std::vector<std::string>& columns,
                       const std::vector<std::vector<std::size_t>>& counts) {
  out << std::left << std::setw(12) << "coarse" << std::setw(18) << "fine";
  for (const auto& c : columns) out << std::right << std::setw(12) << c;
  out << '\n';
  for (std::size_t f = 0; f < h.fine_count(); ++f) {
    out << std::left << std::setw(12) << h.coarse_names[h.parent[f]] << std::setw(18)
        << h.fine_names[f];
    for (std::size_t c = 0; c < columns.size(); ++c) out << std::right << std::setw(12) << counts[f][c];
    out << '\n';
  }
}

SyntheticSpec synthetic_spec(const RunConfig& c, std::optional<std::size_t> samples) {
  SyntheticSpec s;
  s.hierarchy = c.hierarchy;
  s.image_size = c.synth_tile;
  s.samples_per_class = samples.value_or(c.synth_samples);
  s.noise = c.synth_noise;
  s.base_amplitude = c.synth_base_amplitude;
  s.fine_amplitude = c.synth_fine_amplitude;
  s.max_per_patient = c.synth_max_per_patient;
  s.seed = c.subseed("synth");
  return s;
}

std::string patch_name(const std::string& wsi, std::size_t x, std::size_t y) {
  return wsi + "_" + std::to_string(x) + "_" + std::to_string(y) + ".png";
}

fs::path index_path(const RunConfig& c, const std::string& stage) {
  return c.stage_dir(stage) / "index.csv";
}

}  // namespace

void cmd_synth(const RunConfig& config, std::ostream& out, std::optional<std::size_t> samples) {
  if (samples && *samples == 0) throw UsageError("--samples must be positive");
  const auto spec = synthetic_spec(config, samples);
  auto corpus = generate_synthetic(spec);  // patients, ids and labels
  const fs::path manifest_path = config.resolve(config.manifest);
  const fs::path dir = manifest_path.parent_path();
  fs::create_directories(dir / "images");

  Rng rng(config.subseed("synth/slides"));
  std::vector<csv::Row> tiles;
  std::vector<std::vector<std::size_t>> counts(spec.hierarchy.fine_count(), {0});
  for (const auto& row : corpus.manifest.rows) {
    auto slide = render_slide(spec, row.fine, config.synth_tile, rng);
    write_png((dir / row.image_path).string(), slide.rgb);
    tiles.push_back({row.wsi_id, std::to_string((slide.blank_tile % 2) * config.synth_tile),
                     std::to_string((slide.blank_tile / 2) * config.synth_tile)});
    ++counts[row.fine][0];
  }
  corpus.manifest.base_dir = dir;
  save_manifest(manifest_path, corpus.manifest, {hash_comment(config.hash())});
  csv::write_file(dir / "blank_tiles.csv", {"wsi_id", "x", "y"}, tiles,
                  {hash_comment(config.hash())});
  out << "synthetic slides written to " << dir.string() << '\n';
  print_class_table(out, spec.hierarchy, {"WSIs"}, counts);
}

void cmd_patch(const RunConfig& config, std::ostream& out) {
  const auto manifest = load_manifest(config.resolve(config.manifest), config.hierarchy);
  const fs::path dir = config.stage_dir("patches");
  fs::create_directories(dir);
  const auto& h = config.hierarchy;

  // Read everything first so per-class budgets can see all image sizes.
  std::vector<std::optional<Image>> images;
  std::size_t failures = 0;
  for (const auto& row : manifest.rows) {
    try {
      auto img = read_png(manifest.resolve(row).string(), 3);
      if (img.width < config.window || img.height < config.window) {
        throw DataError("image " + row.wsi_id + " is smaller than the patch window");
      }
      images.emplace_back(std::move(img));
    } catch (const DataError& e) {
      log::warn(std::string(e.what()) + "; skipping " + row.wsi_id);
      images.emplace_back(std::nullopt);
      ++failures;
    }
  }
  if (failures == manifest.rows.size()) throw DataError("no manifest image could be read");

  std::vector<std::size_t> strides(h.fine_count());
  for (std::size_t f = 0; f < h.fine_count(); ++f) {
    strides[f] = config.stride_for(h.fine_names[f]);
    if (config.patch_budget > 0 && !config.class_strides.contains(h.fine_names[f])) {
      std::vector<std::array<std::size_t, 2>> sizes;
      for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
        if (manifest.rows[i].fine == f && images[i]) sizes.push_back({images[i]->width, images[i]->height});
      }
      if (!sizes.empty()) strides[f] = stride_for_budget(sizes, config.window, config.patch_budget);
    }
  }

  PatchIndex index;
  index.config_hash = config.hash();
  std::vector<std::vector<std::size_t>> counts(h.fine_count(), {0, 0});
  for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
    if (!images[i]) continue;
    const auto& row = manifest.rows[i];
    auto patches = extract_patches(*images[i], config.window, strides[row.fine]);
    for (auto& p : patches) {
      auto resized = resize_bilinear(p.pixels, config.patch_size, config.patch_size);
      auto name = patch_name(row.wsi_id, p.origin.x, p.origin.y);
      write_png((dir / name).string(), resized);
      index.entries.push_back({name, row.wsi_id, row.patient_id, h.coarse_names[row.coarse],
                               h.fine_names[row.fine], true, p.origin.x, p.origin.y});
    }
    ++counts[row.fine][0];
    counts[row.fine][1] += patches.size();
  }
  index.save(index_path(config, "patches"));
  out << index.entries.size() << " patches from " << manifest.rows.size() - failures
      << " slides\n";
  print_class_table(out, h, {"WSIs", "patches"}, counts);
}

void cmd_filter(const RunConfig& config, std::ostream& out) {
  const fs::path dir = config.stage_dir("patches");
  auto index = PatchIndex::load(index_path(config, "patches"));
  if (index.entries.size() < 2) throw DataError("filtering needs at least 2 patches");

  std::vector<Image> inputs;
  std::vector<double> brightness;
  for (const auto& e : index.entries) {
    auto gray = read_png((dir / e.patch_path).string(), 1);
    brightness.push_back(gray.mean());
    inputs.push_back(resize_bilinear(gray, config.cae.input, config.cae.input));
  }
  Rng cae_rng(config.subseed("cae"));
  Cae cae(config.cae, cae_rng);
  auto training = train_cae(cae, inputs, cae_rng);
  auto embeddings = embed(cae, inputs);
  Rng km_rng(config.subseed("kmeans"));
  auto assignment = filter_patches(embeddings, brightness, km_rng);

  const auto& h = config.hierarchy;
  std::vector<std::vector<std::size_t>> counts(h.fine_count(), {0, 0, 0});
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    auto& e = index.entries[i];
    e.kept = assignment.kept[i];
    auto f = h.fine_index(e.fine_label);
    if (!f) throw DataError("patch index names unknown class '" + e.fine_label + "'");
    ++counts[*f][e.kept ? 0 : 1];
    ++counts[*f][2];
  }
  index.config_hash = config.hash();
  std::ostringstream mse;
  mse << "cae_holdout_mse: " << fmt(training.initial_holdout_mse) << " -> "
      << fmt(training.final_holdout_mse);
  index.save(index_path(config, "patches"), {mse.str()});
  out << "auto-encoder held-out MSE " << training.initial_holdout_mse << " -> "
      << training.final_holdout_mse << '\n';
  print_class_table(out, h, {"kept", "dropped", "total"}, counts);
}

void cmd_normalize(const RunConfig& config, std::ostream& out,
                   std::optional<std::size_t> samples) {
  const fs::path src_dir = config.stage_dir("patches");
  const fs::path dst_dir = config.stage_dir("normalized");
  auto index = PatchIndex::load(index_path(config, "patches"));
  std::vector<const PatchEntry*> kept;
  for (const auto& e : index.entries) {
    if (e.kept) kept.push_back(&e);
  }
  if (kept.empty()) throw DataError("no kept patches to normalize");
  fs::create_directories(dst_dir / "samples");

  fs::path reference = config.reference.empty() ? src_dir / kept.front()->patch_path
                                                 : config.resolve(config.reference);
  StainModel target;
  try {
    Rng rng(config.subseed("stain/reference"));
    target = fit_stain_model(read_png(reference.string(), 3), config.stain, rng).model;
  } catch (const DataError& e) {
    throw DataError("reference stain fit failed for " + reference.string() + ": " + e.what());
  }

  // Source stains are a property of the slide, so each slide is fit once.
  const auto manifest = load_manifest(config.resolve(config.manifest), config.hierarchy);
  std::map<std::string, const ManifestRow*> by_wsi;
  for (const auto& r : manifest.rows) by_wsi[r.wsi_id] = &r;
  std::map<std::string, std::optional<StainModel>> sources;

  PatchIndex result;
  result.config_hash = config.hash();
  const std::size_t want = samples.value_or(config.normalize_samples);
  std::size_t written_samples = 0, skipped = 0;
  for (const auto* e : kept) {
    auto it = sources.find(e->wsi_id);
    if (it == sources.end()) {
      std::optional<StainModel> model;
      auto row = by_wsi.find(e->wsi_id);
      if (row == by_wsi.end()) throw DataError("patch " + e->patch_path + " names unknown slide");
      try {
        Rng rng(config.subseed("stain/" + e->wsi_id));
        model = fit_stain_model(read_png(manifest.resolve(*row->second).string(), 3),
                                config.stain, rng)
                    .model;
      } catch (const DataError& err) {
        log::warn("slide " + e->wsi_id + ": " + err.what());
      }
      it = sources.emplace(e->wsi_id, model).first;
    }
    if (!it->second) {
      ++skipped;
      continue;
    }
    auto rgb = read_png((src_dir / e->patch_path).string(), 3);
    auto normalized = normalize_stain(rgb, *it->second, target);
    auto gray = to_grayscale(normalized);
    write_png((dst_dir / e->patch_path).string(), gray);
    if (written_samples < want) {
      auto stem = fs::path(e->patch_path).stem().string();
      write_png((dst_dir / "samples" / (stem + "_original.png")).string(), rgb);
      write_png((dst_dir / "samples" / (stem + "_normalized.png")).string(), normalized);
      write_png((dst_dir / "samples" / (stem + "_gray.png")).string(), gray);
      ++written_samples;
    }
    result.entries.push_back(*e);
  }
  result.save(index_path(config, "normalized"), {"reference: " + reference.string()});
  out << result.entries.size() << " of " << kept.size() << " kept patches normalized";
  if (skipped) out << " (" << skipped << " skipped: slide stain fit failed)";
  out << "\nreference patch: " << reference.string() << '\n'
      << written_samples << " before/after triplets in " << (dst_dir / "samples").string() << '\n';
}

ImageSet load_normalized(const RunConfig& config) {
  const fs::path dir = config.stage_dir("normalized");
  auto index = PatchIndex::load(index_path(config, "normalized"));
  const auto& h = config.hierarchy;
  ImageSet set;
  set.height = set.width = config.patch_size;
  for (const auto& e : index.entries) {
    auto f = h.fine_index(e.fine_label);
    auto c = h.coarse_index(e.coarse_label);
    if (!f || !c || h.parent[*f] != *c) {
      throw DataError("normalized index: bad labels for " + e.patch_path);
    }
    auto img = read_png((dir / e.patch_path).string(), 1);
    if (img.width != config.patch_size || img.height != config.patch_size) {
      throw DataError("normalized patch " + e.patch_path + " is not " +
                      std::to_string(config.patch_size) + " pixels square");
    }
    set.samples.push_back({e.patient_id, e.wsi_id, *c, *f, std::move(img.pixels)});
  }
  set.validate(h);
  return set;
}

namespace {

struct SplitSets {
  SplitAssignment assignment;
  ImageSet train, development, test;
};

SplitSets make_splits(const RunConfig& config, const ImageSet& all, std::ostream* out) {
  const auto manifest = load_manifest(config.resolve(config.manifest), config.hierarchy);
  Rng rng(config.subseed("split"));
  SplitSets s;
  s.assignment = split_by_patient(manifest, config.split_ratios, rng);
  s.train = select_split(all, s.assignment, Split::train);
  s.development = select_split(all, s.assignment, Split::development);
  s.test = select_split(all, s.assignment, Split::test);
  audit_no_leakage(s.train, s.development, s.test);

  if (out) {
    const auto& h = config.hierarchy;
    // Table I layout: WSIs and patches per split and class. Patch totals are
    // cross-checked against the per-slide counts.
    std::vector<std::vector<std::size_t>> counts(h.fine_count(), std::vector<std::size_t>(6, 0));
    std::map<std::string, std::size_t> per_wsi;
    for (const auto& smp : all.samples) ++per_wsi[smp.wsi_id];
    for (const auto& row : manifest.rows) {
      auto sp = static_cast<std::size_t>(s.assignment.of(row.patient_id));
      ++counts[row.fine][2 * sp];
      counts[row.fine][2 * sp + 1] += per_wsi[row.wsi_id];
    }
    const std::array<const ImageSet*, 3> sets{&s.train, &s.development, &s.test};
    for (std::size_t sp = 0; sp < 3; ++sp) {
      std::vector<std::size_t> direct(h.fine_count(), 0);
      for (const auto& smp : sets[sp]->samples) ++direct[smp.fine];
      for (std::size_t f = 0; f < h.fine_count(); ++f) {
        if (direct[f] != counts[f][2 * sp + 1]) {
          throw DataError("split totals disagree with per-slide patch counts for " + h.fine_names[f]);
        }
      }
    }
    print_class_table(*out, h,
                      {"train WSIs", "patches", "dev WSIs", "patches", "test WSIs", "patches"},
                      counts);
  }
  return s;
}

fs::path checkpoint_path(const RunConfig& c, const std::string& family, int run) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "run_%02d.ckpt", run);
  return c.stage_dir("train") / family / buf;
}

}  // namespace

void cmd_train(const RunConfig& config, bool hierarchical, std::ostream& out) {
  const std::string family = hierarchical ? "hier" : "flat";
  const ImageSet all = load_normalized(config);
  auto sets = make_splits(config, all, &out);
  const fs::path dir = config.stage_dir("train") / family;
  fs::create_directories(dir);
  sets.assignment.save(config.stage_dir("train") / "split.csv", {hash_comment(config.hash())});

  const std::string hash = config.hash();
  std::mutex io;
  auto on_done = [&](const RunResult& r, Network& net) {
    std::lock_guard lock(io);
    save_checkpoint(checkpoint_path(config, family, r.run), net, hash);
    out << family << " run " << r.run << " (seed " << r.seed << ") done, final loss "
        << r.log.back().train_loss << '\n';
  };
  TrainConfig tc = config.train;
  tc.seed = config.subseed("runs");
  auto results = multi_run(tc, config.model_spec(), hierarchical, sets.train, &sets.development,
                           sets.test, on_done);

  std::ofstream log(dir / "log.jsonl");
  for (const auto& r : results) {
    for (const auto& e : r.log) {
      auto j = e.to_json();
      j["config_hash"] = hash;
      j["model"] = family;
      log << j.dump() << '\n';
    }
  }
  if (!log) throw DataError("cannot write " + (dir / "log.jsonl").string());
  out << results.size() << " " << family << " runs written to " << dir.string() << '\n';
}

ComparisonReport cmd_evaluate(const RunConfig& config, std::ostream& out) {
  const std::string hash = config.hash();
  std::vector<std::string> missing;
  for (const char* family : {"flat", "hier"}) {
    for (int r = 0; r < config.train.runs; ++r) {
      if (!fs::exists(checkpoint_path(config, family, r))) {
        missing.push_back(checkpoint_path(config, family, r).string());
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing checkpoints:";
    for (const auto& m : missing) msg += " " + m;
    throw DataError(msg);
  }
  auto saved = SplitAssignment::load(config.stage_dir("train") / "split.csv");
  const ImageSet all = load_normalized(config);
  auto sets = make_splits(config, all, nullptr);
  if (saved.by_patient != sets.assignment.by_patient) {
    throw DataError("train/split.csv does not match the split this config produces");
  }
  audit_no_leakage(sets.train, sets.development, sets.test);

  const ModelSpec spec = config.model_spec();
  ComparisonReport report;
  report.config_hash = hash;
  for (const char* family : {"flat", "hier"}) {
    std::vector<PredictionBundle> bundles;
    for (int r = 0; r < config.train.runs; ++r) {
      const auto path = checkpoint_path(config, family, r);
      auto [net, info] = load_checkpoint(path, spec);
      if (info.config_hash != hash) {
        throw DataError(path.string() + " was trained under config " + info.config_hash +
                        ", not " + hash);
      }
      if (info.hierarchical != (std::string(family) == "hier")) {
        throw DataError(path.string() + " holds the wrong model family");
      }
      bundles.push_back(predict(net, sets.test));
    }
    auto rep = build_report(family == std::string("flat") ? "flat" : "hierarchical", bundles,
                            config.hierarchy, config.ci);
    (std::string(family) == "flat" ? report.flat : report.hierarchical) = std::move(rep);
  }
  const fs::path dir = config.stage_dir("evaluate");
  render_report(report, dir);

  for (const auto& row : metrics_table(report)) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? " | " : "") << row[i];
    out << '\n';
  }
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "cross-coarse confusion mass: flat %.4f, hierarchical %.4f, difference %+.4f\n",
                report.flat.cross_coarse.mean, report.hierarchical.cross_coarse.mean,
                report.hierarchical.cross_coarse.mean - report.flat.cross_coarse.mean);
  out << buf << "reports written to " << dir.string() << '\n';
  return report;
}

}  // namespace hvgg
