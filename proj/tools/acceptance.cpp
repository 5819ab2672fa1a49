// Acceptance run: one PASS/FAIL line per criterion.
//
//   hvgg_acceptance [--only 1,2,...] [--known-failures 8] [--workdir DIR]
//
// Exit status is 0 when every failing criterion is listed as a known failure.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "hvgg/csv.hpp"
#include "hvgg/dataset.hpp"
#include "hvgg/log.hpp"
#include "hvgg/metrics.hpp"
#include "hvgg/model.hpp"
#include "hvgg/pipeline.hpp"
#include "hvgg/preprocess.hpp"
#include "hvgg/training.hpp"

namespace fs = std::filesystem;
using namespace hvgg;

namespace {

constexpr bool kDouble = std::is_same_v<Real, double>;

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    detail += (detail.empty() ? "" : "; ") + (ok ? what : "NOT " + what);
    pass = pass && ok;
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- 1 ------------------------------------------------------------------------

Outcome schedules() {
  Outcome o;
  const auto w = LossWeightSchedule::coarse_to_fine();
  const std::vector<std::pair<int, std::vector<double>>> expect{
      {1, {0.98, 0.02}}, {5, {0.30, 0.70}}, {10, {0.10, 0.90}}, {15, {0.00, 1.00}}};
  bool ok = true;
  for (const auto& [epoch, v] : expect) ok = ok && weights_at(w, epoch) == v;
  o.check(ok, "loss weights at epochs 1/5/10/15 exact");
  const auto lr = LrSchedule::step_decay();
  o.check(lr_at(lr, 1) == 1e-3 && lr_at(lr, 11) == 5e-4 && lr_at(lr, 16) == 1e-4,
          "learning rate at epochs 1/11/16 exact");
  return o;
}

// ---- 2 ------------------------------------------------------------------------

double ce_oracle(const std::vector<double>& z, std::size_t t) {
  long double total = 0;
  for (double v : z) total += std::exp(static_cast<long double>(v));
  return static_cast<double>(std::log(total) - static_cast<long double>(z[t]));
}

Outcome loss_equation() {
  Outcome o;
  const auto tree = ClassHierarchy::gastrointestinal();
  const double tol = kDouble ? 1e-12 : 1e-6;
  Rng rng(42);
  std::uniform_real_distribution<double> u(-4, 4), unit(0, 1);
  std::uniform_int_distribution<std::size_t> n_dist(1, 6), cls(0, 6);
  double worst = 0, worst_linear = 0;
  bool zero_exact = true;
  auto loss = [&](const Tensor& c, const Tensor& f, const std::vector<std::size_t>& tc,
                  const std::vector<std::size_t>& tf, std::vector<double> w) {
    Tape tape;
    const Tensor heads[] = {c, f};
    const std::vector<std::size_t> targets[] = {tc, tf};
    return hierarchical_loss(tape, heads, targets, w).item();
  };
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = n_dist(rng);
    Tensor coarse({n, 3}, Real(0), true), fine({n, 7}, Real(0), true);
    for (auto& v : coarse.data()) v = Real(u(rng));
    for (auto& v : fine.data()) v = Real(u(rng));
    std::vector<std::size_t> tf(n), tc(n);
    for (std::size_t i = 0; i < n; ++i) tc[i] = tree.parent[tf[i] = cls(rng)];
    const double w0 = unit(rng);
    const std::vector<double> w{w0, 1 - w0};
    double oracle = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> zc(3), zf(7);
      for (std::size_t k = 0; k < 3; ++k) zc[k] = coarse.data()[i * 3 + k];
      for (std::size_t k = 0; k < 7; ++k) zf[k] = fine.data()[i * 7 + k];
      oracle += (w[0] * ce_oracle(zc, tc[i]) + w[1] * ce_oracle(zf, tf[i])) / double(n);
    }
    const double got = loss(coarse, fine, tc, tf, w);
    worst = std::max(worst, std::abs(got - oracle) / std::max(1.0, oracle));

    Tape tape;
    zero_exact = zero_exact && loss(coarse, fine, tc, tf, {0, 1}) ==
                                   ops::cross_entropy(tape, fine, tf).item();
    const double combined =
        w[0] * loss(coarse, fine, tc, tf, {1, 0}) + w[1] * loss(coarse, fine, tc, tf, {0, 1});
    // A 32-bit result is the double combination rounded once.
    const double ref = kDouble ? combined : double(Real(combined));
    worst_linear = std::max(worst_linear, std::abs(got - ref));
  }
  o.check(worst <= tol, "max error vs oracle " + fmt("%.2e", worst) + " (tol " + fmt("%.0e", tol) + ")");
  o.check(zero_exact, "weights [0,1] equal cross-entropy exactly");
  o.check(worst_linear <= 1e-9, "linearity error " + fmt("%.1e", worst_linear));
  return o;
}

// ---- 3 ------------------------------------------------------------------------

Tensor random_tensor(Shape shape, Rng& rng, bool grad = true) {
  Tensor t(std::move(shape), Real(0), grad);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : t.data()) v = Real(u(rng));
  return t;
}

// Values spaced 0.1 apart in random order: no pooling ties, nothing near zero.
Tensor kink_free(Shape shape, Rng& rng) {
  Tensor t(std::move(shape), Real(0), true);
  std::vector<double> grid(t.size());
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = 0.1 * (double(i) - double(grid.size()) / 2) + 0.05;
  std::shuffle(grid.begin(), grid.end(), rng);
  for (std::size_t i = 0; i < grid.size(); ++i) t.data()[i] = Real(grid[i]);
  return t;
}

Tensor probe(Tape& tape, const Tensor& y) {
  Rng rng(99);
  Tensor w = random_tensor(y.shape(), rng, false);
  return ops::sum(tape, ops::mul(tape, y, w));
}

// Whole desk H-VGGNet under a mixed-weight loss, dropout mask fixed per
// evaluation. Relu precedes batch norm, so a nearly dead channel is rescaled by
// 1/sqrt(var + eps); the resulting curvature needs steps below 1e-5, which only
// the 64-bit build can resolve.
void network_gradients(Outcome& o) {
  const double tol = 1e-5;
  GradCheckOptions opts;
  opts.samples = 20;
  opts.step = 1e-6;
  const auto spec = ModelSpec::desk();
  Rng init(3);
  auto net = build_hierarchical(spec, init);
  Rng data(4);
  std::uniform_real_distribution<double> pix(0, 1);
  Tensor images({4, 1, spec.height, spec.width}, Real(0), false);
  for (auto& v : images.data()) v = Real(pix(data));
  const std::vector<std::size_t> tf{0, 3, 5, 6}, tc{0, 1, 2, 2};
  auto f = [&](Tape& tape) {
    Rng mask(11);
    auto out = net.forward(tape, images, Mode::train, mask);
    const Tensor heads[] = {out.coarse, out.fine};
    const std::vector<std::size_t> t[] = {tc, tf};
    const double w[] = {0.4, 0.6};
    return hierarchical_loss(tape, heads, t, w);
  };
  double worst = 0;
  std::string layer;
  std::size_t tensors = 0;
  for (auto& p : net.parameters()) {
    const double e = finite_diff_check(f, p.tensor, opts);
    ++tensors;
    if (e > worst) worst = e, layer = p.name;
  }
  o.check(worst < tol, "network worst " + fmt("%.1e", worst) + " (" + layer + ", " +
                           std::to_string(tensors) + " tensors x 20 coords, 64-bit)");
}

#ifdef HVGG_ACCEPTANCE_F64
void delegate_network_check(Outcome& o) {
  const std::string cmd = std::string("\"") + HVGG_ACCEPTANCE_F64 + "\" --only 3 --network-only";
  std::string text;
  if (FILE* pipe = popen(cmd.c_str(), "r")) {
    char buf[512];
    while (std::fgets(buf, sizeof buf, pipe)) text += buf;
    const int status = pclose(pipe);
    const auto at = text.find("network worst");
    const auto stop = text.find_first_of(";\n", at);
    o.check(status == 0 && at != std::string::npos,
            at == std::string::npos ? "64-bit network check ran" : text.substr(at, stop - at));
    return;
  }
  o.check(false, "64-bit network check ran");
}
#else
void delegate_network_check(Outcome& o) { o.check(false, "64-bit network check available"); }
#endif

Outcome gradients(bool network_only) {
  Outcome o;
  const double tol = kDouble ? 1e-5 : 1e-3;
  GradCheckOptions opts;
  opts.samples = 20;

  if (network_only) {
    network_gradients(o);
    return o;
  }
  double op_worst = 0;
  std::string op_name;
  auto op = [&](const std::string& name, const std::function<Tensor(Tape&)>& f, Tensor& x) {
    const double e = finite_diff_check(f, x, opts);
    if (e > op_worst) op_worst = e, op_name = name;
  };
  Rng rng(100);
  Tensor a = random_tensor({6, 4}, rng), b = random_tensor({6, 4}, rng);
  Tensor m = random_tensor({4, 2}, rng), img = random_tensor({2, 2, 4, 4}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng), bias = random_tensor({3}, rng);
  Tensor spaced = kink_free({2, 2, 4, 4}, rng), off_zero = kink_free({6, 4}, rng);
  std::vector<std::size_t> targets{1, 3, 0, 2, 2, 1};
  auto bn = BatchNormState::create(4);
  op("add", [&](Tape& t) { return probe(t, ops::add(t, a, b)); }, a);
  op("sub", [&](Tape& t) { return probe(t, ops::sub(t, a, b)); }, b);
  op("mul", [&](Tape& t) { return probe(t, ops::mul(t, a, b)); }, a);
  op("matmul", [&](Tape& t) { return probe(t, ops::matmul(t, a, m)); }, m);
  op("conv2d", [&](Tape& t) { return probe(t, ops::conv2d(t, img, k)); }, img);
  op("conv2d kernel", [&](Tape& t) { return probe(t, ops::conv2d(t, img, k)); }, k);
  op("conv2d stride 2", [&](Tape& t) { return probe(t, ops::conv2d(t, img, k, 2)); }, img);
  op("add_bias", [&](Tape& t) { return probe(t, ops::add_bias(t, ops::conv2d(t, img, k), bias)); }, bias);
  op("maxpool2d", [&](Tape& t) { return probe(t, ops::maxpool2d(t, spaced)); }, spaced);
  op("upsample2x", [&](Tape& t) { return probe(t, ops::upsample2x(t, img)); }, img);
  op("relu", [&](Tape& t) { return probe(t, ops::relu(t, off_zero)); }, off_zero);
  op("softmax", [&](Tape& t) { return probe(t, ops::softmax(t, a)); }, a);
  op("mean", [&](Tape& t) { return ops::mean(t, ops::scale(t, a, Real(3))); }, a);
  op("cross_entropy", [&](Tape& t) { return ops::cross_entropy(t, a, targets); }, a);
  op("batch_norm", [&](Tape& t) { return probe(t, ops::batch_norm(t, a, bn, Mode::train)); }, a);
  op("dropout", [&](Tape& t) {
       Rng fixed(7);
       return probe(t, ops::dropout(t, a, Real(0.5), Mode::train, fixed));
     }, a);
  o.check(op_worst < tol, "ops worst " + fmt("%.1e", op_worst) + " (" + op_name + ")");

  if (kDouble) {
    network_gradients(o);
  } else {
    delegate_network_check(o);
  }
  return o;
}

// ---- 4 ------------------------------------------------------------------------

Outcome architecture() {
  Outcome o;
  const auto full = ModelSpec::full();
  Rng rng(1);
  auto hier = build_hierarchical(full, rng);
  Tensor x({1, 1, 224, 224}, Real(0.5), false);
  {
    Tape tape;
    auto out = hier.forward(tape, x, Mode::infer, rng);
    o.check(out.coarse.shape() == Shape{1, 3} && out.fine.shape() == Shape{1, 7},
            "full forward [1,1,224,224] -> coarse " + shape_to_string(out.coarse.shape()) +
                " + fine " + shape_to_string(out.fine.shape()));
  }
  Rng rng2(1);
  auto flat = build_flat(full, rng2);
  o.check(flat.trainable_layer_count() == 16,
          "flat trainable layers " + std::to_string(flat.trainable_layer_count()));

  const auto desk = ModelSpec::desk();
  Rng rng3(3);
  auto net = build_hierarchical(desk, rng3);
  Tensor batch({4, 1, desk.height, desk.width}, Real(0), false);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : batch.data()) v = Real(u(rng3));
  Tape tape;
  auto out = net.forward(tape, batch, Mode::train, rng3);
  const Tensor heads[] = {out.coarse, out.fine};
  const std::vector<std::size_t> t[] = {{0, 1, 2, 0}, {0, 3, 5, 1}};
  const double w[] = {0.0, 1.0};
  net.zero_grad();
  tape.backward(hierarchical_loss(tape, heads, t, w));
  double branch = 0;
  for (auto& p : net.branch_parameters())
    for (Real g : std::as_const(p.tensor).grad()) branch += std::abs(double(g));
  o.check(branch == 0.0, "zero coarse weight -> branch gradient exactly 0");
  return o;
}

// ---- 5 ------------------------------------------------------------------------

Outcome end_to_end(std::size_t workers) {
  Outcome o;
  RunConfig defaults;
  SyntheticSpec s;
  s.samples_per_class = 50;
  s.seed = defaults.subseed("synth");
  const auto corpus = generate_synthetic(s);
  Rng split_rng(defaults.subseed("split"));
  const auto a = split_by_patient(corpus.manifest, {0.5, 0.2, 0.3}, split_rng);
  const auto train = select_split(corpus.images, a, Split::train);
  const auto dev = select_split(corpus.images, a, Split::development);
  const auto test = select_split(corpus.images, a, Split::test);
  audit_no_leakage(train, dev, test);

  TrainConfig cfg;  // 10 runs x 20 epochs, desk preset
  cfg.seed = defaults.subseed("runs");
  cfg.workers = workers;
  const auto spec = ModelSpec::desk();
  const auto flat = multi_run(cfg, spec, false, train, &dev, test);
  const auto hier = multi_run(cfg, spec, true, train, &dev, test);

  std::size_t wins = 0;
  double coarse = 0, fine = 0;
  for (std::size_t r = 0; r < hier.size(); ++r) {
    const double hf = cross_coarse_mass(confusion(hier[r].test), spec.hierarchy);
    const double ff = cross_coarse_mass(confusion(flat[r].test), spec.hierarchy);
    wins += hf <= ff;
    coarse += overall_accuracy(hier[r].test, Level::coarse) / double(hier.size());
    fine += overall_accuracy(hier[r].test, Level::fine) / double(hier.size());
  }
  o.check(coarse >= 0.95, "hier mean coarse accuracy " + fmt("%.3f", coarse));
  o.check(fine >= 0.70, "hier mean fine accuracy " + fmt("%.3f", fine));
  o.check(wins >= 7, "cross-coarse mass hier <= flat in " + std::to_string(wins) + "/" +
                         std::to_string(hier.size()) + " runs");
  return o;
}

// ---- 6 ------------------------------------------------------------------------

std::size_t brute_patch_count(std::size_t w, std::size_t h, std::size_t win, std::size_t s) {
  std::size_t nx = 0, ny = 0;
  for (std::size_t x = 0; x < w; x += s) nx += (x + win <= w);
  for (std::size_t y = 0; y < h; y += s) ny += (y + win <= h);
  return nx * ny;
}

std::array<double, 3> unit3(std::array<double, 3> v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  for (auto& x : v) x /= n;
  return v;
}

double angle_deg(const StainMatrix& w, int k, const std::array<double, 3>& v) {
  double dot = 0;
  for (int c = 0; c < 3; ++c) dot += w[c][k] * v[c];
  return std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

// A scratch run directory driven through the command-line entry point.
struct Run {
  fs::path dir;
  fs::path config;

  explicit Run(const fs::path& d) : dir(d), config(d / "run.cfg") {}
  Run(const fs::path& d, const std::string& text) : Run(d) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(config) << text;
  }
  int stage(const std::string& name, std::vector<std::string> extra = {}) const {
    std::vector<std::string> args{name, "--config", config.string()};
    args.insert(args.end(), extra.begin(), extra.end());
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    if (code != 0) std::cerr << name << ": " << err.str();
    return code;
  }
  fs::path out(const std::string& rel) const { return dir / "out" / rel; }
};

const char* kDeskConfig =
    "synth.samples = 8\n"
    "train.runs = 2\n"
    "train.epochs = 3\n"
    "train.batch_size = 16\n"
    "cae.epochs = 30\n"
    "cae.batch_size = 8\n";

Outcome preprocessing(const fs::path& workdir) {
  Outcome o;
  Rng rng(7);
  std::uniform_int_distribution<std::size_t> side(1, 300), win(1, 64), stride(1, 80);
  std::size_t mismatches = 0, tested = 0;
  while (tested < 1000) {
    const std::size_t w = side(rng), h = side(rng), k = win(rng), s = stride(rng);
    if (k > w || k > h) continue;
    ++tested;
    mismatches += patch_count(w, h, k, s) != brute_patch_count(w, h, k, s);
  }
  o.check(mismatches == 0, "patch-count formula exact on 1000 geometries");

  int worst = 0;
  for (int i = 0; i < 256; ++i) {
    worst = std::max(worst, std::abs(int(od_to_rgb(rgb_to_od(std::uint8_t(i)))) - i));
  }
  o.check(worst <= 1, "rgb<->od round trip max " + std::to_string(worst));

  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_angle = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const auto hv = unit3({0.5 + 0.4 * u(rng), 0.5 + 0.4 * u(rng), 0.1 + 0.3 * u(rng)});
    const auto ev = unit3({0.02 + 0.1 * u(rng), 0.8 + 0.2 * u(rng), 0.05 + 0.2 * u(rng)});
    std::vector<double> od(3 * 4000);
    for (std::size_t p = 0; p < 4000; ++p) {
      double ch = u(rng) < 0.5 ? 0.2 + 1.2 * u(rng) : 0.1 * u(rng);
      const double ce = u(rng) < 0.5 ? 0.2 + 1.0 * u(rng) : 0.1 * u(rng);
      if (ch + ce < 0.3) ch += 0.3;
      for (int c = 0; c < 3; ++c) od[3 * p + c] = hv[c] * ch + ev[c] * ce;
    }
    Rng fit(trial);
    const auto w = fit_stain_model(od, {}, fit).model.w;
    const double direct = std::max(angle_deg(w, 0, hv), angle_deg(w, 1, ev));
    const double swapped = std::max(angle_deg(w, 0, ev), angle_deg(w, 1, hv));
    worst_angle = std::max(worst_angle, std::min(direct, swapped));
  }
  o.check(worst_angle < 5.0, "planted stains recovered within " + fmt("%.2f", worst_angle) + " deg");

  // Blank removal and self-normalization through the stage commands.
  Run run(workdir / "c6", kDeskConfig);
  bool ok = run.stage("synth") == 0 && run.stage("patch") == 0 && run.stage("filter") == 0;
  o.check(ok, "synth/patch/filter stages");
  if (!ok) return o;
  const auto index = PatchIndex::load(run.out("patches/index.csv"));
  const auto blanks = csv::read_file(run.out("synth/blank_tiles.csv"));
  std::set<std::string> blank_names;
  for (const auto& row : blanks.rows) {
    blank_names.insert(row[blanks.column("wsi_id")] + "_" + row[blanks.column("x")] + "_" +
                       row[blanks.column("y")] + ".png");
  }
  std::size_t total = 0, dropped = 0;
  for (const auto& e : index.entries) {
    if (!blank_names.count(e.patch_path)) continue;
    ++total;
    dropped += !e.kept;
  }
  o.check(total > 0 && dropped >= 0.98 * double(total),
          "filter drops " + std::to_string(dropped) + "/" + std::to_string(total) + " blanks");

  const auto m = load_manifest(run.out("synth/manifest.csv"), RunConfig{}.hierarchy);
  const auto& slide = m.rows.front();
  std::ofstream(run.config, std::ios::app) << "stain.reference = out/synth/" << slide.image_path << "\n";
  ok = run.stage("normalize") == 0;
  o.check(ok, "normalize stage");
  if (!ok) return o;
  double drift = 0;
  for (const auto& e : PatchIndex::load(run.out("normalized/index.csv")).entries) {
    if (e.wsi_id != slide.wsi_id) continue;
    const auto before = to_grayscale(read_png(run.out("patches/" + e.patch_path).string(), 3));
    const auto after = read_png(run.out("normalized/" + e.patch_path).string(), 1);
    drift = std::max(drift, std::abs(after.mean() - before.mean()));
  }
  o.check(drift < 2.0, "self-normalization mean drift " + fmt("%.3f", drift));
  return o;
}

// ---- 7 ------------------------------------------------------------------------

Outcome splits() {
  Outcome o;
  const auto tree = ClassHierarchy::gastrointestinal();
  Rng rng(2024);
  std::uniform_int_distribution<std::size_t> patients(60, 300), slides(1, 3), cls(0, 6);
  std::size_t overlaps = 0;
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Manifest m;
    m.hierarchy = tree;
    const std::size_t np = patients(rng);
    std::size_t w = 0;
    for (std::size_t p = 0; p < np; ++p) {
      const std::size_t fine = cls(rng), k = slides(rng);
      for (std::size_t i = 0; i < k; ++i) {
        m.rows.push_back({"p" + std::to_string(p), "w" + std::to_string(w++), "x.png",
                          tree.parent[fine], fine});
      }
    }
    const auto a = split_by_patient(m, {0.5, 0.2, 0.3}, rng);
    // Rebuild the three sets from slides and look for any shared patient.
    std::map<std::string, std::set<Split>> seen;
    std::array<std::size_t, 3> counts{};
    for (const auto& r : m.rows) {
      const Split s = a.of(r.patient_id);
      seen[r.patient_id].insert(s);
      ++counts[static_cast<std::size_t>(s)];
    }
    for (const auto& [p, s] : seen) overlaps += s.size() != 1;
    const double targets[] = {0.5, 0.2, 0.3};
    for (int s = 0; s < 3; ++s) {
      worst = std::max(worst, std::abs(double(counts[s]) / double(m.rows.size()) - targets[s]));
    }
  }
  o.check(overlaps == 0, "zero patient overlap on 1000 manifests");
  o.check(worst <= 0.05, "worst WSI fraction deviation " + fmt("%.3f", worst));
  return o;
}

// ---- 8 ------------------------------------------------------------------------

Outcome metric_oracles() {
  Outcome o;
  Rng rng(31);
  std::uniform_int_distribution<int> size(2, 12), level(0, 5);
  int auc_mismatch = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> pos(size(rng)), neg(size(rng));
    for (auto& v : pos) v = level(rng) / 5.0;  // coarse levels force ties
    for (auto& v : neg) v = level(rng) / 5.0;
    double wins = 0;
    for (double p : pos)
      for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
    const double oracle = wins / double(pos.size() * neg.size());
    std::vector<double> scores = pos;
    scores.insert(scores.end(), neg.begin(), neg.end());
    std::unique_ptr<bool[]> flags(new bool[scores.size()]);
    for (std::size_t i = 0; i < scores.size(); ++i) flags[i] = i < pos.size();
    const auto got = auc_ovr(scores, std::span<const bool>(flags.get(), scores.size()));
    auc_mismatch += !got || *got != oracle;
  }
  o.check(auc_mismatch == 0, "AUC equals pairwise oracle on 500 instances");

  std::uniform_int_distribution<std::uint64_t> count(0, 20);
  double row_err = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::uint64_t> c(49);
    for (auto& v : c) v = count(rng);
    const auto cm = ConfusionMatrix::from_counts(7, c);
    for (std::size_t r = 0; r < 7; ++r) {
      if (cm.empty_rows[r]) continue;
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += cm.at(r, k);
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
  }
  o.check(row_err <= 1e-9, "confusion rows sum to 1 (max error " + fmt("%.1e", row_err) + ")");

  const auto tree = ClassHierarchy::gastrointestinal();
  std::vector<double> uniform(49, 1.0 / 7.0);
  const double got = cross_coarse_mass(uniform, 7, tree);
  // Row-by-row count of columns outside the row's coarse parent.
  double hand = 0;
  for (std::size_t r = 0; r < 7; ++r) {
    std::size_t outside = 0;
    for (std::size_t c = 0; c < 7; ++c) outside += tree.parent[c] != tree.parent[r];
    hand += double(outside) / 7.0 / 7.0;
  }
  o.check(std::abs(got - hand) <= 1e-12,
          "uniform matrix mass " + fmt("%.4f", got) + " equals row enumeration " + fmt("%.4f", hand));
  o.check(std::abs(got - 33.0 / 49.0) <= 1e-12,
          "stated 33/49 = " + fmt("%.4f", 33.0 / 49.0) + " (enumeration gives 32/49)");

  const std::vector<double> same(10, 0.42);
  const auto ci = aggregate_ci(same);
  o.check(ci.half_width == 0.0, "identical values give zero-width interval");
  return o;
}

// ---- 9 and 10 -----------------------------------------------------------------

std::map<std::string, std::string> tables(const fs::path& dir) {
  std::map<std::string, std::string> files;
  if (!fs::exists(dir)) return files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (!e.is_regular_file() || (ext != ".csv" && ext != ".json" && ext != ".jsonl")) continue;
    std::ifstream in(e.path(), std::ios::binary);
    files[fs::relative(e.path(), dir).string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return files;
}

Outcome determinism(const fs::path& workdir) {
  Outcome o;
  Run run(workdir / "c9", kDeskConfig);
  const std::vector<std::pair<std::string, std::vector<std::string>>> stages{
      {"synth", {}},           {"patch", {}},
      {"filter", {}},          {"normalize", {}},
      {"train", {"--model", "flat"}}, {"train", {"--model", "hier"}},
      {"evaluate", {}}};
  std::size_t files = 0;
  for (const auto& [name, extra] : stages) {
    const std::string label = name + (extra.empty() ? "" : " " + extra.back());
    if (run.stage(name, extra) != 0) {
      o.check(false, label + " failed");
      return o;
    }
    const auto first = tables(run.dir / "out");
    if (run.stage(name, extra) != 0 || tables(run.dir / "out") != first) {
      o.check(false, label + " rerun differs");
      return o;
    }
    files = first.size();
  }
  o.check(true, "7 stages rerun byte-identically (" + std::to_string(files) + " CSV/JSON files)");
  return o;
}

Outcome report_shape(const fs::path& workdir) {
  Outcome o;
  // Reuses the trained run from the determinism check when present.
  const fs::path dir = workdir / "c9";
  if (!fs::exists(dir / "out/train/hier")) {
    Run fresh(dir, kDeskConfig);
    for (const char* stage : {"synth", "patch", "filter", "normalize"}) fresh.stage(stage);
    fresh.stage("train", {"--model", "flat"});
    fresh.stage("train", {"--model", "hier"});
  }
  const Run run(dir);

  const auto t0 = std::chrono::steady_clock::now();
  const int code = run.stage("evaluate");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.check(code == 0, "evaluate in " + fmt("%.2f", secs) + " s");
  if (code != 0) return o;
  o.check(secs < 1.0, "under 1 s");

  const auto metrics = csv::read_file(run.out("evaluate/metrics.csv"));
  std::set<std::string> models, names;
  std::size_t cells = 0, bad = 0;
  for (const auto& row : metrics.rows) {
    names.insert(row[0]);
    models.insert(row[1]);
    for (std::size_t i = 2; i < row.size(); ++i) {
      ++cells;
      const auto& c = row[i];
      const auto pm = c.find(" ± ");
      // d.ddd ± d.ddd, where " ± " is four bytes of UTF-8
      const bool good = pm == 5 && c.size() == pm + 4 + 5 && c[1] == '.' && c[pm + 5] == '.';
      bad += !good;
    }
  }
  o.check(metrics.header.size() == 9 && metrics.rows.size() == 10 && names.size() == 5 &&
              models.size() == 2 && cells == 70,
          "metrics.csv " + std::to_string(names.size()) + " metrics x " +
              std::to_string(models.size()) + " models x " +
              std::to_string(metrics.header.size() - 2) + " classes");
  o.check(bad == 0, "every cell 'mean ± half-width' with 3 decimals");

  bool square = true;
  for (const char* name : {"confusion_flat.csv", "confusion_hier.csv"}) {
    const auto cm = csv::read_file(run.out(std::string("evaluate/") + name));
    square = square && cm.header.size() == 8 && cm.rows.size() == 7;
    for (const auto& row : cm.rows) square = square && row.size() == 8;
  }
  o.check(square, "two 7x7 confusion tables");

  std::ifstream in(run.out("evaluate/metrics.json"));
  const auto j = nlohmann::json::parse(in);
  o.check(j.contains("flat") && j.contains("hierarchical") &&
              j.at("cross_coarse_mass").contains("difference"),
          "metrics.json carries both models and the signed difference");
  return o;
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.insert(std::stoi(item));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string only, known;
  std::string workdir = (fs::temp_directory_path() / "hvgg_acceptance").string();
  std::size_t workers = 1;
  bool network_only = false;
  app.add_flag("--network-only", network_only, "criterion 3: whole-network check alone");
  app.add_option("--only", only, "comma-separated criteria to run");
  app.add_option("--known-failures", known, "criteria allowed to fail without failing the run");
  app.add_option("--workdir", workdir, "scratch directory for stage runs");
  app.add_option("--workers", workers, "concurrent training runs for criterion 5");
  CLI11_PARSE(app, argc, argv);
  log::quiet() = true;

  const auto selected = parse_list(only);
  const auto allowed = parse_list(known);
  const fs::path wd = workdir;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"schedule fidelity", schedules},
      {"hierarchical loss", loss_equation},
      {"gradient suite", [&] { return gradients(network_only); }},
      {"architecture contract", architecture},
      {"synthetic end-to-end", [&] { return end_to_end(workers); }},
      {"preprocessing oracles", [&] { return preprocessing(wd); }},
      {"leakage and split", splits},
      {"metrics oracles", metric_oracles},
      {"determinism", [&] { return determinism(wd); }},
      {"report shape", [&] { return report_shape(wd); }},
  };

  std::cout << "precision: " << (kDouble ? "64-bit" : "32-bit") << '\n';
  int unexpected = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool expected = o.pass || allowed.count(id);
    unexpected += !expected;
    std::printf("%s %2d %-22s %7.1fs  %s%s\n", o.pass ? "PASS" : "FAIL", id,
                criteria[i].first.c_str(), secs, o.detail.c_str(),
                !o.pass && allowed.count(id) ? " [known failure]" : "");
    std::fflush(stdout);
  }
  return unexpected ? 1 : 0;
}
