#include "hvgg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

#include "hvgg/csv.hpp"
#include "hvgg/error.hpp"

namespace hvgg {

namespace {

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void check_nonempty(const PredictionBundle& bundle) {
  if (bundle.items.empty()) throw std::invalid_argument("prediction bundle is empty");
}

}  // namespace

std::size_t Prediction::predicted_fine() const { return argmax(fine_probs); }
std::size_t Prediction::predicted_coarse() const { return argmax(coarse_probs); }

void PredictionBundle::validate() const {
  auto check = [](const std::vector<double>& p, std::size_t n, std::size_t i, const char* what) {
    if (p.size() != n) {
      throw DataError("prediction " + std::to_string(i) + ": " + what + " vector has " +
                      std::to_string(p.size()) + " entries, expected " + std::to_string(n));
    }
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-6) {
      throw DataError("prediction " + std::to_string(i) + ": " + what + " probabilities sum to " +
                      std::to_string(total));
    }
  };
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& p = items[i];
    check(p.fine_probs, fine_classes, i, "fine");
    check(p.coarse_probs, coarse_classes, i, "coarse");
    if (p.true_fine >= fine_classes || p.true_coarse >= coarse_classes) {
      throw DataError("prediction " + std::to_string(i) + ": true label out of range");
    }
  }
}

nlohmann::json PredictionBundle::to_json() const {
  nlohmann::json items_json = nlohmann::json::array();
  for (const auto& p : items) {
    items_json.push_back({{"fine_probs", p.fine_probs},
                          {"coarse_probs", p.coarse_probs},
                          {"true_fine", p.true_fine},
                          {"true_coarse", p.true_coarse}});
  }
  return {{"fine_classes", fine_classes}, {"coarse_classes", coarse_classes}, {"items", items_json}};
}

PredictionBundle PredictionBundle::from_json(const nlohmann::json& j) {
  PredictionBundle b;
  b.fine_classes = j.at("fine_classes").get<std::size_t>();
  b.coarse_classes = j.at("coarse_classes").get<std::size_t>();
  for (const auto& it : j.at("items")) {
    Prediction p;
    p.fine_probs = it.at("fine_probs").get<std::vector<double>>();
    p.coarse_probs = it.at("coarse_probs").get<std::vector<double>>();
    p.true_fine = it.at("true_fine").get<std::size_t>();
    p.true_coarse = it.at("true_coarse").get<std::size_t>();
    b.items.push_back(std::move(p));
  }
  return b;
}

double overall_accuracy(const PredictionBundle& bundle, Level level) {
  check_nonempty(bundle);
  std::size_t hits = 0;
  for (const auto& p : bundle.items) {
    hits += level == Level::fine ? p.predicted_fine() == p.true_fine
                                 : p.predicted_coarse() == p.true_coarse;
  }
  return static_cast<double>(hits) / static_cast<double>(bundle.items.size());
}

double per_class_accuracy(const PredictionBundle& bundle, std::size_t c) {
  check_nonempty(bundle);
  std::size_t agree = 0;
  for (const auto& p : bundle.items) {
    agree += (p.predicted_fine() == c) == (p.true_fine == c);
  }
  return static_cast<double>(agree) / static_cast<double>(bundle.items.size());
}

std::optional<double> auc_ovr(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) {
    throw std::invalid_argument("auc_ovr: scores and truth differ in length");
  }
  // Rank-sum form of the Mann-Whitney statistic; tied scores share mid-ranks,
  // which contributes exactly 0.5 per tied positive/negative pair.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        pos_rank_sum += mid_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(n_neg));
}

namespace {

void class_scores(const PredictionBundle& bundle, std::size_t c, std::vector<double>& scores,
                  std::vector<char>& truth) {
  for (const auto& p : bundle.items) {
    scores.push_back(p.fine_probs.at(c));
    truth.push_back(p.true_fine == c);
  }
}

}  // namespace

std::optional<double> auc_ovr(const PredictionBundle& bundle, std::size_t c) {
  check_nonempty(bundle);
  std::vector<double> scores;
  std::vector<char> truth;
  class_scores(bundle, c, scores, truth);
  // std::vector<bool> has no contiguous storage, so go through a bool array.
  std::unique_ptr<bool[]> flags(new bool[truth.size()]);
  std::copy(truth.begin(), truth.end(), flags.get());
  return auc_ovr(scores, std::span<const bool>(flags.get(), truth.size()));
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const bool> positive) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  const auto n_pos = static_cast<double>(std::count(positive.begin(), positive.end(), true));
  const auto n_neg = static_cast<double>(positive.size()) - n_pos;
  std::vector<RocPoint> curve{{0.0, 0.0}};
  if (n_pos == 0 || n_neg == 0) return {};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (positive[order[j]] ? tp : fp) += 1;
      ++j;
    }
    curve.push_back({fp / n_neg, tp / n_pos});
    i = j;
  }
  return curve;
}

PrecisionRecall precision_recall_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  PrecisionRecall r;
  const auto d = [](std::size_t x) { return static_cast<double>(x); };
  if (tp + fp == 0) {
    r.precision_undefined = true;
  } else {
    r.precision = d(tp) / d(tp + fp);
  }
  if (tp + fn == 0) {
    r.recall_undefined = true;
  } else {
    r.recall = d(tp) / d(tp + fn);
  }
  if (r.precision + r.recall == 0.0) {
    r.f1_undefined = true;
  } else {
    r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  }
  return r;
}

PrecisionRecall precision_recall_f1(const PredictionBundle& bundle, std::size_t c) {
  check_nonempty(bundle);
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& p : bundle.items) {
    const bool pred = p.predicted_fine() == c;
    const bool truth = p.true_fine == c;
    tp += pred && truth;
    fp += pred && !truth;
    fn += !pred && truth;
  }
  return precision_recall_f1(tp, fp, fn);
}

ConfusionMatrix ConfusionMatrix::from_counts(std::size_t classes, std::vector<std::uint64_t> counts) {
  if (counts.size() != classes * classes) {
    throw std::invalid_argument("confusion counts must be classes x classes");
  }
  ConfusionMatrix m;
  m.classes = classes;
  m.counts = std::move(counts);
  m.normalized.assign(classes * classes, 0.0);
  m.empty_rows.assign(classes, false);
  for (std::size_t i = 0; i < classes; ++i) {
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < classes; ++j) row += m.counts[i * classes + j];
    if (row == 0) {
      m.empty_rows[i] = true;
      continue;
    }
    for (std::size_t j = 0; j < classes; ++j) {
      m.normalized[i * classes + j] =
          static_cast<double>(m.counts[i * classes + j]) / static_cast<double>(row);
    }
  }
  return m;
}

ConfusionMatrix confusion(const PredictionBundle& bundle) {
  check_nonempty(bundle);
  const std::size_t k = bundle.fine_classes;
  std::vector<std::uint64_t> counts(k * k, 0);
  for (const auto& p : bundle.items) ++counts.at(p.true_fine * k + p.predicted_fine());
  return ConfusionMatrix::from_counts(k, std::move(counts));
}

double cross_coarse_mass(std::span<const double> normalized, std::size_t classes,
                         const ClassHierarchy& hierarchy, std::span<const bool> skip_rows) {
  if (classes != hierarchy.fine_count() || normalized.size() != classes * classes) {
    throw std::invalid_argument("confusion matrix does not match the hierarchy");
  }
  double total = 0.0;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < classes; ++i) {
    if (!skip_rows.empty() && skip_rows[i]) continue;
    double off = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      if (hierarchy.parent[j] != hierarchy.parent[i]) off += normalized[i * classes + j];
    }
    total += off;
    ++rows;
  }
  return rows ? total / static_cast<double>(rows) : 0.0;
}

double cross_coarse_mass(const ConfusionMatrix& matrix, const ClassHierarchy& hierarchy) {
  std::unique_ptr<bool[]> skip(new bool[matrix.classes]);
  std::copy(matrix.empty_rows.begin(), matrix.empty_rows.end(), skip.get());
  return cross_coarse_mass(matrix.normalized, matrix.classes, hierarchy,
                           std::span<const bool>(skip.get(), matrix.classes));
}

Interval aggregate_ci(std::span<const double> values, CiMethod method) {
  if (values.empty()) throw std::invalid_argument("aggregate_ci needs at least one value");
  Interval r;
  r.n = values.size();
  // Sorting first makes the floating-point sum independent of input order.
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(r.n);
  r.mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
  // The rounded mean of equal values can miss them by an ulp.
  if (sorted.front() == sorted.back()) r.mean = sorted.front();
  if (r.n == 1) {
    r.single_run = true;
    return r;
  }
  double ss = 0.0;
  for (double v : sorted) ss += (v - r.mean) * (v - r.mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  double z = 1.96;
  if (method == CiMethod::student_t) {
    boost::math::students_t dist(n - 1.0);
    z = boost::math::quantile(dist, 0.975);
  }
  r.half_width = z * sd / std::sqrt(n);
  return r;
}

std::string Cell::render() const {
  if (!value) return "n/a";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f ± %.3f", value->mean, value->half_width);
  return buf;
}

namespace {

nlohmann::json interval_json(const Interval& v) {
  return {{"mean", v.mean}, {"half_width", v.half_width}, {"n", v.n}, {"single_run", v.single_run}};
}

Interval interval_from(const nlohmann::json& j) {
  Interval v;
  v.mean = j.at("mean").get<double>();
  v.half_width = j.at("half_width").get<double>();
  v.n = j.at("n").get<std::size_t>();
  v.single_run = j.at("single_run").get<bool>();
  return v;
}

}  // namespace

nlohmann::json ModelReport::to_json() const {
  nlohmann::json j;
  j["model"] = model;
  j["classes"] = classes;
  nlohmann::json m = nlohmann::json::object();
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    nlohmann::json row = nlohmann::json::array();
    for (const auto& cell : metrics[k]) {
      row.push_back(cell.value ? interval_json(*cell.value) : nlohmann::json());
    }
    m[kMetricNames[k]] = row;
  }
  j["metrics"] = m;
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& c : run_confusions) {
    runs.push_back({{"counts", c.counts}});
  }
  j["run_confusions"] = runs;
  j["mean_confusion"] = mean_confusion;
  j["run_cross_coarse_mass"] = run_cross_coarse_mass;
  j["cross_coarse_mass"] = interval_json(cross_coarse);
  j["coarse_accuracy"] = interval_json(coarse_accuracy);
  j["fine_accuracy"] = interval_json(fine_accuracy);
  nlohmann::json roc_json = nlohmann::json::array();
  for (const auto& curve : roc) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : curve) pts.push_back({p.fpr, p.tpr});
    roc_json.push_back(pts);
  }
  j["roc"] = roc_json;
  return j;
}

ModelReport ModelReport::from_json(const nlohmann::json& j) {
  ModelReport r;
  r.model = j.at("model").get<std::string>();
  r.classes = j.at("classes").get<std::vector<std::string>>();
  for (const char* name : kMetricNames) {
    std::vector<Cell> row;
    for (const auto& cell : j.at("metrics").at(name)) {
      row.push_back(cell.is_null() ? Cell{} : Cell{interval_from(cell)});
    }
    r.metrics.push_back(std::move(row));
  }
  for (const auto& c : j.at("run_confusions")) {
    r.run_confusions.push_back(ConfusionMatrix::from_counts(
        r.classes.size(), c.at("counts").get<std::vector<std::uint64_t>>()));
  }
  r.mean_confusion = j.at("mean_confusion").get<std::vector<double>>();
  r.run_cross_coarse_mass = j.at("run_cross_coarse_mass").get<std::vector<double>>();
  r.cross_coarse = interval_from(j.at("cross_coarse_mass"));
  r.coarse_accuracy = interval_from(j.at("coarse_accuracy"));
  r.fine_accuracy = interval_from(j.at("fine_accuracy"));
  for (const auto& curve : j.at("roc")) {
    std::vector<RocPoint> pts;
    for (const auto& p : curve) pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    r.roc.push_back(std::move(pts));
  }
  return r;
}

ModelReport build_report(const std::string& model, std::span<const PredictionBundle> runs,
                         const ClassHierarchy& hierarchy, CiMethod method) {
  if (runs.empty()) throw std::invalid_argument("build_report needs at least one run");
  const std::size_t k = hierarchy.fine_count();
  ModelReport r;
  r.model = model;
  r.classes = hierarchy.fine_names;

  // values[m][c] collects defined per-run values.
  std::vector<std::vector<std::vector<double>>> values(
      kMetricCount, std::vector<std::vector<double>>(k));
  std::vector<double> coarse_acc, fine_acc;
  r.mean_confusion.assign(k * k, 0.0);
  for (const auto& bundle : runs) {
    if (bundle.fine_classes != k || bundle.coarse_classes != hierarchy.coarse_count()) {
      throw std::invalid_argument("prediction bundle class counts do not match the hierarchy");
    }
    for (std::size_t c = 0; c < k; ++c) {
      values[0][c].push_back(per_class_accuracy(bundle, c));
      if (auto auc = auc_ovr(bundle, c)) values[1][c].push_back(*auc);
      const auto prf = precision_recall_f1(bundle, c);
      values[2][c].push_back(prf.precision);
      values[3][c].push_back(prf.recall);
      values[4][c].push_back(prf.f1);
    }
    auto cm = confusion(bundle);
    for (std::size_t i = 0; i < k * k; ++i) {
      r.mean_confusion[i] += cm.normalized[i] / static_cast<double>(runs.size());
    }
    r.run_cross_coarse_mass.push_back(cross_coarse_mass(cm, hierarchy));
    r.run_confusions.push_back(std::move(cm));
    coarse_acc.push_back(overall_accuracy(bundle, Level::coarse));
    fine_acc.push_back(overall_accuracy(bundle, Level::fine));
  }
  for (std::size_t m = 0; m < kMetricCount; ++m) {
    std::vector<Cell> row;
    for (std::size_t c = 0; c < k; ++c) {
      Cell cell;
      if (!values[m][c].empty()) cell.value = aggregate_ci(values[m][c], method);
      row.push_back(cell);
    }
    r.metrics.push_back(std::move(row));
  }
  r.cross_coarse = aggregate_ci(r.run_cross_coarse_mass, method);
  r.coarse_accuracy = aggregate_ci(coarse_acc, method);
  r.fine_accuracy = aggregate_ci(fine_acc, method);

  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> scores;
    std::vector<char> truth;
    for (const auto& bundle : runs) class_scores(bundle, c, scores, truth);
    std::unique_ptr<bool[]> flags(new bool[truth.size()]);
    std::copy(truth.begin(), truth.end(), flags.get());
    r.roc.push_back(roc_curve(scores, std::span<const bool>(flags.get(), truth.size())));
  }
  return r;
}

nlohmann::json ComparisonReport::to_json() const {
  const double f = flat.cross_coarse.mean, h = hierarchical.cross_coarse.mean;
  return {{"config_hash", config_hash},
          {"flat", flat.to_json()},
          {"hierarchical", hierarchical.to_json()},
          {"cross_coarse_mass", {{"flat", f}, {"hierarchical", h}, {"difference", h - f}}}};
}

ComparisonReport ComparisonReport::from_json(const nlohmann::json& j) {
  ComparisonReport r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.flat = ModelReport::from_json(j.at("flat"));
  r.hierarchical = ModelReport::from_json(j.at("hierarchical"));
  return r;
}

namespace {

void check_matching(const ComparisonReport& report) {
  if (report.flat.classes != report.hierarchical.classes) {
    throw DataError("flat and hierarchical reports cover different class sets");
  }
}

}  // namespace

std::vector<std::vector<std::string>> metrics_table(const ComparisonReport& report) {
  check_matching(report);
  std::vector<std::vector<std::string>> table;
  std::vector<std::string> header{"metric", "model"};
  header.insert(header.end(), report.flat.classes.begin(), report.flat.classes.end());
  table.push_back(header);
  for (std::size_t m = 0; m < kMetricCount; ++m) {
    for (const ModelReport* mr : {&report.flat, &report.hierarchical}) {
      std::vector<std::string> row{kMetricNames[m], mr->model};
      for (const auto& cell : mr->metrics.at(m)) row.push_back(cell.render());
      table.push_back(std::move(row));
    }
  }
  return table;
}

std::vector<std::vector<std::string>> confusion_table(const ModelReport& report) {
  const std::size_t k = report.classes.size();
  std::vector<std::vector<std::string>> table;
  std::vector<std::string> header{"true\\predicted"};
  header.insert(header.end(), report.classes.begin(), report.classes.end());
  table.push_back(header);
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<std::string> row{report.classes[i]};
    for (std::size_t j = 0; j < k; ++j) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3f", report.mean_confusion[i * k + j]);
      row.push_back(buf);
    }
    table.push_back(std::move(row));
  }
  return table;
}

void render_report(const ComparisonReport& report, const std::filesystem::path& out_dir) {
  check_matching(report);
  std::filesystem::create_directories(out_dir);
  const std::vector<std::string> comments{" config_hash: " + report.config_hash};
  auto write = [&](const std::string& name, std::vector<std::vector<std::string>> table) {
    auto header = std::move(table.front());
    table.erase(table.begin());
    csv::write_file(out_dir / name, header, table, comments);
  };
  write("metrics.csv", metrics_table(report));
  write("confusion_flat.csv", confusion_table(report.flat));
  write("confusion_hier.csv", confusion_table(report.hierarchical));
  std::ofstream out(out_dir / "metrics.json");
  if (!out) throw DataError("cannot write " + (out_dir / "metrics.json").string());
  out << report.to_json().dump(2) << '\n';
}

}  // namespace hvgg
