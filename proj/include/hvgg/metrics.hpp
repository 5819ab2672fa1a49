#pragma once

// Per-class evaluation at the fine level, coarse-level confusion analysis and
// aggregation of repeated runs into "mean ± half-width" tables.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hvgg/hierarchy.hpp"

namespace hvgg {

struct Prediction {
  std::vector<double> fine_probs;
  // Coarse head output, or the lifted fine distribution for flat models.
  std::vector<double> coarse_probs;
  std::size_t true_fine = 0;
  std::size_t true_coarse = 0;

  std::size_t predicted_fine() const;
  std::size_t predicted_coarse() const;
};

struct PredictionBundle {
  std::size_t fine_classes = 0;
  std::size_t coarse_classes = 0;
  std::vector<Prediction> items;

  // Probabilities sum to 1 within 1e-6 and indices are in range.
  void validate() const;
  nlohmann::json to_json() const;
  static PredictionBundle from_json(const nlohmann::json& j);
};

enum class Level { coarse, fine };

/// Overall top-1 accuracy at one level.
double overall_accuracy(const PredictionBundle& bundle, Level level);

/// One-vs-rest accuracy of "predicted == c" against "true == c".
double per_class_accuracy(const PredictionBundle& bundle, std::size_t c);

/// Mann-Whitney AUC; absent when the truth holds a single class.
std::optional<double> auc_ovr(std::span<const double> scores, std::span<const bool> positive);
std::optional<double> auc_ovr(const PredictionBundle& bundle, std::size_t c);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};
/// ROC vertices from (0,0) to (1,1), one per distinct score threshold.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const bool> positive);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // Set when the corresponding denominator was zero and the value reported as 0.
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool f1_undefined = false;
};

PrecisionRecall precision_recall_f1(const PredictionBundle& bundle, std::size_t c);
PrecisionRecall precision_recall_f1(std::size_t tp, std::size_t fp, std::size_t fn);

struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;  // [true][predicted], row-major
  std::vector<double> normalized;     // rows divided by row sums
  std::vector<bool> empty_rows;

  double at(std::size_t truth, std::size_t predicted) const {
    return normalized[truth * classes + predicted];
  }
  static ConfusionMatrix from_counts(std::size_t classes, std::vector<std::uint64_t> counts);
};

ConfusionMatrix confusion(const PredictionBundle& bundle);

/// Mean over non-empty rows of the normalized mass predicted into a different
/// coarse category than the row's own.
double cross_coarse_mass(std::span<const double> normalized, std::size_t classes,
                         const ClassHierarchy& hierarchy,
                         std::span<const bool> skip_rows = {});
double cross_coarse_mass(const ConfusionMatrix& matrix, const ClassHierarchy& hierarchy);

enum class CiMethod { normal, student_t };

struct Interval {
  double mean = 0.0;
  double half_width = 0.0;
  bool single_run = false;
  std::size_t n = 0;
};

/// mean ± z * sd / sqrt(n), sd the sample standard deviation. z is 1.96 for
/// the normal method or the 0.975 Student-t quantile with n-1 dof.
Interval aggregate_ci(std::span<const double> values, CiMethod method = CiMethod::normal);

inline constexpr const char* kMetricNames[] = {"accuracy", "auc", "precision", "recall", "f1"};
inline constexpr std::size_t kMetricCount = 5;

struct Cell {
  std::optional<Interval> value;  // absent when undefined in every run
  std::string render() const;     // "0.941 ± 0.011" or "n/a"
};

/// One model family aggregated over its runs.
struct ModelReport {
  std::string model;
  std::vector<std::string> classes;
  // metrics[m][c] for m in kMetricNames order.
  std::vector<std::vector<Cell>> metrics;
  std::vector<ConfusionMatrix> run_confusions;
  std::vector<double> mean_confusion;  // mean of per-run normalized matrices
  std::vector<double> run_cross_coarse_mass;
  Interval cross_coarse;
  Interval coarse_accuracy;
  Interval fine_accuracy;
  // Per class, pooled over runs; empty when a class never occurs.
  std::vector<std::vector<RocPoint>> roc;

  nlohmann::json to_json() const;
  static ModelReport from_json(const nlohmann::json& j);
  bool operator==(const ModelReport& other) const { return to_json() == other.to_json(); }
};

ModelReport build_report(const std::string& model, std::span<const PredictionBundle> runs,
                         const ClassHierarchy& hierarchy, CiMethod method = CiMethod::normal);

struct ComparisonReport {
  ModelReport flat;
  ModelReport hierarchical;
  std::string config_hash;

  nlohmann::json to_json() const;
  static ComparisonReport from_json(const nlohmann::json& j);
};

/// Writes metrics.csv, metrics.json, confusion_flat.csv and confusion_hier.csv.
void render_report(const ComparisonReport& report, const std::filesystem::path& out_dir);

/// Table-II layout: header plus one row per metric x model.
std::vector<std::vector<std::string>> metrics_table(const ComparisonReport& report);
/// Table-III layout for one model.
std::vector<std::vector<std::string>> confusion_table(const ModelReport& report);

}  // namespace hvgg
