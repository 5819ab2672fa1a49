#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "hvgg/csv.hpp"
#include "hvgg/error.hpp"
#include "hvgg/metrics.hpp"
#include "hvgg/model.hpp"

using namespace hvgg;

namespace {

const ClassHierarchy kTree = ClassHierarchy::gastrointestinal();

std::vector<double> one_hot(std::size_t k, std::size_t i, double peak = 1.0) {
  std::vector<double> v(k, k > 1 ? (1.0 - peak) / double(k - 1) : 0.0);
  v[i] = peak;
  return v;
}

Prediction make(std::size_t truth, std::size_t predicted, std::size_t k = 7, double peak = 0.9) {
  Prediction p;
  p.fine_probs = one_hot(k, predicted, peak);
  if (k == 7) {
    p.coarse_probs = lift_to_coarse(p.fine_probs, kTree);
    p.true_coarse = kTree.parent[truth];
  } else {
    p.coarse_probs = p.fine_probs;
    p.true_coarse = truth;
  }
  p.true_fine = truth;
  return p;
}

PredictionBundle bundle_of(std::vector<Prediction> items, std::size_t k = 7) {
  PredictionBundle b;
  b.fine_classes = k;
  b.coarse_classes = k == 7 ? 3 : k;
  b.items = std::move(items);
  return b;
}

PredictionBundle random_bundle(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> cls(0, 6);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::vector<Prediction> items;
  for (std::size_t i = 0; i < n; ++i) {
    Prediction p;
    p.fine_probs.resize(7);
    double total = 0;
    for (auto& v : p.fine_probs) total += (v = u(rng));
    for (auto& v : p.fine_probs) v /= total;
    p.coarse_probs = lift_to_coarse(p.fine_probs, kTree);
    p.true_fine = cls(rng);
    p.true_coarse = kTree.parent[p.true_fine];
    items.push_back(std::move(p));
  }
  return bundle_of(std::move(items));
}

// Pairwise counting, independent of the rank-sum implementation.
double auc_oracle(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return wins / double(pos.size() * neg.size());
}

std::optional<double> auc_of(const std::vector<double>& pos, const std::vector<double>& neg) {
  std::vector<double> scores = pos;
  scores.insert(scores.end(), neg.begin(), neg.end());
  std::unique_ptr<bool[]> flags(new bool[scores.size()]);
  for (std::size_t i = 0; i < scores.size(); ++i) flags[i] = i < pos.size();
  return auc_ovr(scores, std::span<const bool>(flags.get(), scores.size()));
}

}  // namespace

TEST_CASE("per_class_accuracy") {
  SUBCASE("all correct gives 1 for every class") {
    std::vector<Prediction> items;
    for (std::size_t c = 0; c < 7; ++c) items.push_back(make(c, c));
    const auto b = bundle_of(items);
    for (std::size_t c = 0; c < 7; ++c) CHECK(per_class_accuracy(b, c) == 1.0);
  }
  SUBCASE("complement of truth in two classes gives 0") {
    const auto b = bundle_of({make(0, 1, 2), make(1, 0, 2), make(0, 1, 2)}, 2);
    CHECK(per_class_accuracy(b, 0) == 0.0);
    CHECK(per_class_accuracy(b, 1) == 0.0);
  }
  SUBCASE("ten hand-built predictions match a counting oracle") {
    const std::vector<std::pair<std::size_t, std::size_t>> pairs{
        {0, 0}, {0, 1}, {1, 1}, {2, 0}, {3, 3}, {4, 3}, {5, 5}, {6, 5}, {6, 6}, {2, 2}};
    std::vector<Prediction> items;
    for (auto [t, p] : pairs) items.push_back(make(t, p));
    const auto b = bundle_of(items);
    for (std::size_t c = 0; c < 7; ++c) {
      int agree = 0;
      for (auto [t, p] : pairs) agree += (t == c) == (p == c);
      CHECK(per_class_accuracy(b, c) == doctest::Approx(agree / 10.0));
    }
  }
  CHECK_THROWS(per_class_accuracy(bundle_of({}), 0));
}

TEST_CASE("auc_ovr") {
  CHECK(*auc_of({0.9, 0.8}, {0.1, 0.2}) == 1.0);
  CHECK(*auc_of({0.8, 0.2}, {0.6, 0.4}) == doctest::Approx(0.5));
  CHECK(*auc_of({0.3, 0.3, 0.3}, {0.3, 0.3}) == doctest::Approx(0.5));
  CHECK_FALSE(auc_of({0.1, 0.5}, {}).has_value());
  CHECK_FALSE(auc_of({}, {0.1}).has_value());

  SUBCASE("matches pairwise oracle on random tied scores") {
    Rng rng(3);
    std::uniform_int_distribution<int> q(0, 9);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> pos, neg;
      for (int i = 0; i < 13; ++i) pos.push_back(q(rng) / 10.0);
      for (int i = 0; i < 17; ++i) neg.push_back(q(rng) / 10.0);
      CHECK(*auc_of(pos, neg) == doctest::Approx(auc_oracle(pos, neg)).epsilon(1e-12));
    }
  }
  SUBCASE("invariant under strictly increasing transforms") {
    std::vector<double> pos{0.7, 0.2, 0.9, 0.4}, neg{0.1, 0.5, 0.3};
    auto f = [](std::vector<double> v) {
      for (auto& x : v) x = std::exp(3 * x) + 1;
      return v;
    };
    CHECK(*auc_of(pos, neg) == doctest::Approx(*auc_of(f(pos), f(neg))));
  }
  SUBCASE("trapezoid area under the ROC vertices equals AUC") {
    std::vector<double> scores{0.9, 0.8, 0.8, 0.6, 0.4, 0.4, 0.2, 0.1};
    bool flags[] = {true, false, true, true, false, true, false, false};
    const auto curve = roc_curve(scores, flags);
    double area = 0;
    for (std::size_t i = 1; i < curve.size(); ++i)
      area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2;
    CHECK(curve.back().fpr == 1.0);
    CHECK(curve.back().tpr == 1.0);
    CHECK(area == doctest::Approx(*auc_ovr(scores, flags)));
  }
}

TEST_CASE("precision_recall_f1") {
  std::vector<Prediction> perfect;
  for (std::size_t c = 0; c < 7; ++c) perfect.push_back(make(c, c));
  const auto p = precision_recall_f1(bundle_of(perfect), 3);
  CHECK(p.precision == 1.0);
  CHECK(p.recall == 1.0);
  CHECK(p.f1 == 1.0);

  const auto half = precision_recall_f1(1, 1, 1);
  CHECK(half.f1 == doctest::Approx(0.5));

  const auto r = precision_recall_f1(3, 1, 2);
  CHECK(r.precision == doctest::Approx(0.75));
  CHECK(r.recall == doctest::Approx(0.6));
  CHECK(r.f1 == doctest::Approx(2 * 0.75 * 0.6 / 1.35));

  const auto none = precision_recall_f1(0, 0, 4);
  CHECK(none.precision == 0.0);
  CHECK(none.precision_undefined);
  CHECK_FALSE(none.recall_undefined);
  CHECK(none.f1_undefined);
}

TEST_CASE("confusion") {
  std::vector<Prediction> perfect;
  for (std::size_t c = 0; c < 7; ++c) perfect.push_back(make(c, c));
  const auto id = confusion(bundle_of(perfect));
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 7; ++j) CHECK(id.at(i, j) == (i == j ? 1.0 : 0.0));

  SUBCASE("uniform random predictions approach 1/7 per cell") {
    Rng rng(11);
    std::uniform_int_distribution<std::size_t> cls(0, 6);
    std::vector<Prediction> items;
    for (int i = 0; i < 70000; ++i) items.push_back(make(cls(rng), cls(rng)));
    const auto m = confusion(bundle_of(items));
    for (std::size_t i = 0; i < 7; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        CHECK(m.at(i, j) == doctest::Approx(1.0 / 7).epsilon(0.05));
        row += m.at(i, j);
      }
      CHECK(row == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  SUBCASE("missing classes leave flagged zero rows") {
    const auto m = confusion(bundle_of({make(0, 0), make(1, 2)}));
    CHECK(m.empty_rows[3]);
    CHECK_FALSE(m.empty_rows[0]);
    for (std::size_t j = 0; j < 7; ++j) CHECK(m.at(3, j) == 0.0);
  }
  SUBCASE("recall equals the normalized diagonal") {
    const auto b = random_bundle(500, 4);
    const auto m = confusion(b);
    for (std::size_t c = 0; c < 7; ++c)
      CHECK(precision_recall_f1(b, c).recall == doctest::Approx(m.at(c, c)));
  }
}

TEST_CASE("cross_coarse_mass") {
  std::vector<double> identity(49, 0.0), uniform(49, 1.0 / 7), block(49, 0.0);
  for (std::size_t i = 0; i < 7; ++i) identity[i * 7 + i] = 1.0;
  for (std::size_t i = 0; i < 7; ++i) {
    const auto kids = kTree.children(kTree.parent[i]);
    for (auto j : kids) block[i * 7 + j] = 1.0 / double(kids.size());
  }
  CHECK(cross_coarse_mass(identity, 7, kTree) == 0.0);
  CHECK(cross_coarse_mass(block, 7, kTree) == 0.0);
  // Rows under a 3-child parent leak 4/7, rows under 2-child parents leak 5/7.
  const double expected = (3 * 4.0 / 7 + 4 * 5.0 / 7) / 7;
  CHECK(expected == doctest::Approx(32.0 / 49.0));
  CHECK(cross_coarse_mass(uniform, 7, kTree) == doctest::Approx(expected).epsilon(1e-12));

  SUBCASE("within plus across is 1 per row") {
    const auto m = confusion(random_bundle(300, 8));
    for (std::size_t i = 0; i < 7; ++i) {
      double within = 0, across = 0;
      for (std::size_t j = 0; j < 7; ++j)
        (kTree.parent[i] == kTree.parent[j] ? within : across) += m.at(i, j);
      CHECK(within + across == doctest::Approx(1.0));
    }
  }
}

TEST_CASE("aggregate_ci") {
  // Exactly zero, not merely small: 0.42 * 10 / 10 rounds away from 0.42.
  for (double v : {0.42, 0.1, 0.7, 1.0 / 3.0}) {
    const std::vector<double> same(10, v);
    CHECK(aggregate_ci(same).half_width == 0.0);
    CHECK(aggregate_ci(same).mean == v);
  }

  const std::vector<double> two{0.0, 1.0};
  const auto r = aggregate_ci(two);
  CHECK(r.mean == 0.5);
  CHECK(r.half_width == doctest::Approx(1.96 * std::sqrt(0.5) / std::sqrt(2.0)));
  CHECK(r.half_width == doctest::Approx(0.980).epsilon(1e-3));

  std::vector<double> tenth;
  for (int i = 1; i <= 10; ++i) tenth.push_back(i / 10.0);
  CHECK(aggregate_ci(tenth).mean == doctest::Approx(0.55));

  const std::vector<double> one{0.3};
  CHECK(aggregate_ci(one).single_run);
  CHECK(aggregate_ci(one).half_width == 0.0);

  // t(0.975, 1 dof) = 12.706.
  CHECK(aggregate_ci(two, CiMethod::student_t).half_width ==
        doctest::Approx(12.7062 * std::sqrt(0.5) / std::sqrt(2.0)).epsilon(1e-4));

  std::vector<double> shuffled = tenth;
  std::shuffle(shuffled.begin(), shuffled.end(), Rng(5));
  CHECK(aggregate_ci(shuffled).mean == aggregate_ci(tenth).mean);
  CHECK(aggregate_ci(shuffled).half_width == aggregate_ci(tenth).half_width);
  CHECK_THROWS(aggregate_ci(std::vector<double>{}));
}

TEST_CASE("report layout and serialization") {
  std::vector<PredictionBundle> flat, hier;
  for (std::uint64_t s = 0; s < 3; ++s) {
    flat.push_back(random_bundle(200, s));
    hier.push_back(random_bundle(200, s + 100));
  }
  ComparisonReport report{build_report("flat", flat, kTree), build_report("hierarchical", hier, kTree),
                          "0123456789abcdef"};
  for (const auto* mr : {&report.flat, &report.hierarchical}) {
    for (const auto& row : mr->metrics)
      for (const auto& cell : row) {
        REQUIRE(cell.value);
        CHECK(cell.value->mean >= 0.0);
        CHECK(cell.value->mean <= 1.0);
        CHECK(cell.value->half_width >= 0.0);
      }
  }

  const auto table = metrics_table(report);
  CHECK(table.size() == 11);  // header + 5 metrics x 2 models
  for (std::size_t r = 1; r < table.size(); ++r) {
    CHECK(table[r].size() == 9);
    for (std::size_t c = 2; c < 9; ++c) {
      const auto& cell = table[r][c];
      const auto sep = cell.find(" ± ");
      REQUIRE(sep != std::string::npos);
      CHECK(cell.size() - cell.find('.') - 1 > 3);
      CHECK(cell.substr(0, sep).size() - cell.find('.') - 1 == 3);
      CHECK(cell.size() - cell.rfind('.') - 1 == 3);
    }
  }

  const auto back = ComparisonReport::from_json(report.to_json());
  CHECK(back.flat == report.flat);
  CHECK(back.hierarchical == report.hierarchical);
  CHECK(back.config_hash == report.config_hash);

  const auto dir = std::filesystem::temp_directory_path() / "hvgg_test_metrics";
  std::filesystem::remove_all(dir);
  render_report(report, dir);
  for (auto name : {"metrics.csv", "metrics.json", "confusion_flat.csv", "confusion_hier.csv"})
    CHECK(std::filesystem::exists(dir / name));
  const auto csv_table = csv::read_file(dir / "metrics.csv");
  CHECK(csv_table.rows.size() == 10);
  CHECK(csv_table.header.size() == 9);
  CHECK(csv_table.comments.at(0).find("0123456789abcdef") != std::string::npos);
  std::ifstream js(dir / "metrics.json");
  const auto parsed = ComparisonReport::from_json(nlohmann::json::parse(js));
  CHECK(parsed.flat == report.flat);

  auto broken = report;
  broken.hierarchical.classes.pop_back();
  CHECK_THROWS_AS(render_report(broken, dir), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("AUC undefined for absent class shows n/a") {
  std::vector<Prediction> items;
  for (int i = 0; i < 5; ++i) items.push_back(make(0, 0));
  items.push_back(make(1, 1));
  const std::vector<PredictionBundle> runs{bundle_of(items)};
  const auto r = build_report("flat", runs, kTree);
  CHECK_FALSE(r.metrics[1][4].value.has_value());
  CHECK(r.metrics[1][4].render() == "n/a");
  CHECK(r.metrics[1][0].value.has_value());
}

TEST_CASE("PredictionBundle validation") {
  auto b = bundle_of({make(0, 0)});
  CHECK_NOTHROW(b.validate());
  b.items[0].fine_probs[0] += 0.01;
  CHECK_THROWS_AS(b.validate(), DataError);
}
