#include <doctest.h>

#include "nowcast/verif.hpp"
#include "oracles.hpp"

using namespace nowcast;

namespace {

ThresholdConfusion tc(std::int64_t h, std::int64_t m, std::int64_t fa, std::int64_t cn = 0,
                      Threshold t = Threshold::Over1mm) {
  return {h, m, fa, cn, t};
}

bool exact(const MetricValue& v, std::int64_t num, std::int64_t den) {
  return v.exact && v.exact->num() == num && v.exact->den() == den;
}

}  // namespace

TEST_CASE("ratio arithmetic stays exact") {
  const Ratio a(6, 8), b(1, 2);
  CHECK(a.num() == 3);
  CHECK(a.den() == 4);
  CHECK(a + b == Ratio(5, 4));
  CHECK(a - b == Ratio(1, 4));
  CHECK(a * b == Ratio(3, 8));
  CHECK(a / b == Ratio(3, 2));
  CHECK_THROWS(Ratio(1, 0));
}

TEST_CASE("confusion counting") {
  ClassGrid pred(4, 4, 1), truth(4, 4, 0);
  for (int i = 8; i < 16; ++i) truth.labels[i] = 1;
  const auto c = confusions(pred, truth, ValidityMask(4, 4));
  CHECK(c.over1.hit == 8);
  CHECK(c.over1.false_alarm == 8);
  CHECK(c.over1.miss == 0);
  CHECK(c.over10.total() == 16);
  CHECK(c.over10.correct_negative == 16);

  const auto same = confusions(truth, truth, ValidityMask(4, 4));
  CHECK(same.over1.miss == 0);
  CHECK(same.over1.false_alarm == 0);
  CHECK(same.over10.miss == 0);

  ValidityMask one(4, 4, false);
  one.valid[5] = 1;
  CHECK(confusions(pred, truth, one).over1.total() == 1);

  CHECK_THROWS_AS(confusions(ClassGrid(3, 3), truth, ValidityMask(4, 4)), InvalidInput);
}

TEST_CASE("modified scores on the worked examples") {
  const auto pod = modified_pod(tc(3, 1, 0), tc(1, 1, 0, 0, Threshold::Over10mm));
  CHECK(exact(pod, 5, 8));
  CHECK(*pod.value == 0.625);
  const auto far = modified_far(tc(3, 0, 1), tc(1, 0, 1, 0, Threshold::Over10mm));
  CHECK(exact(far, 3, 8));
  CHECK(*far.value == 0.375);
  const auto f1 = modified_f1(tc(3, 1, 1), tc(1, 1, 1, 0, Threshold::Over10mm));
  CHECK(exact(f1, 5, 8));
  CHECK(*f1.value == 0.625);
}

TEST_CASE("modified scores edge cases") {
  CHECK(*modified_pod(tc(4, 0, 0), tc(2, 0, 0)).value == 1.0);
  CHECK(*modified_f1(tc(4, 0, 0), tc(2, 0, 0)).value == 1.0);
  CHECK(*modified_far(tc(4, 2, 0), tc(2, 1, 0)).value == 0.0);
  CHECK_FALSE(modified_pod(tc(0, 0, 3, 5), tc(0, 0, 1, 7)).defined());
  CHECK_FALSE(modified_far(tc(0, 3, 0, 5), tc(0, 1, 0, 7)).defined());
  // one threshold undefined: the other term stands alone and the result is flagged
  const auto partial = modified_pod(tc(3, 1, 0), tc(0, 0, 0, 9));
  CHECK(partial.partial);
  CHECK(exact(partial, 3, 4));
}

TEST_CASE("performance diagram points") {
  const auto perfect = diagram_point(tc(5, 0, 0), tc(2, 0, 0));
  CHECK(exact(perfect.csi, 1, 1));
  CHECK(exact(perfect.bias, 1, 1));
  // POD = SR = 0.75 on one threshold, the other undefined
  const auto t = threshold_point(tc(3, 1, 1));
  CHECK(*t.pod == Ratio(3, 4));
  CHECK(*t.success_ratio == Ratio(3, 4));
  CHECK(*t.csi == Ratio(3, 5));
  CHECK(*t.bias == Ratio(1, 1));
  const auto under = threshold_point(tc(1, 1, 0));
  CHECK(*under.bias == Ratio(1, 2));
  const auto p = diagram_point(tc(3, 1, 1), tc(0, 0, 0, 4));
  CHECK(p.csi.partial);
  CHECK(*p.csi.value == doctest::Approx(0.6).epsilon(1e-15));
  // no hits: SR = 0, CSI = 0, bias falls back to the count form
  const auto none = threshold_point(tc(0, 2, 3));
  CHECK(*none.csi == Ratio(0, 1));
  CHECK(*none.bias == Ratio(3, 2));
}

TEST_CASE("metrics agree with the rational oracle on random grids") {
  std::mt19937_64 rng(77);
  std::discrete_distribution<int> cls({6, 3, 1});
  for (int trial = 0; trial < 200; ++trial) {
    const ClassGrid pred = oracle::random_grid(rng, 8, 8, cls);
    const ClassGrid truth = oracle::random_grid(rng, 8, 8, cls);
    ValidityMask mask(8, 8);
    for (auto& v : mask.valid) v = (rng() % 5) != 0;
    const auto c = confusions(pred, truth, mask);
    const auto o1 = oracle::brute_counts(pred, truth, mask, 1);
    const auto o10 = oracle::brute_counts(pred, truth, mask, 2);
    CHECK(c.over1.hit == o1.h);
    CHECK(c.over10.false_alarm == o10.fa);
    CHECK(oracle::same(modified_pod(c.over1, c.over10), oracle::average(oracle::pod(o1), oracle::pod(o10))));
    CHECK(oracle::same(modified_far(c.over1, c.over10), oracle::average(oracle::far(o1), oracle::far(o10))));
    CHECK(oracle::same(modified_f1(c), oracle::average(oracle::f1(o1), oracle::f1(o10))));
    const auto d = diagram_point(c.over1, c.over10);
    CHECK(oracle::same(d.csi, oracle::average(oracle::csi(o1), oracle::csi(o10))));
    CHECK(oracle::same(d.bias, oracle::average(oracle::bias(o1), oracle::bias(o10))));
    CHECK(oracle::same(d.success_ratio, oracle::average(oracle::sr(o1), oracle::sr(o10))));
  }
}

TEST_CASE("stratified report pools counts per cell") {
  const auto data = make_dataset({1, 1, 0, 0, 0, 1}, 21, {16, 16});
  std::vector<const Scenario*> refs;
  std::vector<std::vector<ClassGrid>> preds;
  std::vector<int> labels;
  for (const auto& s : data) {
    refs.push_back(&s);
    std::vector<ClassGrid> p;
    for (int l = 1; l <= kNumLeadTimes; ++l) p.push_back(s.truth_classes(l > 3 ? 1 : l));
    preds.push_back(p);
    labels.push_back(static_cast<int>(s.label));
  }
  const auto rep = stratified_report(preds, refs, labels);
  REQUIRE(rep.cells.size() == 36);
  int filled = 0;
  for (const auto& cell : rep.cells) filled += cell.samples > 0;
  CHECK(filled == 18);

  // oracle on one cell
  const Scenario& s = data[1];
  const auto o1 = oracle::brute_counts(preds[1][4], s.truth_classes(5), s.mask, 1);
  const auto o10 = oracle::brute_counts(preds[1][4], s.truth_classes(5), s.mask, 2);
  const auto& cell = rep.cell(static_cast<int>(s.label), 5);
  CHECK(cell.samples == 1);
  CHECK(oracle::same(cell.f1, oracle::average(oracle::f1(o1), oracle::f1(o10))));

  // pooling a duplicated sample leaves every ratio unchanged
  const auto twice = stratified_report({preds[1], preds[1]}, {refs[1], refs[1]}, {labels[1], labels[1]});
  const auto& c2 = twice.cell(labels[1], 5);
  CHECK(c2.samples == 2);
  CHECK(c2.f1.exact == cell.f1.exact);
  CHECK(c2.point.csi.exact == cell.point.csi.exact);

  const auto back = StratifiedReport::from_json(rep.to_json());
  CHECK(back.to_csv() == rep.to_csv());
  CHECK_THROWS_AS(stratified_report({}, {}, {}), EmptyDataset);
}

TEST_CASE("single-sample report has one populated row per lead") {
  const auto data = make_dataset({0, 1, 0, 0, 0, 0}, 4, {16, 16});
  std::vector<ClassGrid> p;
  for (int l = 1; l <= kNumLeadTimes; ++l) p.push_back(data[0].truth_classes(l));
  const auto rep = stratified_report({p}, {&data[0]}, {1});
  int defined = 0;
  for (const auto& c : rep.cells) defined += c.samples > 0;
  CHECK(defined == kNumLeadTimes);
  const std::string csv = rep.to_csv();
  CHECK(csv.rfind("rain_type,lead_time,samples,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 37);
}

TEST_CASE("diagram geometry satisfies the CSI identity") {
  const auto g = performance_diagram_geometry(40);
  for (const auto& line : g.at("csi_contours")) {
    const double csi = line.at("csi").get<double>();
    for (const auto& pt : line.at("points")) {
      const double sr = pt.at(0).get<double>(), pod = pt.at(1).get<double>();
      CHECK(std::abs(1.0 / (1.0 / sr + 1.0 / pod - 1.0) - csi) < 1e-6);
    }
  }
  CHECK(g.at("bias_rays").size() == kBiasRays.size());
}
