#include "nowcast/verif.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace nowcast {

namespace {

using i128 = __int128;

std::int64_t narrow(i128 v) {
  if (v > std::numeric_limits<std::int64_t>::max() || v < std::numeric_limits<std::int64_t>::min()) {
    throw InvalidInput("ratio overflow");
  }
  return static_cast<std::int64_t>(v);
}

Ratio make_ratio(i128 num, i128 den) {
  if (den == 0) throw InvalidInput("ratio with zero denominator");
  if (den < 0) {
    num = -num;
    den = -den;
  }
  i128 a = num < 0 ? -num : num, b = den;
  while (b != 0) {
    const i128 t = a % b;
    a = b;
    b = t;
  }
  if (a > 1) {
    num /= a;
    den /= a;
  }
  return Ratio(narrow(num), narrow(den));
}

// Averages the defined terms; flags partial when exactly one is missing.
MetricValue average_terms(const std::optional<Ratio>& a, const std::optional<Ratio>& b) {
  MetricValue m;
  if (a && b) {
    m.exact = (*a + *b) * Ratio(1, 2);
  } else if (a || b) {
    m.exact = a ? *a : *b;
    m.partial = true;
  }
  if (m.exact) m.value = m.exact->to_double();
  return m;
}

std::optional<Ratio> safe_ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return std::nullopt;
  return Ratio(num, den);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fmt(const MetricValue& m) { return m.value ? fmt(*m.value) : "NA"; }

}  // namespace

Ratio::Ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) throw InvalidInput("ratio with zero denominator");
  i128 n = num, d = den;
  if (d < 0) {
    n = -n;
    d = -d;
  }
  i128 a = n < 0 ? -n : n, b = d;
  while (b != 0) {
    const i128 t = a % b;
    a = b;
    b = t;
  }
  if (a > 1) {
    n /= a;
    d /= a;
  }
  num_ = narrow(n);
  den_ = narrow(d);
}

Ratio operator+(const Ratio& a, const Ratio& b) {
  return make_ratio(static_cast<i128>(a.num_) * b.den_ + static_cast<i128>(b.num_) * a.den_,
                    static_cast<i128>(a.den_) * b.den_);
}
Ratio operator-(const Ratio& a, const Ratio& b) {
  return make_ratio(static_cast<i128>(a.num_) * b.den_ - static_cast<i128>(b.num_) * a.den_,
                    static_cast<i128>(a.den_) * b.den_);
}
Ratio operator*(const Ratio& a, const Ratio& b) {
  return make_ratio(static_cast<i128>(a.num_) * b.num_, static_cast<i128>(a.den_) * b.den_);
}
Ratio operator/(const Ratio& a, const Ratio& b) {
  return make_ratio(static_cast<i128>(a.num_) * b.den_, static_cast<i128>(a.den_) * b.num_);
}

ThresholdConfusion& ThresholdConfusion::operator+=(const ThresholdConfusion& o) {
  hit += o.hit;
  miss += o.miss;
  false_alarm += o.false_alarm;
  correct_negative += o.correct_negative;
  return *this;
}

ConfusionPair& ConfusionPair::operator+=(const ConfusionPair& o) {
  over1 += o.over1;
  over10 += o.over10;
  return *this;
}

ConfusionPair confusions(const ClassGrid& pred, const ClassGrid& truth, const ValidityMask& mask) {
  if (pred.height != truth.height || pred.width != truth.width || mask.height != pred.height ||
      mask.width != pred.width) {
    throw InvalidInput("prediction, truth and mask shapes differ");
  }
  ConfusionPair c;
  auto tally = [](ThresholdConfusion& t, bool p, bool o) {
    if (p && o) ++t.hit;
    else if (!p && o) ++t.miss;
    else if (p && !o) ++t.false_alarm;
    else ++t.correct_negative;
  };
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!mask.valid[i]) continue;
    const int p = pred.labels[i], o = truth.labels[i];
    tally(c.over1, p >= 1, o >= 1);
    tally(c.over10, p >= 2, o >= 2);
  }
  return c;
}

MetricValue modified_pod(const ThresholdConfusion& c1, const ThresholdConfusion& c10) {
  return average_terms(safe_ratio(c1.hit, c1.hit + c1.miss), safe_ratio(c10.hit, c10.hit + c10.miss));
}

MetricValue modified_far(const ThresholdConfusion& c1, const ThresholdConfusion& c10) {
  return average_terms(safe_ratio(c1.false_alarm, c1.false_alarm + c1.hit),
                       safe_ratio(c10.false_alarm, c10.false_alarm + c10.hit));
}

MetricValue modified_f1(const ThresholdConfusion& c1, const ThresholdConfusion& c10) {
  // Hit / (Hit + (Miss + FA)/2) == 2 Hit / (2 Hit + Miss + FA)
  auto term = [](const ThresholdConfusion& c) {
    return safe_ratio(2 * c.hit, 2 * c.hit + c.miss + c.false_alarm);
  };
  return average_terms(term(c1), term(c10));
}

ThresholdPoint threshold_point(const ThresholdConfusion& c) {
  ThresholdPoint t;
  t.pod = safe_ratio(c.hit, c.hit + c.miss);
  if (auto far = safe_ratio(c.false_alarm, c.false_alarm + c.hit)) {
    t.success_ratio = Ratio(1, 1) - *far;
  }
  if (t.pod && t.success_ratio) {
    if (c.hit == 0) {
      t.csi = Ratio(0, 1);  // limit of the identity as SR, POD -> 0
    } else {
      const Ratio one(1, 1);
      t.csi = one / (one / *t.success_ratio + one / *t.pod - one);
    }
  }
  if (t.pod) {
    if (t.success_ratio && !t.success_ratio->is_zero()) {
      t.bias = *t.pod / *t.success_ratio;
    } else {
      t.bias = Ratio(c.hit + c.false_alarm, c.hit + c.miss);
    }
  }
  return t;
}

DiagramPoint diagram_point(const ThresholdConfusion& c1, const ThresholdConfusion& c10,
                           DiagramGroup group) {
  const ThresholdPoint a = threshold_point(c1), b = threshold_point(c10);
  DiagramPoint d;
  d.group = group;
  d.pod = average_terms(a.pod, b.pod);
  d.success_ratio = average_terms(a.success_ratio, b.success_ratio);
  d.csi = average_terms(a.csi, b.csi);
  d.bias = average_terms(a.bias, b.bias);
  return d;
}

const ReportCell& StratifiedReport::cell(int rain_type, int lead_time) const {
  return cells.at(static_cast<std::size_t>(rain_type) * kNumLeadTimes + (lead_time - 1));
}

StratifiedReport stratified_report(const std::vector<std::vector<ClassGrid>>& predictions,
                                   const std::vector<const Scenario*>& scenarios,
                                   const std::vector<int>& type_labels) {
  if (scenarios.empty()) throw EmptyDataset("stratified report needs a nonempty test set");
  if (predictions.size() != scenarios.size() || type_labels.size() != scenarios.size()) {
    throw InvalidInput("predictions, scenarios and labels differ in length");
  }
  StratifiedReport r;
  r.cells.resize(static_cast<std::size_t>(kNumRainTypes) * kNumLeadTimes);
  for (int t = 0; t < kNumRainTypes; ++t) {
    for (int lead = 1; lead <= kNumLeadTimes; ++lead) {
      auto& c = r.cells[t * kNumLeadTimes + lead - 1];
      c.rain_type = t;
      c.lead_time = lead;
    }
  }
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    const int t = type_labels[i];
    if (t < 0 || t >= kNumRainTypes) throw InvalidInput("type label out of range");
    if (predictions[i].size() != kNumLeadTimes) throw InvalidInput("expected 6 lead times");
    for (int lead = 1; lead <= kNumLeadTimes; ++lead) {
      auto& c = r.cells[t * kNumLeadTimes + lead - 1];
      c.counts += confusions(predictions[i][lead - 1], scenarios[i]->truth_classes(lead),
                             scenarios[i]->mask);
      ++c.samples;
    }
  }
  for (auto& c : r.cells) {
    if (c.samples == 0) continue;
    c.pod = modified_pod(c.counts.over1, c.counts.over10);
    c.far = modified_far(c.counts.over1, c.counts.over10);
    c.f1 = modified_f1(c.counts.over1, c.counts.over10);
    c.point = diagram_point(c.counts.over1, c.counts.over10, {c.rain_type, c.lead_time});
  }
  return r;
}

std::string StratifiedReport::to_csv() const {
  std::ostringstream os;
  os << "rain_type,lead_time,samples,hit_1,miss_1,false_alarm_1,correct_negative_1,"
        "hit_10,miss_10,false_alarm_10,correct_negative_10,modified_pod,modified_far,"
        "modified_f1,success_ratio,csi,bias,partial\n";
  for (const auto& c : cells) {
    const auto& a = c.counts.over1;
    const auto& b = c.counts.over10;
    const bool partial = c.pod.partial || c.far.partial || c.f1.partial;
    os << rain_type_name(static_cast<RainType>(c.rain_type)) << ',' << c.lead_time << ','
       << c.samples << ',' << a.hit << ',' << a.miss << ',' << a.false_alarm << ','
       << a.correct_negative << ',' << b.hit << ',' << b.miss << ',' << b.false_alarm << ','
       << b.correct_negative << ',' << fmt(c.pod) << ',' << fmt(c.far) << ',' << fmt(c.f1) << ','
       << fmt(c.point.success_ratio) << ',' << fmt(c.point.csi) << ',' << fmt(c.point.bias) << ','
       << (partial ? 1 : 0) << '\n';
  }
  return os.str();
}

nlohmann::json metric_to_json(const MetricValue& m) {
  if (!m.value) return {{"value", nullptr}, {"defined", false}, {"partial", false}};
  return {{"value", *m.value},
          {"defined", true},
          {"partial", m.partial},
          {"exact", {m.exact->num(), m.exact->den()}}};
}

namespace {

MetricValue metric_from_json(const nlohmann::json& j) {
  MetricValue m;
  if (j.at("defined").get<bool>()) {
    const auto& e = j.at("exact");
    m.exact = Ratio(e.at(0).get<std::int64_t>(), e.at(1).get<std::int64_t>());
    m.value = m.exact->to_double();
    m.partial = j.at("partial").get<bool>();
  }
  return m;
}

nlohmann::json confusion_json(const ThresholdConfusion& c) {
  return {{"hit", c.hit},
          {"miss", c.miss},
          {"false_alarm", c.false_alarm},
          {"correct_negative", c.correct_negative}};
}

ThresholdConfusion confusion_from_json(const nlohmann::json& j, Threshold t) {
  return {j.at("hit").get<std::int64_t>(), j.at("miss").get<std::int64_t>(),
          j.at("false_alarm").get<std::int64_t>(), j.at("correct_negative").get<std::int64_t>(), t};
}

}  // namespace

nlohmann::json StratifiedReport::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cells) {
    arr.push_back({{"rain_type", rain_type_name(static_cast<RainType>(c.rain_type))},
                   {"lead_time", c.lead_time},
                   {"samples", c.samples},
                   {"over_1mm", confusion_json(c.counts.over1)},
                   {"over_10mm", confusion_json(c.counts.over10)},
                   {"modified_pod", metric_to_json(c.pod)},
                   {"modified_far", metric_to_json(c.far)},
                   {"modified_f1", metric_to_json(c.f1)},
                   {"success_ratio", metric_to_json(c.point.success_ratio)},
                   {"csi", metric_to_json(c.point.csi)},
                   {"bias", metric_to_json(c.point.bias)}});
  }
  return {{"cells", arr}};
}

StratifiedReport StratifiedReport::from_json(const nlohmann::json& j) {
  StratifiedReport r;
  for (const auto& e : j.at("cells")) {
    ReportCell c;
    c.rain_type = static_cast<int>(rain_type_from_name(e.at("rain_type").get<std::string>()));
    c.lead_time = e.at("lead_time").get<int>();
    c.samples = e.at("samples").get<int>();
    c.counts.over1 = confusion_from_json(e.at("over_1mm"), Threshold::Over1mm);
    c.counts.over10 = confusion_from_json(e.at("over_10mm"), Threshold::Over10mm);
    c.pod = metric_from_json(e.at("modified_pod"));
    c.far = metric_from_json(e.at("modified_far"));
    c.f1 = metric_from_json(e.at("modified_f1"));
    c.point.group = {c.rain_type, c.lead_time};
    c.point.success_ratio = metric_from_json(e.at("success_ratio"));
    c.point.csi = metric_from_json(e.at("csi"));
    c.point.bias = metric_from_json(e.at("bias"));
    r.cells.push_back(std::move(c));
  }
  return r;
}

nlohmann::json performance_diagram_geometry(int points_per_line) {
  nlohmann::json contours = nlohmann::json::array();
  for (int k = 1; k <= 9; ++k) {
    const double csi = k / 10.0;
    nlohmann::json pts = nlohmann::json::array();
    // POD = 1 / (1/CSI + 1 - 1/SR) for SR in [csi, 1]
    for (int i = 0; i <= points_per_line; ++i) {
      const double sr = csi + (1.0 - csi) * i / points_per_line;
      const double denom = 1.0 / csi + 1.0 - 1.0 / sr;
      if (denom <= 0.0) continue;
      const double pod = 1.0 / denom;
      if (pod > 1.0 + 1e-12) continue;
      pts.push_back({sr, std::min(pod, 1.0)});
    }
    contours.push_back({{"csi", csi}, {"points", pts}});
  }
  nlohmann::json rays = nlohmann::json::array();
  for (double b : kBiasRays) {
    // POD = bias * SR, clipped to the unit square
    const double end_sr = b >= 1.0 ? 1.0 / b : 1.0;
    rays.push_back({{"bias", b}, {"points", {{0.0, 0.0}, {end_sr, b * end_sr}}}});
  }
  return {{"csi_contours", contours}, {"bias_rays", rays}, {"axes", {{"x", "success_ratio"}, {"y", "pod"}}}};
}

}  // namespace nowcast
