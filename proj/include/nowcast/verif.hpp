#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nowcast/datagen.hpp"
#include "nowcast/grid.hpp"

namespace nowcast {

/// Exact non-negative ratio of integers, kept in lowest terms.
class Ratio {
 public:
  Ratio() = default;
  Ratio(std::int64_t num, std::int64_t den);

  std::int64_t num() const { return num_; }
  std::int64_t den() const { return den_; }
  double to_double() const { return static_cast<double>(num_) / static_cast<double>(den_); }
  bool is_zero() const { return num_ == 0; }

  friend Ratio operator+(const Ratio& a, const Ratio& b);
  friend Ratio operator-(const Ratio& a, const Ratio& b);
  friend Ratio operator*(const Ratio& a, const Ratio& b);
  friend Ratio operator/(const Ratio& a, const Ratio& b);
  friend bool operator==(const Ratio&, const Ratio&) = default;

 private:
  std::int64_t num_ = 0;
  std::int64_t den_ = 1;
};

enum class Threshold { Over1mm, Over10mm };

struct ThresholdConfusion {
  std::int64_t hit = 0;
  std::int64_t miss = 0;
  std::int64_t false_alarm = 0;
  std::int64_t correct_negative = 0;
  Threshold threshold = Threshold::Over1mm;

  std::int64_t total() const { return hit + miss + false_alarm + correct_negative; }
  ThresholdConfusion& operator+=(const ThresholdConfusion& o);
  friend bool operator==(const ThresholdConfusion&, const ThresholdConfusion&) = default;
};

struct ConfusionPair {
  ThresholdConfusion over1{0, 0, 0, 0, Threshold::Over1mm};
  ThresholdConfusion over10{0, 0, 0, 0, Threshold::Over10mm};

  ConfusionPair& operator+=(const ConfusionPair& o);
  friend bool operator==(const ConfusionPair&, const ConfusionPair&) = default;
};

/// >= 1 mm/hr treats classes {1,2} as positive, >= 10 mm/hr treats {2}; masked pixels skipped.
ConfusionPair confusions(const ClassGrid& pred, const ClassGrid& truth, const ValidityMask& mask);

/// A threshold-averaged score. An undefined per-threshold term (zero denominator)
/// drops out and sets `partial`; if both drop out the value is absent.
struct MetricValue {
  std::optional<double> value;
  std::optional<Ratio> exact;
  bool partial = false;

  bool defined() const { return value.has_value(); }
};

MetricValue modified_pod(const ThresholdConfusion& c1, const ThresholdConfusion& c10);
MetricValue modified_far(const ThresholdConfusion& c1, const ThresholdConfusion& c10);
MetricValue modified_f1(const ThresholdConfusion& c1, const ThresholdConfusion& c10);
inline MetricValue modified_f1(const ConfusionPair& c) { return modified_f1(c.over1, c.over10); }

/// Per-threshold performance-diagram coordinates.
struct ThresholdPoint {
  std::optional<Ratio> pod, success_ratio, csi, bias;
};
ThresholdPoint threshold_point(const ThresholdConfusion& c);

struct DiagramGroup {
  int rain_type = -1;  // -1 = all types
  int lead_time = 0;
};

struct DiagramPoint {
  MetricValue success_ratio, pod, csi, bias;
  DiagramGroup group;
};

/// SR = 1 - FAR, POD, CSI = 1/(1/SR + 1/POD - 1), bias = POD/SR per threshold, then averaged.
DiagramPoint diagram_point(const ThresholdConfusion& c1, const ThresholdConfusion& c10,
                           DiagramGroup group = {});

struct ReportCell {
  int rain_type = 0;
  int lead_time = 1;
  int samples = 0;
  ConfusionPair counts;
  MetricValue pod, far, f1;
  DiagramPoint point;
};

/// 6 rain types x 6 lead times; confusions pooled per cell before computing metrics.
struct StratifiedReport {
  std::vector<ReportCell> cells;  // row-major: type * 6 + (lead - 1)

  const ReportCell& cell(int rain_type, int lead_time) const;
  std::string to_csv() const;
  nlohmann::json to_json() const;
  static StratifiedReport from_json(const nlohmann::json& j);
};

/// predictions[case][lead-1] vs scenario truths; cases grouped by `type_labels[case]`.
StratifiedReport stratified_report(const std::vector<std::vector<ClassGrid>>& predictions,
                                   const std::vector<const Scenario*>& scenarios,
                                   const std::vector<int>& type_labels);

/// Rendering payload: CSI iso-lines at 0.1 steps and frequency-bias rays.
nlohmann::json performance_diagram_geometry(int points_per_line = 50);
inline constexpr std::array<double, 10> kBiasRays = {0.3, 0.5, 0.8, 1.0, 1.3,
                                                     1.5, 2.0, 3.0, 5.0, 10.0};

nlohmann::json metric_to_json(const MetricValue& m);

}  // namespace nowcast
