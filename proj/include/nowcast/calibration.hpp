#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nowcast/grid.hpp"
#include "nowcast/network.hpp"

namespace nowcast {

/// One validation or test image for a given lead time.
struct CalibrationSample {
  Tensor logits;                      // 3 x H x W
  ClassGrid truth;
  const ValidityMask* mask = nullptr;
  const Tensor* input = nullptr;      // 12 x H x W, needed by local temperature scaling
};

/// Masked pixels of a set of samples, flattened.
struct PixelSet {
  std::vector<double> logits;  // 3 per pixel
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
};
PixelSet gather_pixels(std::span<const CalibrationSample> samples);

/// Mean negative log-likelihood of softmax(z / T).
double temperature_nll(const PixelSet& px, double T);

struct TemperatureScalar {
  double T = 1.0;
  int lead_time = 1;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  static TemperatureScalar from_json(const nlohmann::json& j);
};

inline constexpr double kMinTemperature = 0.05;
inline constexpr double kMaxTemperature = 20.0;

/// Golden-section search on log T over [log 0.05, log 20].
TemperatureScalar fit_temperature(const PixelSet& px, int lead_time = 1, double tol = 1e-4);
TemperatureScalar fit_temperature(std::span<const CalibrationSample> samples, int lead_time = 1);

struct CalibratedGrid {
  ProbGrid probs;
  ConfidenceGrid confidence;
};

ConfidenceGrid confidence_of(const ProbGrid& p);
CalibratedGrid apply_temperature(const LogitGrid& z, double T);
CalibratedGrid apply_temperature(const LogitGrid& z, const TemperatureScalar& t);

struct LtsConfig {
  int hidden = 16;
  int epochs = 12;
  int batch_size = 8;
  double learning_rate = 3e-3;
  std::uint64_t seed = 11;

  nlohmann::json to_json() const;
  static LtsConfig from_json(const nlohmann::json& j);
};

/// Conv mapping (logits, input) -> per-pixel temperature. The output transform
/// T = 1 + 0.99 (softplus(o) / ln 2 - 1) is positive with floor 0.01 and equals 1 at o = 0.
struct LocalTemperature {
  Network net;
  int lead_time = 1;
  std::vector<double> epoch_nll;  // validation NLL, entry 0 = before fitting
  double initial_nll = 0.0;
  double final_nll = 0.0;
};

inline constexpr double kTemperatureFloor = 0.01;

/// Mapping network whose last layer is zero, i.e. T == 1 everywhere.
LocalTemperature identity_local_temperature(int lead_time, int hidden = 16,
                                            std::uint64_t seed = 11);
double temperature_transform(double o);
Tensor temperature_field(const LocalTemperature& lt, const Tensor& logits, const Tensor& input);
CalibratedGrid apply_local_temperature(const LocalTemperature& lt, const LogitGrid& z,
                                       const Tensor& input);
double local_temperature_nll(const LocalTemperature& lt, std::span<const CalibrationSample> samples);

/// Minimises masked validation NLL with Adam; returns the best epoch (never worse than identity).
LocalTemperature fit_local_temperature(std::span<const CalibrationSample> val, int lead_time,
                                       const LtsConfig& cfg = {});

void save_local_temperature(const std::filesystem::path& stem, const LocalTemperature& lt);
LocalTemperature load_local_temperature(const std::filesystem::path& stem);

/// q = sigmoid(a s + b), fitted by Newton's method on the binary NLL.
struct PlattBinary {
  double a = 1.0;
  double b = 0.0;
};
PlattBinary fit_platt_binary(std::span<const double> scores, std::span<const std::uint8_t> labels,
                             std::vector<std::string>* warnings = nullptr);
double sigmoid(double v);

/// One-vs-rest per class on that class's logit; outputs renormalised across classes.
struct PlattParams {
  std::vector<PlattBinary> classes = std::vector<PlattBinary>(kNumClasses);
  int lead_time = 1;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  static PlattParams from_json(const nlohmann::json& j);
};
PlattParams fit_platt(const PixelSet& px, int lead_time = 1);
CalibratedGrid apply_platt(const LogitGrid& z, const PlattParams& p);

/// Equal-width bins over (0, 1]; bin i holds (i/B, (i+1)/B], with 0 sent to bin 0.
int bin_index(double confidence, int bins);

struct BinningTable {
  std::vector<double> edges;   // B + 1 values from 0 to 1
  std::vector<double> values;  // calibrated confidence per bin
  std::vector<long> counts;
  int lead_time = 1;

  int bins() const { return static_cast<int>(values.size()); }
  double apply(double confidence) const;
  nlohmann::json to_json() const;
  static BinningTable from_json(const nlohmann::json& j);
};

BinningTable fit_histogram_binning(std::span<const double> confidences,
                                   std::span<const std::uint8_t> correct, int bins);

struct ReliabilityBins {
  std::vector<long> n;
  std::vector<double> acc;
  std::vector<double> conf;
  std::vector<long> hits;
  std::vector<double> conf_sum;  // compensated sum of confidences per bin
  long total = 0;

  nlohmann::json to_json() const;
};

ReliabilityBins reliability_diagram(std::span<const double> confidences,
                                    std::span<const std::uint8_t> correct, int bins = 10);
/// Sum over bins of |hits - conf_sum| / total, i.e. (n_b / N) |acc - conf| with fewer roundings.
double ece_from_bins(const ReliabilityBins& r);
/// Full-population ECE; empty bins contribute 0.
double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct,
           int bins = 10);

struct SamplingProfile {
  std::size_t length = 250;
  int repeats = 10;
  std::uint64_t seed = 0;
};

struct SampledEce {
  double mean = 0.0;
  std::vector<double> per_draw;
};

/// `repeats` draws of `length` pixels without replacement; ECE per draw.
SampledEce ece_sampled(std::span<const double> confidences, std::span<const std::uint8_t> correct,
                       int bins, const SamplingProfile& profile);

/// Confidence and correctness of every masked pixel, with predictions taken from `probs`.
struct ConfidencePixels {
  std::vector<double> confidence;
  std::vector<std::uint8_t> correct;
};
ConfidencePixels confidence_pixels(std::span<const ProbGrid> probs,
                                   std::span<const CalibrationSample> samples);

/// Per lead-time ECE before and after each calibration method.
struct EceRow {
  int lead_time = 1;
  double before = 0.0;
  std::vector<double> after;  // aligned with EceReport::methods
  SampledEce sampled_before;
  std::vector<SampledEce> sampled_after;
};

struct EceReport {
  int bins = 10;
  std::vector<std::string> methods;
  std::vector<EceRow> rows;

  std::string to_csv() const;
  nlohmann::json to_json() const;
  static EceReport from_json(const nlohmann::json& j);
};

}  // namespace nowcast
