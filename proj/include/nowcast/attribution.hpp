#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nowcast/grid.hpp"
#include "nowcast/network.hpp"

namespace nowcast {

enum class AttributionMethod { Saliency, IG, SmoothIG, Random };
std::string_view method_name(AttributionMethod m);
AttributionMethod method_from_name(std::string_view name);

/// Sum of the target-class logits of one lead-time head over a set of output pixels.
struct AttributionTarget {
  int lead_time = 1;
  int target_class = 1;
  std::vector<std::uint8_t> region;  // H x W, nonzero = included
  int height = 0;
  int width = 0;

  /// All valid pixels of the mask.
  static AttributionTarget over_mask(int lead_time, int target_class, const ValidityMask& mask);
  /// A single output pixel; throws InvalidInput if it is masked out.
  static AttributionTarget pixel(int lead_time, int target_class, const ValidityMask& mask, int y,
                                 int x);

  std::size_t region_size() const;
  void validate(int num_outputs, int num_classes, const ValidityMask* mask = nullptr) const;
  nlohmann::json to_json() const;  // region summarised by its pixel count
};

struct AttributionMap {
  Tensor a;  // same shape as the input
  AttributionMethod method = AttributionMethod::Saliency;
  AttributionTarget target;
  int steps = 0;
  int n_samples = 0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  nlohmann::json metadata() const;
};

/// Radar channels zeroed, coordinate channels copied.
Tensor make_baseline(const Tensor& x);
FusedInput make_baseline(const FusedInput& x);

/// Value of the target reduction and its gradient with respect to the input.
ValueAndGrad target_gradient(const Network& net, const Tensor& x, const AttributionTarget& target);
double target_value(const Network& net, const Tensor& x, const AttributionTarget& target);

AttributionMap saliency(const Network& net, const Tensor& x, const AttributionTarget& target);

/// Right Riemann sum over `steps` points of the straight path baseline -> x.
AttributionMap integrated_gradients(const Network& net, const Tensor& x, const Tensor& baseline,
                                    int steps, const AttributionTarget& target);

/// Mean of IG maps over inputs with Gaussian noise added to the radar channels.
AttributionMap smooth_integrated_gradients(const Network& net, const Tensor& x,
                                           const Tensor& baseline, int steps, int n_samples,
                                           double noise_sigma, std::uint64_t seed,
                                           const AttributionTarget& target);

/// Uniform [0, 1) values, deterministic per seed.
AttributionMap random_attribution(const Tensor& x, std::uint64_t seed,
                                  const AttributionTarget& target);

/// 10% of the dynamic range of the radar channels of x.
double default_noise_sigma(const Tensor& x);

struct AttributionConfig {
  int steps = 64;
  int n_samples = 16;
  double noise_sigma = -1.0;  // negative = default_noise_sigma(x)
  std::uint64_t seed = 0;
};

AttributionMap attribute(AttributionMethod method, const Network& net, const Tensor& x,
                         const AttributionTarget& target, const AttributionConfig& cfg = {});

inline const std::vector<double> kDefaultDeletionKs = {0, 1, 2, 5, 10, 20, 30, 50, 75, 100};

struct DeletionCurve {
  std::vector<double> ks;      // percentages, strictly increasing from 0
  std::vector<double> scores;  // modified F1 (0 where undefined)
  std::vector<std::uint8_t> defined;
  double auc = 0.0;            // trapezoid over K / 100

  nlohmann::json to_json() const;
  static DeletionCurve from_json(const nlohmann::json& j);
};

/// Deletes the top-K% radar cells (ranked per channel by positive attribution) by
/// replacing them with the baseline value, then scores the target lead time.
DeletionCurve deletion_curve(const Network& net, const Tensor& x, const ClassGrid& truth,
                             const ValidityMask& mask, const AttributionMap& map,
                             const std::vector<double>& ks = kDefaultDeletionKs);

/// Modified F1 of the argmax prediction for one head, 0 when undefined.
double deletion_score(const Network& net, const Tensor& x, const ClassGrid& truth,
                      const ValidityMask& mask, int lead_time, bool* defined = nullptr);

struct DeletionCase {
  Tensor x;
  ClassGrid truth;  // at target.lead_time
  ValidityMask mask;
  AttributionTarget target;
};

struct MethodScore {
  AttributionMethod method;
  double mean_auc = 0.0;
  std::vector<DeletionCurve> curves;  // one per case
};

/// Sorted by ascending mean AUC (steeper drop = better); ties keep input order.
struct MethodComparison {
  std::vector<MethodScore> ranking;

  nlohmann::json to_json() const;
};

MethodComparison compare_methods(const Network& net, const std::vector<DeletionCase>& cases,
                                 const std::vector<AttributionMethod>& methods,
                                 const std::vector<double>& ks = kDefaultDeletionKs,
                                 const AttributionConfig& cfg = {});

struct ReceptiveFieldEstimate {
  Tensor mean_abs;                 // 12 x H x W, averaged over cases
  Tensor pixel_mass;               // 1 x H x W, summed over channels
  int center_y = 0, center_x = 0;
  int effective_radius = 0;        // Chebyshev radius holding 95% of the mass, in pixels
  ReceptiveField theoretical;
  double mass_outside_theoretical = 0.0;

  nlohmann::json to_json(double km_per_pixel = 2.0) const;
};

/// Mean |SmoothIG| for the centre output pixel of one head over `cases`.
ReceptiveFieldEstimate effective_receptive_field(const Network& net,
                                                 const std::vector<Tensor>& cases,
                                                 const ValidityMask& mask, int lead_time,
                                                 int target_class, const AttributionConfig& cfg,
                                                 double mass_fraction = 0.95);

/// Heatmap payload with colour limits symmetric about zero.
nlohmann::json render_payload(const AttributionMap& map);

void save_attribution(const std::filesystem::path& grdf_path, const AttributionMap& map);
AttributionMap load_attribution(const std::filesystem::path& grdf_path);

}  // namespace nowcast
