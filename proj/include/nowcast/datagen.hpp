#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nowcast/grid.hpp"

namespace nowcast {

enum class RainType : int {
  MonsoonSouth = 0,
  MonsoonCentral = 1,
  IsolatedThunderstorm = 2,
  CycloneEastCoast = 3,
  CycloneInland = 4,
  NoRain = 5,
};
inline constexpr int kNumRainTypes = 6;

std::string_view rain_type_name(RainType t);
RainType rain_type_from_name(std::string_view name);
RainType rain_type_from_index(int i);

struct GridSize {
  int height = 64;
  int width = 64;
};

/// Gaussian rain cell; position in pixels at the issue time t0.
struct RainCell {
  double x = 0.0;
  double y = 0.0;
  double peak = 0.0;       // mm/hr
  double radius_km = 1.0;  // Gaussian sigma
  double growth_per_hr = 0.0;
};

/// Solid-body rotation of all cells about a pivot that is itself advected.
struct Rotation {
  double pivot_x = 0.0;
  double pivot_y = 0.0;
  double omega_rad_per_hr = 0.0;  // positive = counter-clockwise on the map
};

struct ScenarioSpec {
  RainType rain_type = RainType::NoRain;
  std::uint64_t seed = 0;
  GridSize grid;
  double km_per_pixel = 2.0;
  double u_kmh = 0.0;  // eastward
  double v_kmh = 0.0;  // northward
  std::vector<RainCell> cells;
  std::optional<Rotation> rotation;

  void validate() const;
};

struct Scenario {
  std::string id;
  ScenarioSpec spec;
  FusedInput inputs;
  std::vector<RainField> truth;  // +1h ... +6h
  RainType label = RainType::NoRain;
  ValidityMask mask;

  ClassGrid truth_classes(int lead_time) const;
};

/// Rain rate field of a spec at `t_hours` relative to t0.
Tensor rain_field_at(const ScenarioSpec& spec, double t_hours);

/// Issue time t0 (minutes since the Unix epoch) derived from the seed; always in 2020.
std::int64_t issue_time_minutes(std::uint64_t seed);

Scenario generate(const ScenarioSpec& spec);

/// Draws a geometric archetype of the given type.
ScenarioSpec sample_spec(RainType type, std::uint64_t seed, GridSize grid = {},
                         double km_per_pixel = 2.0);

using TypeCounts = std::array<int, kNumRainTypes>;
/// 29 / 280 / 53 / 43 / 24 rain-type samples plus 218 no-rain cases.
inline constexpr TypeCounts kDefaultProfile = {29, 280, 53, 43, 24, 218};

std::vector<Scenario> make_dataset(const TypeCounts& counts, std::uint64_t seed,
                                   GridSize grid = {}, double km_per_pixel = 2.0);

struct DatasetSplit {
  std::vector<std::size_t> train, val, test;
  std::vector<std::string> warnings;
};

/// Stratified by rain type; split totals and per-type shares both follow largest-remainder rounding.
DatasetSplit split_dataset(const std::vector<Scenario>& data,
                           std::array<double, 3> ratios = {0.6, 0.2, 0.2}, std::uint64_t seed = 0);

/// Largest-remainder apportionment of `total` by `ratios` (ties go to the later entry).
std::vector<int> largest_remainder(int total, std::span<const double> ratios);

std::uint64_t splitmix64(std::uint64_t x);

/// Radar reflectivity from rain rate via Z = 200 R^1.6 (display only).
double rain_rate_to_dbz(double rate_mm_hr);

/// Persists scenarios as GRDF bundles plus manifest.json under `dir`.
void write_dataset(const std::filesystem::path& dir, const std::vector<Scenario>& data);
/// `only` restricts loading to the listed ids (manifest order is kept).
std::vector<Scenario> read_dataset(const std::filesystem::path& dir,
                                   const std::vector<std::string>* only = nullptr);

}  // namespace nowcast
