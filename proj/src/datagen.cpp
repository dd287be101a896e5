#include "nowcast/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "nowcast/grdf.hpp"

namespace nowcast {

namespace {

constexpr std::string_view kTypeNames[kNumRainTypes] = {
    "MonsoonSouth", "MonsoonCentral", "IsolatedThunderstorm",
    "CycloneEastCoast", "CycloneInland", "NoRain"};

// Days since 1970-01-01 -> civil date (proleptic Gregorian).
struct CivilDate {
  int year, month, day;
};

CivilDate civil_from_days(std::int64_t z) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const auto doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp < 10 ? mp + 3 : mp - 9;
  return {static_cast<int>(y + (m <= 2)), static_cast<int>(m), static_cast<int>(d)};
}

std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m > 2 ? m - 3 : m + 9) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

class Draw {
 public:
  explicit Draw(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }

 private:
  std::mt19937_64 rng_;
};

void add_band(ScenarioSpec& s, Draw& d, double row_frac_lo, double row_frac_hi) {
  const double h = s.grid.height, w = s.grid.width;
  const double y0 = d.uniform(row_frac_lo, row_frac_hi) * h;
  const double slope = d.uniform(-0.12, 0.12);
  const double radius_km = d.uniform(5.0, 8.0);
  const double spacing = 0.8 * radius_km / s.km_per_pixel;
  for (double x = -0.6 * w; x <= 1.6 * w; x += spacing) {
    RainCell c;
    c.x = x;
    c.y = y0 + slope * (x - w / 2) + d.uniform(-1.0, 1.0);
    c.peak = d.uniform(2.5, 7.0);
    c.radius_km = radius_km * d.uniform(0.9, 1.1);
    c.growth_per_hr = d.uniform(-0.05, 0.05);
    s.cells.push_back(c);
  }
  // embedded convective cores
  const int cores = d.integer(1, 3);
  for (int i = 0; i < cores; ++i) {
    RainCell c;
    c.x = d.uniform(0.1, 0.9) * w;
    c.y = y0 + slope * (c.x - w / 2);
    c.peak = d.uniform(10.0, 25.0);
    c.radius_km = d.uniform(4.0, 6.0);
    c.growth_per_hr = d.uniform(-0.15, 0.05);
    s.cells.push_back(c);
  }
}

void add_comma(ScenarioSpec& s, Draw& d, double px_frac, double py_frac) {
  const double h = s.grid.height, w = s.grid.width;
  const double m = std::min(h, w);
  Rotation rot;
  rot.pivot_x = (px_frac + d.uniform(-0.05, 0.05)) * w;
  rot.pivot_y = (py_frac + d.uniform(-0.05, 0.05)) * h;
  rot.omega_rad_per_hr = d.uniform(0.12, 0.25);
  s.rotation = rot;

  const double r0 = d.uniform(0.06, 0.1) * m;
  const double k = d.uniform(0.07, 0.1) * m;  // radial growth per radian
  const double phase = d.uniform(0.0, 2.0 * std::numbers::pi);
  const double radius_km = d.uniform(5.0, 7.0);
  const double theta_max = 1.6 * std::numbers::pi;
  for (double th = 0.0; th <= theta_max; th += 0.22) {
    const double r = r0 + k * th;
    RainCell c;
    c.x = rot.pivot_x + r * std::cos(th + phase);
    c.y = rot.pivot_y - r * std::sin(th + phase);
    c.peak = d.uniform(3.0, 8.0) * (1.0 - 0.4 * th / theta_max);
    c.radius_km = radius_km;
    c.growth_per_hr = d.uniform(-0.05, 0.05);
    s.cells.push_back(c);
  }
  // comma head
  RainCell head;
  head.x = rot.pivot_x + r0 * std::cos(phase);
  head.y = rot.pivot_y - r0 * std::sin(phase);
  head.peak = d.uniform(12.0, 25.0);
  head.radius_km = d.uniform(6.0, 9.0);
  head.growth_per_hr = d.uniform(-0.1, 0.05);
  s.cells.push_back(head);
}

}  // namespace

std::string_view rain_type_name(RainType t) { return kTypeNames[static_cast<int>(t)]; }

RainType rain_type_from_name(std::string_view name) {
  for (int i = 0; i < kNumRainTypes; ++i) {
    if (kTypeNames[i] == name) return static_cast<RainType>(i);
  }
  throw InvalidInput("unknown rain type '" + std::string(name) + "'");
}

RainType rain_type_from_index(int i) {
  if (i < 0 || i >= kNumRainTypes) throw InvalidInput("rain type index out of range");
  return static_cast<RainType>(i);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

double rain_rate_to_dbz(double rate_mm_hr) {
  if (rate_mm_hr <= 0.0) return -std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(200.0 * std::pow(rate_mm_hr, 1.6));
}

void ScenarioSpec::validate() const {
  if (grid.height <= 0 || grid.width <= 0) throw InvalidSpec("zero-area grid");
  if (grid.height < 8 || grid.width < 8) throw InvalidSpec("grid smaller than 8x8");
  if (!(km_per_pixel > 0.0)) throw InvalidSpec("km_per_pixel must be positive");
  if (static_cast<int>(rain_type) < 0 || static_cast<int>(rain_type) >= kNumRainTypes) {
    throw InvalidSpec("unknown rain type");
  }
  for (const auto& c : cells) {
    if (!(c.peak >= 0.0)) throw InvalidSpec("cell peak must be >= 0");
    if (!(c.radius_km > 0.0)) throw InvalidSpec("cell radius must be > 0");
    if (!std::isfinite(c.x) || !std::isfinite(c.y) || !std::isfinite(c.growth_per_hr)) {
      throw InvalidSpec("non-finite cell parameter");
    }
  }
}

std::int64_t issue_time_minutes(std::uint64_t seed) {
  const std::int64_t start = days_from_civil(2020, 1, 1) * 1440;
  const std::int64_t span_slots = 366 * 144;  // 10-minute slots in 2020
  return start + static_cast<std::int64_t>(splitmix64(seed) % span_slots) * 10;
}

Tensor rain_field_at(const ScenarioSpec& spec, double t_hours) {
  const int h = spec.grid.height, w = spec.grid.width;
  Tensor f(1, h, w);
  const double shift_x = spec.u_kmh * t_hours / spec.km_per_pixel;
  const double shift_y = -spec.v_kmh * t_hours / spec.km_per_pixel;
  double cos_t = 1.0, sin_t = 0.0, px = 0.0, py = 0.0;
  if (spec.rotation) {
    const double th = spec.rotation->omega_rad_per_hr * t_hours;
    cos_t = std::cos(th);
    sin_t = std::sin(th);
    px = spec.rotation->pivot_x;
    py = spec.rotation->pivot_y;
  }
  for (const auto& c : spec.cells) {
    double cx = c.x, cy = c.y;
    if (spec.rotation) {
      // y grows southward, so a counter-clockwise map rotation flips the sin terms
      const double dx = c.x - px, dy = c.y - py;
      cx = px + dx * cos_t + dy * sin_t;
      cy = py - dx * sin_t + dy * cos_t;
    }
    cx += shift_x;
    cy += shift_y;
    const double amp = c.peak * std::exp(c.growth_per_hr * t_hours);
    const double sigma = c.radius_km / spec.km_per_pixel;
    const double reach = 4.0 * sigma;
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + reach)));
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + reach)));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        f.at(0, y, x) += amp * std::exp(-r2 * inv);
      }
    }
  }
  for (double& v : f.values()) v = std::max(0.0, v);
  return f;
}

ClassGrid Scenario::truth_classes(int lead_time) const {
  if (lead_time < 1 || lead_time > static_cast<int>(truth.size())) {
    throw InvalidInput("lead time out of range");
  }
  return rain_to_classes(truth[lead_time - 1]);
}

Scenario generate(const ScenarioSpec& spec) {
  spec.validate();
  const int h = spec.grid.height, w = spec.grid.width;
  Scenario s;
  s.spec = spec;
  s.label = spec.rain_type;
  s.mask = radar_coverage_mask(h, w);

  const std::int64_t t0 = issue_time_minutes(spec.seed);
  const CivilDate date = civil_from_days(t0 / 1440);
  const double doy =
      static_cast<double>(t0 / 1440 - days_from_civil(date.year, 1, 1));  // 0-based

  Tensor in(kNumInputChannels, h, w);
  for (int f = 0; f < kNumRadarFrames; ++f) {
    const double t = -(kNumRadarFrames - 1 - f) * 10.0 / 60.0;
    const Tensor frame = rain_field_at(spec, t);
    std::copy(frame.values().begin(), frame.values().end(), in.channel(f).begin());
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      in.at(kLonChannel, y, x) = static_cast<double>(x) / (w - 1);
      in.at(kLatChannel, y, x) = 1.0 - static_cast<double>(y) / (h - 1);
    }
  }
  const double year_enc = std::clamp((date.year - 2000) / 50.0, 0.0, 1.0);
  const double month_enc = (date.month - 1) / 11.0;
  const double doy_enc = doy / 365.0;
  for (double& v : in.channel(9)) v = year_enc;
  for (double& v : in.channel(10)) v = month_enc;
  for (double& v : in.channel(11)) v = doy_enc;
  quantize_to_float32(in);
  s.inputs.channels = std::move(in);

  for (int lead = 1; lead <= kNumLeadTimes; ++lead) {
    RainField rf;
    rf.values = rain_field_at(spec, static_cast<double>(lead));
    quantize_to_float32(rf.values);
    rf.timestamp = t0 + lead * 60;
    s.truth.push_back(std::move(rf));
  }
  return s;
}

ScenarioSpec sample_spec(RainType type, std::uint64_t seed, GridSize grid, double km_per_pixel) {
  ScenarioSpec s;
  s.rain_type = type;
  s.seed = seed;
  s.grid = grid;
  s.km_per_pixel = km_per_pixel;
  Draw d(splitmix64(seed ^ 0x5DEECE66Dull));
  const double h = grid.height, w = grid.width;
  switch (type) {
    case RainType::MonsoonSouth:
      add_band(s, d, 0.72, 0.84);
      s.u_kmh = d.uniform(12.0, 25.0);
      s.v_kmh = d.uniform(-2.0, 2.0);
      break;
    case RainType::MonsoonCentral:
      add_band(s, d, 0.38, 0.52);
      s.u_kmh = d.uniform(8.0, 20.0);
      s.v_kmh = d.uniform(1.0, 6.0);
      break;
    case RainType::IsolatedThunderstorm: {
      const int n = d.integer(1, 3);
      for (int i = 0; i < n; ++i) {
        RainCell c;
        c.x = d.uniform(0.25, 0.75) * w;
        c.y = d.uniform(0.25, 0.75) * h;
        c.peak = d.uniform(15.0, 45.0);
        c.radius_km = d.uniform(4.0, 7.0);
        c.growth_per_hr = d.uniform(-0.35, 0.15);
        s.cells.push_back(c);
      }
      s.u_kmh = d.uniform(-8.0, 8.0);
      s.v_kmh = d.uniform(-8.0, 8.0);
      break;
    }
    case RainType::CycloneEastCoast:
      add_comma(s, d, 0.70, 0.40);
      s.u_kmh = d.uniform(6.0, 14.0);
      s.v_kmh = d.uniform(4.0, 10.0);
      break;
    case RainType::CycloneInland:
      add_comma(s, d, 0.32, 0.55);
      s.u_kmh = d.uniform(10.0, 20.0);
      s.v_kmh = d.uniform(-2.0, 4.0);
      break;
    case RainType::NoRain:
      s.u_kmh = d.uniform(-10.0, 10.0);
      s.v_kmh = d.uniform(-10.0, 10.0);
      break;
  }
  return s;
}

std::vector<Scenario> make_dataset(const TypeCounts& counts, std::uint64_t seed, GridSize grid,
                                   double km_per_pixel) {
  int total = 0;
  for (int c : counts) {
    if (c < 0) throw InvalidInput("negative sample count");
    total += c;
  }
  if (total == 0) throw EmptyDataset("all per-type counts are zero");
  std::vector<Scenario> out;
  out.reserve(total);
  for (int t = 0; t < kNumRainTypes; ++t) {
    for (int i = 0; i < counts[t]; ++i) {
      const std::uint64_t s =
          splitmix64(seed ^ splitmix64((static_cast<std::uint64_t>(t) << 32) | static_cast<std::uint32_t>(i)));
      Scenario sc = generate(sample_spec(static_cast<RainType>(t), s, grid, km_per_pixel));
      char id[64];
      std::snprintf(id, sizeof id, "%s-%04d", std::string(kTypeNames[t]).c_str(), i);
      sc.id = id;
      out.push_back(std::move(sc));
    }
  }
  return out;
}

std::vector<int> largest_remainder(int total, std::span<const double> ratios) {
  std::vector<int> out(ratios.size());
  std::vector<double> rem(ratios.size());
  int assigned = 0;
  for (std::size_t j = 0; j < ratios.size(); ++j) {
    const double ideal = total * ratios[j];
    out[j] = static_cast<int>(std::floor(ideal + 1e-9));
    rem[j] = ideal - out[j];
    assigned += out[j];
  }
  std::vector<std::size_t> order(ratios.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (std::abs(rem[a] - rem[b]) > 1e-9) return rem[a] > rem[b];
    return a > b;
  });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) out[order[k % order.size()]] += 1;
  return out;
}

DatasetSplit split_dataset(const std::vector<Scenario>& data, std::array<double, 3> ratios,
                           std::uint64_t seed) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidParameter("split ratios must sum to 1");
  for (double r : ratios) {
    if (r < 0.0) throw InvalidParameter("split ratios must be non-negative");
  }
  DatasetSplit split;
  std::array<std::vector<std::size_t>, kNumRainTypes> members;
  for (std::size_t i = 0; i < data.size(); ++i) members[static_cast<int>(data[i].label)].push_back(i);

  const std::vector<int> totals = largest_remainder(static_cast<int>(data.size()), ratios);

  // Floors per type, then hand out the leftover units by descending remainder
  // while respecting the split totals.
  std::array<std::array<int, 3>, kNumRainTypes> alloc{};
  struct Candidate {
    int type, part;
    double rem;
  };
  std::vector<Candidate> cands;
  std::array<int, kNumRainTypes> leftover{};
  std::array<int, 3> need = {totals[0], totals[1], totals[2]};
  for (int t = 0; t < kNumRainTypes; ++t) {
    const int n = static_cast<int>(members[t].size());
    int used = 0;
    for (int j = 0; j < 3; ++j) {
      const double ideal = n * ratios[j];
      alloc[t][j] = static_cast<int>(std::floor(ideal + 1e-9));
      used += alloc[t][j];
      need[j] -= alloc[t][j];
      const double rem = ideal - alloc[t][j];
      if (rem > 1e-9) cands.push_back({t, j, rem});
    }
    leftover[t] = n - used;
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (std::abs(a.rem - b.rem) > 1e-9) return a.rem > b.rem;
    return a.part > b.part;
  });
  for (const auto& c : cands) {
    if (leftover[c.type] > 0 && need[c.part] > 0) {
      alloc[c.type][c.part] += 1;
      leftover[c.type] -= 1;
      need[c.part] -= 1;
    }
  }
  for (int t = 0; t < kNumRainTypes; ++t) {
    while (leftover[t] > 0) {
      int best = -1;
      for (int j = 2; j >= 0; --j) {
        if (need[j] > 0 && (best < 0 || need[j] > need[best])) best = j;
      }
      if (best < 0) best = 0;
      alloc[t][best] += 1;
      leftover[t] -= 1;
      need[best] -= 1;
      split.warnings.push_back("type " + std::string(kTypeNames[t]) +
                               ": rounding could not match both type share and split totals");
    }
  }

  std::mt19937_64 rng(splitmix64(seed));
  for (int t = 0; t < kNumRainTypes; ++t) {
    auto idx = members[t];
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t k = 0;
    for (int j = 0; j < 3; ++j) {
      auto& dst = j == 0 ? split.train : (j == 1 ? split.val : split.test);
      for (int n = 0; n < alloc[t][j]; ++n) dst.push_back(idx[k++]);
      if (!idx.empty() && alloc[t][j] == 0 && ratios[j] > 0.0) {
        split.warnings.push_back("stratification: split " + std::to_string(j) +
                                 " has no samples of type " + std::string(kTypeNames[t]));
      }
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

namespace {

nlohmann::json spec_to_json(const ScenarioSpec& s) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : s.cells) {
    cells.push_back({{"x", c.x}, {"y", c.y}, {"peak", c.peak}, {"radius_km", c.radius_km},
                     {"growth_per_hr", c.growth_per_hr}});
  }
  nlohmann::json j = {{"rain_type", rain_type_name(s.rain_type)},
                      {"seed", s.seed},
                      {"grid", {s.grid.height, s.grid.width}},
                      {"km_per_pixel", s.km_per_pixel},
                      {"advection", {s.u_kmh, s.v_kmh}},
                      {"cells", cells}};
  if (s.rotation) {
    j["rotation"] = {{"pivot_x", s.rotation->pivot_x},
                     {"pivot_y", s.rotation->pivot_y},
                     {"omega_rad_per_hr", s.rotation->omega_rad_per_hr}};
  }
  return j;
}

ScenarioSpec spec_from_json(const nlohmann::json& j) {
  ScenarioSpec s;
  s.rain_type = rain_type_from_name(j.at("rain_type").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.grid = {j.at("grid").at(0).get<int>(), j.at("grid").at(1).get<int>()};
  s.km_per_pixel = j.at("km_per_pixel").get<double>();
  s.u_kmh = j.at("advection").at(0).get<double>();
  s.v_kmh = j.at("advection").at(1).get<double>();
  for (const auto& c : j.at("cells")) {
    s.cells.push_back({c.at("x").get<double>(), c.at("y").get<double>(), c.at("peak").get<double>(),
                       c.at("radius_km").get<double>(), c.at("growth_per_hr").get<double>()});
  }
  if (j.contains("rotation")) {
    const auto& r = j["rotation"];
    s.rotation = Rotation{r.at("pivot_x").get<double>(), r.at("pivot_y").get<double>(),
                          r.at("omega_rad_per_hr").get<double>()};
  }
  return s;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<Scenario>& data) {
  nlohmann::json manifest = {{"format", "nowcast-dataset/1"}, {"scenarios", nlohmann::json::array()}};
  for (const auto& s : data) {
    const std::filesystem::path rel = std::filesystem::path("scenarios") / s.id;
    GrdfFile in = tensor_to_grdf(s.inputs.channels, "fused_input");
    in.timestamp = issue_time_minutes(s.spec.seed);
    write_grdf(dir / rel / "inputs.grdf", in);
    write_grdf(dir / rel / "mask.grdf", mask_to_grdf(s.mask));
    nlohmann::json truth_paths = nlohmann::json::array();
    for (int lead = 1; lead <= static_cast<int>(s.truth.size()); ++lead) {
      GrdfFile t = tensor_to_grdf(s.truth[lead - 1].values, "rain_field");
      t.lead_time = lead;
      t.timestamp = s.truth[lead - 1].timestamp;
      const auto p = rel / ("truth_" + std::to_string(lead) + ".grdf");
      write_grdf(dir / p, t);
      truth_paths.push_back(p.generic_string());
    }
    manifest["scenarios"].push_back({{"id", s.id},
                                     {"rain_type", rain_type_name(s.label)},
                                     {"seed", s.spec.seed},
                                     {"inputs", (rel / "inputs.grdf").generic_string()},
                                     {"mask", (rel / "mask.grdf").generic_string()},
                                     {"truth", truth_paths},
                                     {"spec", spec_to_json(s.spec)}});
  }
  write_text_file(dir / "manifest.json", manifest.dump(2));
}

std::vector<Scenario> read_dataset(const std::filesystem::path& dir,
                                   const std::vector<std::string>* only) {
  const auto manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
  std::vector<Scenario> out;
  for (const auto& e : manifest.at("scenarios")) {
    Scenario s;
    s.id = e.at("id").get<std::string>();
    if (only && std::find(only->begin(), only->end(), s.id) == only->end()) continue;
    s.spec = spec_from_json(e.at("spec"));
    s.label = rain_type_from_name(e.at("rain_type").get<std::string>());
    s.inputs.channels = grdf_to_tensor(read_grdf(dir / e.at("inputs").get<std::string>()));
    s.mask = grdf_to_mask(read_grdf(dir / e.at("mask").get<std::string>()));
    for (const auto& p : e.at("truth")) {
      const GrdfFile f = read_grdf(dir / p.get<std::string>());
      RainField rf;
      rf.values = grdf_to_tensor(f);
      rf.timestamp = f.timestamp.value_or(0);
      s.truth.push_back(std::move(rf));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace nowcast
