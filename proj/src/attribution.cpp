#include "nowcast/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nowcast/grdf.hpp"
#include "nowcast/verif.hpp"

namespace nowcast {

std::string_view method_name(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::Saliency: return "saliency";
    case AttributionMethod::IG: return "ig";
    case AttributionMethod::SmoothIG: return "smoothig";
    case AttributionMethod::Random: return "random";
  }
  return "?";
}

AttributionMethod method_from_name(std::string_view name) {
  for (auto m : {AttributionMethod::Saliency, AttributionMethod::IG, AttributionMethod::SmoothIG,
                 AttributionMethod::Random}) {
    if (method_name(m) == name) return m;
  }
  throw InvalidParameter("unknown attribution method: " + std::string(name));
}

AttributionTarget AttributionTarget::over_mask(int lead_time, int target_class,
                                               const ValidityMask& mask) {
  AttributionTarget t;
  t.lead_time = lead_time;
  t.target_class = target_class;
  t.height = mask.height;
  t.width = mask.width;
  t.region = mask.valid;
  return t;
}

AttributionTarget AttributionTarget::pixel(int lead_time, int target_class,
                                           const ValidityMask& mask, int y, int x) {
  if (y < 0 || x < 0 || y >= mask.height || x >= mask.width ||
      !mask.valid[static_cast<std::size_t>(y) * mask.width + x]) {
    throw InvalidInput("target pixel outside the valid mask");
  }
  AttributionTarget t;
  t.lead_time = lead_time;
  t.target_class = target_class;
  t.height = mask.height;
  t.width = mask.width;
  t.region.assign(static_cast<std::size_t>(mask.height) * mask.width, 0);
  t.region[static_cast<std::size_t>(y) * mask.width + x] = 1;
  return t;
}

std::size_t AttributionTarget::region_size() const {
  return static_cast<std::size_t>(std::count_if(region.begin(), region.end(),
                                                [](std::uint8_t v) { return v != 0; }));
}

void AttributionTarget::validate(int num_outputs, int num_classes, const ValidityMask* mask) const {
  if (lead_time < 1 || lead_time > num_outputs) throw InvalidInput("lead time out of range");
  if (target_class < 0 || target_class >= num_classes) throw InvalidInput("target class out of range");
  if (region.size() != static_cast<std::size_t>(height) * width) {
    throw InvalidInput("target region has the wrong size");
  }
  if (region_size() == 0) throw InvalidInput("empty target region");
  if (mask) {
    if (mask->height != height || mask->width != width) throw InvalidInput("mask shape differs");
    for (std::size_t i = 0; i < region.size(); ++i) {
      if (region[i] && !mask->valid[i]) throw InvalidInput("target region leaves the mask");
    }
  }
}

nlohmann::json AttributionTarget::to_json() const {
  return {{"lead_time", lead_time},
          {"target_class", target_class},
          {"region_pixels", region_size()},
          {"height", height},
          {"width", width}};
}

nlohmann::json AttributionMap::metadata() const {
  return {{"method", method_name(method)},
          {"target", target.to_json()},
          {"steps", steps},
          {"n_samples", n_samples},
          {"noise_sigma", noise_sigma},
          {"seed", seed}};
}

Tensor make_baseline(const Tensor& x) {
  Tensor b = x;
  const int radar = std::min(kNumRadarFrames, x.channels());
  for (int c = 0; c < radar; ++c) std::ranges::fill(b.channel(c), 0.0);
  return b;
}

FusedInput make_baseline(const FusedInput& x) { return FusedInput{make_baseline(x.channels)}; }

namespace {

void check_target(const Network& net, const Tensor& x, const AttributionTarget& target) {
  target.validate(static_cast<int>(net.outputs.size()), kNumClasses);
  if (target.height != x.height() || target.width != x.width()) {
    throw InvalidInput("target region does not match the input grid");
  }
}

OutputFunctional target_functional(const AttributionTarget& target) {
  return [&target](std::span<const Tensor> outs, std::span<Tensor> grads) {
    const std::size_t o = static_cast<std::size_t>(target.lead_time - 1);
    const auto logits = outs[o].channel(target.target_class);
    auto g = grads[o].channel(target.target_class);
    if (logits.size() != target.region.size()) throw InvalidInput("head size differs from target");
    double v = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      if (!target.region[i]) continue;
      v += logits[i];
      g[i] = 1.0;
    }
    return v;
  };
}

AttributionMap ig_impl(const Network& net, const Tensor& x, const Tensor& baseline, int steps,
                       const AttributionTarget& target) {
  Tensor sum(x.channels(), x.height(), x.width());
  Tensor point(x.channels(), x.height(), x.width());
  const auto fn = target_functional(target);
  for (int s = 1; s <= steps; ++s) {
    const double alpha = static_cast<double>(s) / steps;
    for (std::size_t i = 0; i < x.size(); ++i) point[i] = baseline[i] + alpha * (x[i] - baseline[i]);
    const auto vg = forward_with_gradient(net, point, fn);
    for (std::size_t i = 0; i < x.size(); ++i) sum[i] += vg.grad[i];
  }
  AttributionMap m;
  m.a = Tensor(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < x.size(); ++i) m.a[i] = (x[i] - baseline[i]) * sum[i] / steps;
  m.method = AttributionMethod::IG;
  m.target = target;
  m.steps = steps;
  return m;
}

}  // namespace

ValueAndGrad target_gradient(const Network& net, const Tensor& x, const AttributionTarget& target) {
  check_target(net, x, target);
  return forward_with_gradient(net, x, target_functional(target));
}

double target_value(const Network& net, const Tensor& x, const AttributionTarget& target) {
  check_target(net, x, target);
  const auto outs = network_outputs(net, forward(net, x));
  const auto logits = outs.at(target.lead_time - 1).channel(target.target_class);
  double v = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (target.region[i]) v += logits[i];
  }
  return v;
}

AttributionMap saliency(const Network& net, const Tensor& x, const AttributionTarget& target) {
  auto vg = target_gradient(net, x, target);
  for (double& g : vg.grad.values()) g = std::abs(g);
  AttributionMap m;
  m.a = std::move(vg.grad);
  m.method = AttributionMethod::Saliency;
  m.target = target;
  return m;
}

AttributionMap integrated_gradients(const Network& net, const Tensor& x, const Tensor& baseline,
                                    int steps, const AttributionTarget& target) {
  if (steps < 1) throw InvalidInput("integrated gradients needs steps >= 1");
  if (!baseline.same_shape(x)) throw InvalidInput("baseline shape differs from input");
  check_target(net, x, target);
  return ig_impl(net, x, baseline, steps, target);
}

AttributionMap smooth_integrated_gradients(const Network& net, const Tensor& x,
                                           const Tensor& baseline, int steps, int n_samples,
                                           double noise_sigma, std::uint64_t seed,
                                           const AttributionTarget& target) {
  if (n_samples < 1) throw InvalidInput("smoothed IG needs n_samples >= 1");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw InvalidInput("noise sigma must be finite and >= 0");
  }
  AttributionMap m;
  if (noise_sigma == 0.0) {
    // every sample is the same path
    m = integrated_gradients(net, x, baseline, steps, target);
  } else {
    if (steps < 1) throw InvalidInput("integrated gradients needs steps >= 1");
    if (!baseline.same_shape(x)) throw InvalidInput("baseline shape differs from input");
    check_target(net, x, target);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma);
    const int radar = std::min(kNumRadarFrames, x.channels());
    const std::size_t radar_cells = static_cast<std::size_t>(radar) * x.plane();
    Tensor acc(x.channels(), x.height(), x.width());
    for (int s = 0; s < n_samples; ++s) {
      Tensor xn = x;
      for (std::size_t i = 0; i < radar_cells; ++i) xn[i] += noise(rng);
      const auto one = ig_impl(net, xn, baseline, steps, target);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += one.a[i];
    }
    for (double& v : acc.values()) v /= n_samples;
    m.a = std::move(acc);
    m.target = target;
    m.steps = steps;
  }
  m.method = AttributionMethod::SmoothIG;
  m.n_samples = n_samples;
  m.noise_sigma = noise_sigma;
  m.seed = seed;
  return m;
}

AttributionMap random_attribution(const Tensor& x, std::uint64_t seed,
                                  const AttributionTarget& target) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AttributionMap m;
  m.a = Tensor(x.channels(), x.height(), x.width());
  for (double& v : m.a.values()) v = u(rng);
  m.method = AttributionMethod::Random;
  m.target = target;
  m.seed = seed;
  return m;
}

double default_noise_sigma(const Tensor& x) {
  const int radar = std::min(kNumRadarFrames, x.channels());
  if (radar == 0 || x.plane() == 0) return 0.0;
  const auto cells = std::span<const double>(x.data(), static_cast<std::size_t>(radar) * x.plane());
  const auto [lo, hi] = std::ranges::minmax_element(cells);
  return 0.1 * (*hi - *lo);
}

AttributionMap attribute(AttributionMethod method, const Network& net, const Tensor& x,
                         const AttributionTarget& target, const AttributionConfig& cfg) {
  switch (method) {
    case AttributionMethod::Saliency: return saliency(net, x, target);
    case AttributionMethod::IG:
      return integrated_gradients(net, x, make_baseline(x), cfg.steps, target);
    case AttributionMethod::SmoothIG: {
      const double sigma = cfg.noise_sigma < 0.0 ? default_noise_sigma(x) : cfg.noise_sigma;
      return smooth_integrated_gradients(net, x, make_baseline(x), cfg.steps, cfg.n_samples, sigma,
                                         cfg.seed, target);
    }
    case AttributionMethod::Random: return random_attribution(x, cfg.seed, target);
  }
  throw InvalidParameter("unknown attribution method");
}

nlohmann::json DeletionCurve::to_json() const {
  std::vector<bool> d(defined.begin(), defined.end());
  return {{"ks", ks}, {"scores", scores}, {"defined", d}, {"auc", auc}};
}

DeletionCurve DeletionCurve::from_json(const nlohmann::json& j) {
  DeletionCurve c;
  c.ks = j.at("ks").get<std::vector<double>>();
  c.scores = j.at("scores").get<std::vector<double>>();
  for (bool b : j.at("defined").get<std::vector<bool>>()) c.defined.push_back(b ? 1 : 0);
  c.auc = j.at("auc").get<double>();
  return c;
}

double deletion_score(const Network& net, const Tensor& x, const ClassGrid& truth,
                      const ValidityMask& mask, int lead_time, bool* defined) {
  const auto outs = network_outputs(net, forward(net, x));
  const ClassGrid pred = argmax_class(outs.at(lead_time - 1));
  const auto f1 = modified_f1(confusions(pred, truth, mask));
  if (defined) *defined = f1.defined();
  return f1.value.value_or(0.0);
}

DeletionCurve deletion_curve(const Network& net, const Tensor& x, const ClassGrid& truth,
                             const ValidityMask& mask, const AttributionMap& map,
                             const std::vector<double>& ks) {
  if (ks.empty() || ks.front() != 0.0) throw InvalidInput("deletion percentages must start at 0");
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (!(ks[i] >= 0.0) || ks[i] > 100.0) throw InvalidInput("deletion percentage outside [0, 100]");
    if (i > 0 && ks[i] <= ks[i - 1]) throw InvalidInput("deletion percentages must increase");
  }
  if (!map.a.same_shape(x)) throw InvalidInput("attribution map shape differs from input");
  map.target.validate(static_cast<int>(net.outputs.size()), kNumClasses);

  const Tensor baseline = make_baseline(x);
  const int radar = std::min(kNumRadarFrames, x.channels());
  const std::size_t n = x.plane();
  std::vector<std::vector<std::size_t>> order(radar);
  for (int c = 0; c < radar; ++c) {
    const auto a = map.a.channel(c);
    auto& idx = order[c];
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&a](std::size_t i, std::size_t j) {
      return std::max(a[i], 0.0) > std::max(a[j], 0.0);
    });
  }

  DeletionCurve curve;
  curve.ks = ks;
  Tensor work = x;
  std::size_t done = 0;
  for (double k : ks) {
    const auto count = static_cast<std::size_t>(std::llround(k / 100.0 * static_cast<double>(n)));
    for (int c = 0; c < radar; ++c) {
      for (std::size_t r = done; r < count; ++r) {
        const std::size_t cell = c * n + order[c][r];
        work[cell] = baseline[cell];
      }
    }
    done = std::max(done, count);
    bool def = false;
    curve.scores.push_back(deletion_score(net, work, truth, mask, map.target.lead_time, &def));
    curve.defined.push_back(def ? 1 : 0);
  }
  for (std::size_t i = 1; i < ks.size(); ++i) {
    curve.auc += 0.5 * (curve.scores[i] + curve.scores[i - 1]) * (ks[i] - ks[i - 1]) / 100.0;
  }
  return curve;
}

nlohmann::json MethodComparison::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : ranking) {
    nlohmann::json curves = nlohmann::json::array();
    for (const auto& c : s.curves) curves.push_back(c.to_json());
    arr.push_back({{"method", method_name(s.method)}, {"mean_auc", s.mean_auc}, {"curves", curves}});
  }
  return {{"ranking", arr}};
}

MethodComparison compare_methods(const Network& net, const std::vector<DeletionCase>& cases,
                                 const std::vector<AttributionMethod>& methods,
                                 const std::vector<double>& ks, const AttributionConfig& cfg) {
  if (cases.empty()) throw EmptyDataset("method comparison needs at least one case");
  if (methods.empty()) throw InvalidInput("method comparison needs at least one method");
  MethodComparison out;
  for (auto method : methods) {
    MethodScore s{method, 0.0, {}};
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const auto& c = cases[i];
      AttributionConfig per_case = cfg;
      per_case.seed = cfg.seed + i;
      const auto map = attribute(method, net, c.x, c.target, per_case);
      s.curves.push_back(deletion_curve(net, c.x, c.truth, c.mask, map, ks));
      s.mean_auc += s.curves.back().auc;
    }
    s.mean_auc /= static_cast<double>(cases.size());
    out.ranking.push_back(std::move(s));
  }
  std::stable_sort(out.ranking.begin(), out.ranking.end(),
                   [](const MethodScore& a, const MethodScore& b) { return a.mean_auc < b.mean_auc; });
  return out;
}

ReceptiveFieldEstimate effective_receptive_field(const Network& net,
                                                 const std::vector<Tensor>& cases,
                                                 const ValidityMask& mask, int lead_time,
                                                 int target_class, const AttributionConfig& cfg,
                                                 double mass_fraction) {
  if (cases.empty()) throw EmptyDataset("receptive field estimate needs at least one case");
  if (!(mass_fraction > 0.0 && mass_fraction <= 1.0)) throw InvalidParameter("mass fraction out of (0, 1]");
  ReceptiveFieldEstimate est;
  est.center_y = mask.height / 2;
  est.center_x = mask.width / 2;
  const auto target = AttributionTarget::pixel(lead_time, target_class, mask, est.center_y, est.center_x);
  const Tensor& first = cases.front();
  est.mean_abs = Tensor(first.channels(), first.height(), first.width());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (!cases[i].same_shape(first)) throw InvalidInput("receptive field cases differ in shape");
    AttributionConfig per_case = cfg;
    per_case.seed = cfg.seed + i;
    const auto m = attribute(AttributionMethod::SmoothIG, net, cases[i], target, per_case);
    for (std::size_t k = 0; k < m.a.size(); ++k) est.mean_abs[k] += std::abs(m.a[k]);
  }
  for (double& v : est.mean_abs.values()) v /= static_cast<double>(cases.size());

  const int h = first.height(), w = first.width();
  est.pixel_mass = Tensor(1, h, w);
  for (int c = 0; c < first.channels(); ++c) {
    const auto ch = est.mean_abs.channel(c);
    for (std::size_t p = 0; p < ch.size(); ++p) est.pixel_mass[p] += ch[p];
  }

  est.theoretical = receptive_field(net, net.outputs.at(lead_time - 1));
  const int max_r = std::max(h, w);
  std::vector<double> ring(static_cast<std::size_t>(max_r) + 1, 0.0);
  double total = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = est.pixel_mass.at(0, y, x);
      const int dy = y - est.center_y, dx = x - est.center_x;
      ring[std::max(std::abs(dy), std::abs(dx))] += v;
      total += v;
      // output p reads inputs in [p - before, p + after]
      if (dy < -est.theoretical.before || dy > est.theoretical.after ||
          dx < -est.theoretical.before || dx > est.theoretical.after) {
        est.mass_outside_theoretical += v;
      }
    }
  }
  double cum = 0.0;
  est.effective_radius = 0;
  if (total > 0.0) {
    for (int r = 0; r <= max_r; ++r) {
      cum += ring[r];
      est.effective_radius = r;
      if (cum >= mass_fraction * total) break;
    }
  }
  return est;
}

nlohmann::json ReceptiveFieldEstimate::to_json(double km_per_pixel) const {
  return {{"center", {center_y, center_x}},
          {"effective_radius_px", effective_radius},
          {"effective_size_km", (2 * effective_radius + 1) * km_per_pixel},
          {"theoretical_before_px", theoretical.before},
          {"theoretical_after_px", theoretical.after},
          {"theoretical_radius_px", theoretical.radius()},
          {"theoretical_size_km", theoretical.size() * km_per_pixel},
          {"mass_outside_theoretical", mass_outside_theoretical}};
}

nlohmann::json render_payload(const AttributionMap& map) {
  nlohmann::json channels = nlohmann::json::array();
  double overall = 0.0;
  for (int c = 0; c < map.a.channels(); ++c) {
    double m = 0.0;
    for (double v : map.a.channel(c)) m = std::max(m, std::abs(v));
    overall = std::max(overall, m);
    channels.push_back({{"channel", c}, {"vmin", -m}, {"vmax", m}});
  }
  auto j = map.metadata();
  j["shape"] = {map.a.channels(), map.a.height(), map.a.width()};
  j["vmin"] = -overall;
  j["vmax"] = overall;
  j["channels"] = channels;
  j["colormap"] = "diverging";
  return j;
}

void save_attribution(const std::filesystem::path& grdf_path, const AttributionMap& map) {
  auto f = tensor_to_grdf(map.a, "attribution");
  f.lead_time = map.target.lead_time;
  f.extra = map.metadata();
  f.extra["region"] = map.target.region;
  write_grdf(grdf_path, f);
}

AttributionMap load_attribution(const std::filesystem::path& grdf_path) {
  const auto f = read_grdf(grdf_path);
  if (f.kind != "attribution") throw InvalidInput("not an attribution file: " + grdf_path.string());
  AttributionMap m;
  m.a = grdf_to_tensor(f);
  const auto& e = f.extra;
  m.method = method_from_name(e.at("method").get<std::string>());
  m.steps = e.at("steps").get<int>();
  m.n_samples = e.at("n_samples").get<int>();
  m.noise_sigma = e.at("noise_sigma").get<double>();
  m.seed = e.at("seed").get<std::uint64_t>();
  const auto& t = e.at("target");
  m.target.lead_time = t.at("lead_time").get<int>();
  m.target.target_class = t.at("target_class").get<int>();
  m.target.height = t.at("height").get<int>();
  m.target.width = t.at("width").get<int>();
  m.target.region = e.at("region").get<std::vector<std::uint8_t>>();
  return m;
}

}  // namespace nowcast
