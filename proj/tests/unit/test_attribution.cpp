#include <doctest.h>

#include <filesystem>

#include "nowcast/attribution.hpp"
#include "nowcast/datagen.hpp"
#include "nowcast/grdf.hpp"
#include "nowcast/model.hpp"
#include "oracles.hpp"

using namespace nowcast;

namespace {

// Six linear heads; coefficients are multiples of 1/8 so every IG sum is exact.
Network linear_heads(std::uint64_t seed) {
  Network net(kNumInputChannels);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> q(-16, 16);
  for (int l = 0; l < kNumLeadTimes; ++l) {
    const int h = net.add(Op::PixelLinear, {0}, kNumClasses);
    for (auto& w : net.layers[h].weight) w = q(rng) / 8.0;
    for (auto& b : net.layers[h].bias) b = q(rng) / 8.0;
    net.outputs.push_back(h);
  }
  return net;
}

Tensor dyadic_input(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> q(0, 160);
  Tensor x(kNumInputChannels, h, w);
  for (auto& v : x.values()) v = q(rng) / 16.0;
  return x;
}

NetworkParams small_net(std::uint64_t seed) {
  auto p = build_segmentation_net({4, 6, 6});
  init_weights(p.graph, seed);
  return p;
}

}  // namespace

TEST_CASE("method names") {
  for (auto m : {AttributionMethod::Saliency, AttributionMethod::IG, AttributionMethod::SmoothIG,
                 AttributionMethod::Random}) {
    CHECK(method_from_name(method_name(m)) == m);
  }
  CHECK_THROWS_AS(method_from_name("gradcam"), InvalidParameter);
}

TEST_CASE("targets validate class, lead time and mask") {
  const ValidityMask mask = radar_coverage_mask(16, 16);
  CHECK_THROWS_AS(AttributionTarget::pixel(1, 1, mask, 0, 0), InvalidInput);
  const auto t = AttributionTarget::pixel(2, 1, mask, 8, 8);
  CHECK(t.region_size() == 1);
  CHECK(AttributionTarget::over_mask(1, 0, mask).region_size() == mask.count());
  auto bad = t;
  bad.target_class = 3;
  CHECK_THROWS_AS(bad.validate(6, 3), InvalidInput);
  bad = t;
  bad.lead_time = 7;
  CHECK_THROWS_AS(bad.validate(6, 3), InvalidInput);
}

TEST_CASE("baseline zeroes radar and keeps coordinates") {
  const Scenario s = generate(sample_spec(RainType::MonsoonCentral, 4, {16, 16}));
  const Tensor b = make_baseline(s.inputs.channels);
  for (int c = 0; c < kNumInputChannels; ++c) {
    for (std::size_t i = 0; i < b.plane(); ++i) {
      CHECK(b.channel(c)[i] == (c < kNumRadarFrames ? 0.0 : s.inputs.channels.channel(c)[i]));
    }
  }
}

TEST_CASE("saliency on constant and linear nets") {
  const ValidityMask mask(8, 8);
  const auto target = AttributionTarget::pixel(3, 2, mask, 4, 5);
  Network constant = linear_heads(1);
  for (int o : constant.outputs) std::fill(constant.layers[o].weight.begin(), constant.layers[o].weight.end(), 0.0);
  const auto flat = saliency(constant, dyadic_input(8, 8, 1), target);
  for (double v : flat.a.values()) CHECK(v == 0.0);

  const Network lin = linear_heads(2);
  const auto a = saliency(lin, dyadic_input(8, 8, 3), target);
  const auto b = saliency(lin, dyadic_input(8, 8, 4), target);
  CHECK(a.a == b.a);
  const auto& w = lin.layers[lin.outputs[2]].weight;
  for (int c = 0; c < kNumInputChannels; ++c) CHECK(a.a.at(c, 4, 5) == std::abs(w[2 * kNumInputChannels + c]));
}

TEST_CASE("saliency matches finite differences") {
  const auto p = small_net(3);
  const Scenario s = generate(sample_spec(RainType::IsolatedThunderstorm, 6, {16, 16}));
  const auto target = AttributionTarget::pixel(1, 1, s.mask, 8, 8);
  const auto sal = saliency(p.graph, s.inputs.channels, target);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> yx(4, 12), ch(0, kNumInputChannels - 1);
  for (int i = 0; i < 20; ++i) {
    const int c = ch(rng), y = yx(rng), x = yx(rng);
    const std::size_t k = static_cast<std::size_t>(c) * 256 + y * 16 + x;
    const double fd = oracle::central_difference(
        [&](const Tensor& t) { return target_value(p.graph, t, target); }, s.inputs.channels, k, 1e-4);
    CHECK(oracle::relative_error(sal.a[k], std::abs(fd), 1e-6) < 1e-3);
  }
}

TEST_CASE("integrated gradients axioms") {
  const ValidityMask mask(8, 8);
  const auto target = AttributionTarget::pixel(4, 0, mask, 2, 6);
  const Network lin = linear_heads(5);
  const Tensor x = dyadic_input(8, 8, 6), base = make_baseline(x);

  SUBCASE("zero at the baseline") {
    const auto p = small_net(1);
    const auto ig = integrated_gradients(p.graph, base, base, 16, target);
    for (double v : ig.a.values()) CHECK(v == 0.0);
  }
  SUBCASE("exact on linear models for any step count") {
    const auto& w = lin.layers[lin.outputs[3]].weight;
    for (int steps : {1, 7, 64, 128}) {
      const auto ig = integrated_gradients(lin, x, base, steps, target);
      for (int c = 0; c < kNumInputChannels; ++c) {
        for (int y = 0; y < 8; ++y) {
          for (int xx = 0; xx < 8; ++xx) {
            const double expect = (y == 2 && xx == 6) ? w[c] * (x.at(c, y, xx) - base.at(c, y, xx)) : 0.0;
            CHECK(ig.a.at(c, y, xx) == expect);
          }
        }
      }
    }
  }
  SUBCASE("completeness improves with steps on a nonlinear net") {
    const auto p = small_net(2);
    const Scenario s = generate(sample_spec(RainType::CycloneInland, 8, {16, 16}));
    const auto t = AttributionTarget::over_mask(1, 1, s.mask);
    const Tensor b = make_baseline(s.inputs.channels);
    const double gap = target_value(p.graph, s.inputs.channels, t) - target_value(p.graph, b, t);
    auto err = [&](int steps) {
      const auto ig = integrated_gradients(p.graph, s.inputs.channels, b, steps, t);
      double sum = 0.0;
      for (double v : ig.a.values()) sum += v;
      return std::abs(sum - gap);
    };
    CHECK(err(128) <= err(4) + 1e-12);
    CHECK(err(128) <= 0.01 * std::abs(gap));
  }
  CHECK_THROWS_AS(integrated_gradients(lin, x, base, 0, target), InvalidInput);
}

TEST_CASE("smoothed IG degenerates and is reproducible") {
  const auto p = small_net(4);
  const Scenario s = generate(sample_spec(RainType::MonsoonCentral, 2, {16, 16}));
  const auto t = AttributionTarget::pixel(2, 1, s.mask, 7, 9);
  const Tensor& x = s.inputs.channels;
  const Tensor b = make_baseline(x);
  const auto ig = integrated_gradients(p.graph, x, b, 8, t);
  CHECK(smooth_integrated_gradients(p.graph, x, b, 8, 5, 0.0, 3, t).a == ig.a);
  const auto r1 = smooth_integrated_gradients(p.graph, x, b, 8, 1, 0.5, 42, t);
  const auto r2 = smooth_integrated_gradients(p.graph, x, b, 8, 1, 0.5, 42, t);
  CHECK(r1.a == r2.a);
  CHECK(r1.a != ig.a);
  CHECK_THROWS_AS(smooth_integrated_gradients(p.graph, x, b, 8, 0, 0.5, 1, t), InvalidInput);
  CHECK_THROWS_AS(smooth_integrated_gradients(p.graph, x, b, 8, 2, -1.0, 1, t), InvalidInput);
}

TEST_CASE("smoothed IG variance falls with more samples") {
  const auto p = small_net(6);
  const Scenario s = generate(sample_spec(RainType::CycloneEastCoast, 3, {16, 16}));
  const auto t = AttributionTarget::pixel(1, 2, s.mask, 8, 8);
  const Tensor& x = s.inputs.channels;
  const Tensor b = make_baseline(x);
  const double sigma = default_noise_sigma(x);
  auto spread = [&](int n) {
    const int reps = 6;
    std::vector<Tensor> maps;
    for (int r = 0; r < reps; ++r) maps.push_back(smooth_integrated_gradients(p.graph, x, b, 2, n, sigma, 100 + r, t).a);
    double var = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      double m = 0.0, m2 = 0.0;
      for (const auto& a : maps) m += a[i];
      m /= reps;
      for (const auto& a : maps) m2 += (a[i] - m) * (a[i] - m);
      var += m2 / (reps - 1);
    }
    return var;
  };
  CHECK(spread(75) < spread(10));
}

TEST_CASE("random attribution is seeded") {
  const ValidityMask mask(8, 8);
  const auto t = AttributionTarget::over_mask(1, 1, mask);
  const Tensor x = dyadic_input(8, 8, 1);
  CHECK(random_attribution(x, 4, t).a == random_attribution(x, 4, t).a);
  CHECK(random_attribution(x, 4, t).a != random_attribution(x, 5, t).a);
  const auto r = random_attribution(x, 4, t);
  for (double v : r.a.values()) {
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("deletion curve anchors and ranking") {
  const auto p = small_net(9);
  const Scenario s = generate(sample_spec(RainType::MonsoonCentral, 12, {16, 16}));
  const ClassGrid truth = s.truth_classes(1);
  const auto t = AttributionTarget::over_mask(1, 1, s.mask);
  const Tensor& x = s.inputs.channels;
  const auto map = random_attribution(x, 1, t);
  const auto curve = deletion_curve(p.graph, x, truth, s.mask, map);
  REQUIRE(curve.scores.size() == kDefaultDeletionKs.size());
  CHECK(curve.scores.front() == deletion_score(p.graph, x, truth, s.mask, 1));
  CHECK(curve.scores.back() == deletion_score(p.graph, make_baseline(x), truth, s.mask, 1));
  double auc = 0.0;
  for (std::size_t i = 1; i < curve.ks.size(); ++i) {
    auc += 0.5 * (curve.scores[i] + curve.scores[i - 1]) * (curve.ks[i] - curve.ks[i - 1]) / 100.0;
  }
  CHECK(curve.auc == doctest::Approx(auc).epsilon(1e-14));
  CHECK(DeletionCurve::from_json(curve.to_json()).scores == curve.scores);
  CHECK_THROWS_AS(deletion_curve(p.graph, x, truth, s.mask, map, {5, 10}), InvalidInput);
  CHECK_THROWS_AS(deletion_curve(p.graph, x, truth, s.mask, map, {0, 50, 40}), InvalidInput);

  const std::vector<DeletionCase> cases = {{x, truth, s.mask, t}};
  AttributionConfig cfg;
  cfg.steps = 4;
  const auto one = compare_methods(p.graph, cases, {AttributionMethod::Random}, {0, 50, 100}, cfg);
  CHECK(one.ranking.size() == 1);
  const auto a = compare_methods(p.graph, cases, {AttributionMethod::IG, AttributionMethod::Random}, {0, 50, 100}, cfg);
  const auto b = compare_methods(p.graph, cases, {AttributionMethod::IG, AttributionMethod::Random}, {0, 50, 100}, cfg);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.ranking[0].mean_auc <= a.ranking[1].mean_auc);
}

TEST_CASE("receptive field mass stays inside the theoretical bound") {
  const auto p = small_net(10);
  const auto data = make_dataset({1, 1, 1, 0, 0, 0}, 5, {32, 32});
  std::vector<Tensor> xs;
  for (const auto& s : data) xs.push_back(s.inputs.channels);
  AttributionConfig cfg;
  cfg.steps = 4;
  cfg.n_samples = 2;
  const auto rf = effective_receptive_field(p.graph, xs, data[0].mask, 1, 1, cfg);
  CHECK(rf.mass_outside_theoretical == 0.0);
  CHECK(rf.effective_radius <= rf.theoretical.radius());
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const bool inside = y >= rf.center_y - rf.theoretical.before && y <= rf.center_y + rf.theoretical.after &&
                          x >= rf.center_x - rf.theoretical.before && x <= rf.center_x + rf.theoretical.after;
      if (!inside) CHECK(rf.pixel_mass.at(0, y, x) == 0.0);
    }
  }
  const auto j = rf.to_json(2.0);
  CHECK(j.at("effective_radius_px") == rf.effective_radius);
}

TEST_CASE("render payload and persistence") {
  const auto p = small_net(11);
  const Scenario s = generate(sample_spec(RainType::CycloneInland, 1, {16, 16}));
  const auto t = AttributionTarget::over_mask(3, 2, s.mask);
  auto map = integrated_gradients(p.graph, s.inputs.channels, make_baseline(s.inputs.channels), 4, t);
  double mx = 0.0;
  for (double v : map.a.values()) mx = std::max(mx, std::abs(v));
  const auto payload = render_payload(map);
  CHECK(payload.at("vmax").get<double>() == mx);
  CHECK(payload.at("vmin").get<double>() == -mx);
  CHECK(payload.at("colormap") == "diverging");

  const auto path = std::filesystem::temp_directory_path() / "nowcast_unit_attr.grdf";
  save_attribution(path, map);
  const auto back = load_attribution(path);
  CHECK(back.method == map.method);
  CHECK(back.target.lead_time == 3);
  CHECK(back.target.target_class == 2);
  CHECK(back.target.region == map.target.region);
  Tensor q = map.a;
  quantize_to_float32(q);
  CHECK(back.a == q);
  std::filesystem::remove(path);
}
