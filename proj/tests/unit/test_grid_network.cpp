#include <doctest.h>

#include <random>

#include "nowcast/model.hpp"
#include "nowcast/network.hpp"
#include "oracles.hpp"

using namespace nowcast;

namespace {

Tensor pixel_logits(std::initializer_list<double> z) {
  Tensor t(static_cast<int>(z.size()), 1, 1);
  int i = 0;
  for (double v : z) t[i++] = v;
  return t;
}

Tensor random_input(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor x(kNumInputChannels, h, w);
  for (auto& v : x.values()) v = u(rng);
  return x;
}

}  // namespace

TEST_CASE("softmax values") {
  auto p = softmax(pixel_logits({0, 0, 0}));
  for (int k = 0; k < 3; ++k) CHECK(p[k] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  p = softmax(pixel_logits({-7.5, -7.5, -7.5}));
  for (int k = 0; k < 3; ++k) CHECK(p[k] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  p = softmax(pixel_logits({2, 0, 0}));
  CHECK(std::abs(p[0] - 0.7870) < 1e-4);
  CHECK(std::abs(p[1] - 0.1065) < 1e-4);
  CHECK(std::abs(p[2] - 0.1065) < 1e-4);
  // huge logits must not overflow
  p = softmax(pixel_logits({1000, 0, -1000}));
  CHECK(p[0] == 1.0);
  CHECK(p.all_finite());
}

TEST_CASE("rain classes and argmax tie rule") {
  CHECK(rain_class(0.5) == 0);
  CHECK(rain_class(1.0) == 1);
  CHECK(rain_class(9.999) == 1);
  CHECK(rain_class(10.0) == 2);
  CHECK(rain_class(15.0) == 2);
  RainField f{Tensor(1, 8, 8, 0.0), 0};
  CHECK(rain_to_classes(f) == ClassGrid(8, 8, 0));
  f.values[0] = -1.0;
  CHECK_THROWS_AS(f.validate(), InvalidInput);

  CHECK(argmax_class(pixel_logits({0.1, 0.7, 0.2})).labels[0] == 1);
  CHECK(argmax_class(pixel_logits({0.4, 0.4, 0.2})).labels[0] == 0);
  CHECK(argmax_class(Tensor(3, 5, 5, 1.0 / 3)) == ClassGrid(5, 5, 0));
}

TEST_CASE("linear network gradient equals its weight") {
  Network net(kNumInputChannels);
  const int out = net.add(Op::PixelLinear, {0}, 1, "lin");
  net.outputs = {out};
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  for (auto& w : net.layers[out].weight) w = n(rng);
  const Tensor x = random_input(6, 5, 2);
  const int py = 3, px = 2;
  const auto vg = forward_with_gradient(net, x, [&](std::span<const Tensor> o, std::span<Tensor> g) {
    g[0].at(0, py, px) = 1.0;
    return o[0].at(0, py, px);
  });
  for (int c = 0; c < kNumInputChannels; ++c) {
    for (int y = 0; y < 6; ++y) {
      for (int xx = 0; xx < 5; ++xx) {
        const double expect = (y == py && xx == px) ? net.layers[out].weight[c] : 0.0;
        CHECK(vg.grad.at(c, y, xx) == expect);
      }
    }
  }
}

TEST_CASE("constant functional has zero gradient") {
  auto p = build_segmentation_net({4, 4, 4});
  init_weights(p.graph, 3);
  const auto vg = forward_with_gradient(p.graph, random_input(8, 8, 1),
                                        [](std::span<const Tensor>, std::span<Tensor>) { return 4.2; });
  CHECK(vg.value == 4.2);
  for (double g : vg.grad.values()) CHECK(g == 0.0);
}

TEST_CASE("reverse mode matches central differences") {
  auto p = build_segmentation_net({4, 6, 6});
  init_weights(p.graph, 7);
  const Tensor x = random_input(8, 8, 11);
  const oracle::RandomProjection f(p.graph, x, 5);
  const auto vg = forward_with_gradient(p.graph, x, f);
  CHECK(vg.value == doctest::Approx(f.value(p.graph, x)).epsilon(1e-12));

  std::mt19937_64 rng(19);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t k = pick(rng);
    const double fd = oracle::central_difference([&](const Tensor& t) { return f.value(p.graph, t); }, x, k, 1e-3);
    worst = std::max(worst, oracle::relative_error(vg.grad[k], fd));
  }
  CHECK(worst < 1e-3);

  // parameter gradients too
  const auto acts = forward(p.graph, x);
  auto outs = network_outputs(p.graph, acts);
  std::vector<Tensor> d;
  for (const auto& o : outs) d.emplace_back(o.channels(), o.height(), o.width());
  f(outs, d);
  Gradients g(p.graph);
  backward(p.graph, acts, d, g);
  const int conv = 5;  // enc2.conv
  REQUIRE(p.graph.layers[conv].op == Op::Conv3x3);
  for (std::size_t k : {std::size_t{0}, std::size_t{17}, std::size_t{100}}) {
    Network tweak = p.graph;
    const double w0 = tweak.layers[conv].weight[k];
    tweak.layers[conv].weight[k] = w0 + 1e-4;
    const double up = f.value(tweak, x);
    tweak.layers[conv].weight[k] = w0 - 1e-4;
    const double down = f.value(tweak, x);
    CHECK(oracle::relative_error(g.weight[conv][k], (up - down) / 2e-4) < 1e-3);
  }
}

TEST_CASE("architecture descriptor round trip") {
  auto p = build_segmentation_net();
  const auto arch = architecture_json(p.graph);
  const Network back = network_from_architecture(arch);
  CHECK(back.layers.size() == p.graph.layers.size());
  CHECK(back.num_params() == p.graph.num_params());
  CHECK(back.outputs == p.graph.outputs);
  auto bad = arch;
  bad["layers"][1]["op"] = "Conv5x5";
  CHECK_THROWS_AS(network_from_architecture(bad), UnsupportedOp);
}

TEST_CASE("theoretical receptive field of stacked convolutions") {
  for (int d = 1; d <= 4; ++d) {
    Network net(1);
    int x = 0;
    for (int i = 0; i < d; ++i) x = net.add(Op::Conv3x3, {x}, 1);
    net.outputs = {x};
    const auto rf = receptive_field(net, x);
    CHECK(rf.size() == 2 * d + 1);
    CHECK(rf.radius() == d);
  }
}
