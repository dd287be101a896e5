// Acceptance suite: one PASS/FAIL line per criterion.
// Runs the full pipeline with the default configuration in a scratch store and checks
// its artifacts, plus self-contained property checks. Tolerances are pinned below.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>

#include "nowcast/attribution.hpp"
#include "nowcast/calibration.hpp"
#include "nowcast/grdf.hpp"
#include "nowcast/service.hpp"
#include "nowcast/verif.hpp"
#include "oracles.hpp"

using namespace nowcast;
namespace fs = std::filesystem;

namespace {

// pinned tolerances and budgets
constexpr double kMetricBudgetS = 10;
constexpr double kGradTol = 1e-3;
constexpr double kGradBudgetS = 60;
constexpr double kCompletenessTol = 0.01;
constexpr double kIgBudgetS = 300;
constexpr double kDeletionWinShare = 0.8;
constexpr double kExplainBudgetS = 900;
constexpr double kTemperatureRatioTol = 0.10;
constexpr double kLtsF1Tol = 0.005;
constexpr double kCalibrateBudgetS = 1200;
constexpr double kClassifierAccuracy = 0.90;
constexpr double kSamplerTol = 0.02;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  failures += o.pass ? 0 : 1;
  std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// self-contained checks

Outcome metric_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240601);
  std::discrete_distribution<int> cls({6, 3, 1});
  int mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const ClassGrid pred = oracle::random_grid(rng, 8, 8, cls);
    const ClassGrid truth = oracle::random_grid(rng, 8, 8, cls);
    ValidityMask mask(8, 8);
    for (auto& v : mask.valid) v = (rng() % 5) != 0;
    const auto c = confusions(pred, truth, mask);
    const auto o1 = oracle::brute_counts(pred, truth, mask, 1);
    const auto o10 = oracle::brute_counts(pred, truth, mask, 2);
    const auto d = diagram_point(c.over1, c.over10);
    const bool ok = oracle::same(modified_pod(c.over1, c.over10), oracle::average(oracle::pod(o1), oracle::pod(o10))) &&
                    oracle::same(modified_far(c.over1, c.over10), oracle::average(oracle::far(o1), oracle::far(o10))) &&
                    oracle::same(modified_f1(c), oracle::average(oracle::f1(o1), oracle::f1(o10))) &&
                    oracle::same(d.csi, oracle::average(oracle::csi(o1), oracle::csi(o10))) &&
                    oracle::same(d.bias, oracle::average(oracle::bias(o1), oracle::bias(o10))) &&
                    oracle::same(d.success_ratio, oracle::average(oracle::sr(o1), oracle::sr(o10)));
    mismatches += ok ? 0 : 1;
  }
  const double t = seconds_since(t0);
  return {mismatches == 0 && t < kMetricBudgetS, fmt("200 grids, %d mismatches, %.2fs", mismatches, t)};
}

Outcome hand_cases() {
  const auto tc = [](std::int64_t h, std::int64_t m, std::int64_t fa, Threshold t) {
    return ThresholdConfusion{h, m, fa, 0, t};
  };
  const double pod = *modified_pod(tc(3, 1, 0, Threshold::Over1mm), tc(1, 1, 0, Threshold::Over10mm)).value;
  const double far = *modified_far(tc(3, 0, 1, Threshold::Over1mm), tc(1, 0, 1, Threshold::Over10mm)).value;
  const double f1 = *modified_f1(tc(3, 1, 1, Threshold::Over1mm), tc(1, 1, 1, Threshold::Over10mm)).value;
  return {pod == 0.625 && far == 0.375 && f1 == 0.625, fmt("POD %.17g FAR %.17g F1 %.17g", pod, far, f1)};
}

// Central difference of the projection, or nothing when the +-h evaluations put some
// ReLU on different sides of its kink (the function is not differentiable there at that scale).
std::optional<double> kink_free_difference(const oracle::RandomProjection& f, const Network& up_net, const Tensor& up_x,
                                           const Network& down_net, const Tensor& down_x, double h) {
  const auto up = forward(up_net, up_x), down = forward(down_net, down_x);
  for (std::size_t l = 0; l < up_net.layers.size(); ++l) {
    if (up_net.layers[l].op != Op::Relu) continue;
    const int in = up_net.layers[l].inputs[0];
    const Tensor &a = up.at(in), &b = down.at(in);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if ((a[i] > 0.0) != (b[i] > 0.0)) return std::nullopt;
    }
  }
  auto value = [&](const Network& net, const Activations& acts) {
    const auto outs = network_outputs(net, acts);
    double s = 0.0;
    for (std::size_t k = 0; k < outs.size(); ++k) {
      for (std::size_t i = 0; i < outs[k].size(); ++i) s += f.coeffs[k][i] * outs[k][i];
    }
    return s;
  };
  return (value(up_net, up) - value(down_net, down)) / (2.0 * h);
}

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr double h = 1e-6;
  double worst = 0.0;
  int redrawn = 0, checked = 0;
  for (std::uint64_t n = 0; n < 5; ++n) {
    auto p = build_segmentation_net();
    init_weights(p.graph, 1000 + n);
    const Scenario s = generate(sample_spec(rain_type_from_index(static_cast<int>(n)), 50 + n, {16, 16}));
    const Tensor& x = s.inputs.channels;
    const oracle::RandomProjection f(p.graph, x, 77 + n);
    const auto vg = forward_with_gradient(p.graph, x, std::cref(f));
    Gradients grads(p.graph);
    {
      const auto acts = forward(p.graph, x);
      const auto outs = network_outputs(p.graph, acts);
      std::vector<Tensor> d;
      for (const auto& o : outs) d.emplace_back(o.channels(), o.height(), o.width());
      f(outs, d);
      backward(p.graph, acts, d, grads, false);
    }
    const std::vector<double> theta = p.graph.flatten_params();
    std::vector<double> g_theta;
    for (std::size_t l = 0; l < grads.weight.size(); ++l) {
      g_theta.insert(g_theta.end(), grads.weight[l].begin(), grads.weight[l].end());
      g_theta.insert(g_theta.end(), grads.bias[l].begin(), grads.bias[l].end());
    }
    std::mt19937_64 rng(9 + n);
    std::uniform_int_distribution<std::size_t> pick(0, x.size() + theta.size() - 1);
    for (int k = 0; k < 20;) {
      const std::size_t i = pick(rng);
      double analytic;
      std::optional<double> numeric;
      if (i < x.size()) {
        Tensor up = x, down = x;
        up[i] += h;
        down[i] -= h;
        analytic = vg.grad[i];
        numeric = kink_free_difference(f, p.graph, up, p.graph, down, h);
      } else {
        const std::size_t j = i - x.size();
        Network up = p.graph, down = p.graph;
        auto th = theta;
        th[j] = theta[j] + h;
        up.load_params(th);
        th[j] = theta[j] - h;
        down.load_params(th);
        analytic = g_theta[j];
        numeric = kink_free_difference(f, up, x, down, x, h);
      }
      if (!numeric) {
        ++redrawn;
        continue;
      }
      worst = std::max(worst, oracle::relative_error(analytic, *numeric));
      ++checked;
      ++k;
    }
  }
  const double t = seconds_since(t0);
  return {worst < kGradTol && t < kGradBudgetS,
          fmt("5 nets x 20 coordinates (inputs and parameters), max rel err %.2e; %d draws redrawn for crossing a ReLU kink; %.1fs",
              worst, redrawn, t)};
}

Outcome calibration_suite(const LoadedRun& run, const std::vector<Scenario>& test) {
  std::vector<std::string> bad;
  // argmax invariance and T = 1 identity on every test case and lead time
  long grids = 0;
  for (const auto& s : test) {
    const auto logits = predict(run.segmentation, s.inputs.channels);
    for (int lead = 1; lead <= kNumLeadTimes; ++lead) {
      const auto T = TemperatureScalar::from_json(
          read_json(run.dir / "calibration" / ("temperature_lead" + std::to_string(lead) + ".json")));
      const LogitGrid& z = logits[lead - 1];
      if (!(argmax_class(apply_temperature(z, T).probs.p) == argmax_class(z.z))) bad.push_back("argmax " + s.id);
      if (!(apply_temperature(z, 1.0).probs.p == softmax(z).p)) bad.push_back("identity " + s.id);
      ++grids;
    }
  }
  // temperature tracks a 3x logit scaling on synthetic pixels drawn from softmax(base)
  auto fit_scaled = [](double scale) {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> g(0.0, 1.5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    PixelSet px;
    for (int i = 0; i < 20000; ++i) {
      double e[kNumClasses], sum = 0.0;
      for (int k = 0; k < kNumClasses; ++k) {
        const double v = g(rng);
        px.logits.push_back(v * scale);
        e[k] = std::exp(v);
        sum += e[k];
      }
      double r = u(rng) * sum;
      int label = 0;
      while (label < kNumClasses - 1 && r >= e[label]) r -= e[label++];
      px.labels.push_back(static_cast<std::uint8_t>(label));
    }
    return fit_temperature(px).T;
  };
  const double t1 = fit_scaled(1.0), t3 = fit_scaled(3.0);
  const double ratio = t3 / t1;
  if (std::abs(ratio / 3.0 - 1.0) >= kTemperatureRatioTol) bad.push_back(fmt("T ratio %.3f", ratio));

  const std::vector<double> conf = {0.9, 0.9, 0.9, 0.9, 0.9, 0.6, 0.6, 0.6, 0.6, 0.6};
  const std::vector<std::uint8_t> ok = {1, 1, 1, 0, 0, 1, 1, 1, 0, 0};
  const double hand = ece(conf, ok, 2);
  if (hand != 0.15) bad.push_back(fmt("hand ECE %.17g", hand));
  const std::vector<double> cal = {0.25, 0.25, 0.25, 0.25, 0.75, 0.75, 0.75, 0.75};
  const std::vector<std::uint8_t> cal_ok = {1, 0, 0, 0, 1, 1, 1, 0};
  const double zero = ece(cal, cal_ok, 2);
  if (zero != 0.0) bad.push_back(fmt("calibrated ECE %.17g", zero));

  return {bad.empty(), fmt("%ld grids invariant under fitted and unit T; T(3x)/T(1x) = %.4f; hand ECE %.17g; calibrated ECE %g%s",
                           grids, ratio, hand, zero, bad.empty() ? "" : ("; first problem: " + bad.front()).c_str())};
}

Outcome sampler_law(const std::vector<int>& labels) {
  std::array<int, kNumRainTypes> counts{};
  for (int l : labels) ++counts[l];
  const Sampler s = make_sampler(std::vector<int>(counts.begin(), counts.end()), labels);
  std::mt19937_64 rng(100000);
  std::array<long, kNumRainTypes> hits{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++hits[labels[s.draw(rng)]];
  double worst = 0.0;
  for (int c = 0; c < kNumRainTypes; ++c) {
    const double p = s.class_probability(c);
    if (p == 0.0) continue;
    worst = std::max(worst, std::abs(hits[c] / static_cast<double>(draws) - p) / p);
  }
  return {worst < kSamplerTol, fmt("max relative deviation %.4f", worst)};
}

// Linear heads with dyadic coefficients: every partial sum in IG is exact.
Outcome ig_linear_exactness() {
  Network net(kNumInputChannels);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> q(-16, 16);
  for (int l = 0; l < kNumLeadTimes; ++l) {
    const int h = net.add(Op::PixelLinear, {0}, kNumClasses);
    for (auto& w : net.layers[h].weight) w = q(rng) / 8.0;
    for (auto& b : net.layers[h].bias) b = q(rng) / 8.0;
    net.outputs.push_back(h);
  }
  Tensor x(kNumInputChannels, 12, 12);
  std::uniform_int_distribution<int> v(0, 160);
  for (auto& e : x.values()) e = v(rng) / 16.0;
  const Tensor b = make_baseline(x);
  const ValidityMask mask(12, 12);
  long wrong = 0;
  for (int steps : {1, 16, 128}) {
    const auto t = AttributionTarget::pixel(2, 1, mask, 5, 7);
    const auto ig = integrated_gradients(net, x, b, steps, t);
    const auto& w = net.layers[net.outputs[1]].weight;
    for (int c = 0; c < kNumInputChannels; ++c) {
      for (int y = 0; y < 12; ++y) {
        for (int xx = 0; xx < 12; ++xx) {
          const double expect = (y == 5 && xx == 7) ? w[kNumInputChannels + c] * (x.at(c, y, xx) - b.at(c, y, xx)) : 0.0;
          wrong += ig.a.at(c, y, xx) != expect;
        }
      }
    }
  }
  return {wrong == 0, fmt("%ld mismatching entries", wrong)};
}

// ---------------------------------------------------------------------------

struct PipelineRun {
  RunRecord record;
  std::map<std::string, double> stage_seconds;
};

PipelineRun run_timed(const RunStore& store, const ServiceConfig& cfg, bool verbose) {
  PipelineRun out;
  for (Stage s : kStages) {
    const auto t0 = std::chrono::steady_clock::now();
    out.record = run_stage(store, cfg, s, [&](const std::string& m) {
      if (verbose) std::fprintf(stderr, "  [%s] %s\n", std::string(stage_name(s)).c_str(), m.c_str());
    });
    out.stage_seconds[std::string(stage_name(s))] = seconds_since(t0);
    if (out.record.status == RunStatus::Failed) break;
  }
  return out;
}

ServiceConfig tiny_config() {
  return ServiceConfig::from_json(nlohmann::json::parse(R"({
    "seed": 11,
    "data": {"profile": [3, 4, 3, 3, 3, 4], "grid": [16, 16]},
    "model": {"arch": {"enc1": 4, "enc2": 4, "enc3": 4}, "train": {"epochs": 2}},
    "classifier": {"train": {"epochs": 2}},
    "calibration": {"sampling": {"length": 50, "repeats": 2}, "lts": {"epochs": 2, "hidden": 4}},
    "explain": {"deletion_cases": 2, "steps": 4, "n_samples": 2, "ks": [0, 50, 100],
                "rf_cases": 2, "rf_steps": 2, "rf_samples": 1}
  })"));
}

Outcome determinism(const fs::path& scratch) {
  const ServiceConfig cfg = tiny_config();
  const RunStore a(scratch / "det_a"), b(scratch / "det_b");
  const auto ra = run_pipeline(a, cfg), rb = run_pipeline(b, ServiceConfig::from_json(cfg.to_json()));
  if (ra.status != RunStatus::Done || rb.status != RunStatus::Done) return {false, "a run did not finish"};
  if (ra.run_id != rb.run_id) return {false, "run ids differ: " + ra.run_id + " vs " + rb.run_id};
  int weights = 0, reports = 0, differing = 0;
  for (const auto& [name, ref] : ra.artifacts) {
    const auto it = rb.artifacts.find(name);
    if (it == rb.artifacts.end() || it->second.sha256 != ref.sha256) {
      ++differing;
      continue;
    }
    weights += name.rfind("weights.", 0) == 0 || name.rfind("calibrator.", 0) == 0;
    reports += name.rfind("report.", 0) == 0;
  }
  const bool ok = differing == 0 && ra.artifacts.size() == rb.artifacts.size() && weights > 0 && reports > 0;
  return {ok, fmt("run_id %s; %zu artifacts (%d weights/calibrators, %d reports), %d differ", ra.run_id.c_str(),
                  ra.artifacts.size(), weights, reports, differing)};
}

}  // namespace

int main(int argc, char** argv) {
  // usage: acceptance [scratch-dir] [--reuse]
  fs::path scratch = fs::temp_directory_path() / "nowcast-acceptance";
  bool reuse = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--reuse") reuse = true;
    else scratch = a;
  }
  if (!reuse) fs::remove_all(scratch);
  fs::create_directories(scratch);

  report("metric-oracle", metric_oracle);
  report("hand-cases", hand_cases);
  report("gradient-check", gradient_check);

  std::fprintf(stderr, "running the default pipeline in %s\n", scratch.string().c_str());
  const ServiceConfig cfg;
  const RunStore store(scratch / "default");
  const PipelineRun run = run_timed(store, cfg, true);
  for (const auto& [stage, t] : run.stage_seconds) std::fprintf(stderr, "  %s: %.1fs\n", stage.c_str(), t);
  const bool done = run.record.status == RunStatus::Done;
  if (!done) {
    std::printf("pipeline failed at %s: %s\n", run.record.failed_stage.c_str(), run.record.error.c_str());
  }
  auto stage_time = [&](const char* s) {
    const auto it = run.stage_seconds.find(s);
    return it == run.stage_seconds.end() ? 0.0 : it->second;
  };

  std::optional<LoadedRun> loaded;
  std::vector<Scenario> test;
  if (done) {
    loaded = load_run(store, run.record.run_id);
    test = read_dataset(loaded->dir / "data", &loaded->test_ids);
  }
  auto need_run = [&](const std::function<Outcome()>& f) {
    return [&, f]() -> Outcome { return done ? f() : Outcome{false, "pipeline did not finish"}; };
  };

  report("ig-axioms", need_run([&]() -> Outcome {
    const auto t0 = std::chrono::steady_clock::now();
    const Network& net = loaded->segmentation.graph;
    const auto deletion = read_json(loaded->dir / "explain" / "deletion.json");
    const auto ids = deletion.at("cases").get<std::vector<std::string>>();
    long nonzero_at_baseline = 0;
    double worst = 0.0;
    int cases = 0;
    for (const auto& s : test) {
      if (cases >= 10) break;
      if (std::find(ids.begin(), ids.end(), s.id) == ids.end()) continue;
      const auto t = AttributionTarget::over_mask(cfg.explain.lead_time, cfg.explain.target_class, s.mask);
      const Tensor& x = s.inputs.channels;
      const Tensor b = make_baseline(x);
      const auto at_base = integrated_gradients(net, b, b, 16, t);
      for (double v : at_base.a.values()) nonzero_at_baseline += v != 0.0;
      const auto ig = integrated_gradients(net, x, b, 128, t);
      double sum = 0.0;
      for (double v : ig.a.values()) sum += v;
      const double gap = target_value(net, x, t) - target_value(net, b, t);
      worst = std::max(worst, std::abs(sum - gap) / std::abs(gap));
      ++cases;
    }
    const Outcome lin = ig_linear_exactness();
    const double secs = seconds_since(t0);
    const bool ok = cases == 10 && nonzero_at_baseline == 0 && lin.pass && worst < kCompletenessTol && secs < kIgBudgetS;
    return {ok, fmt("baseline: %ld nonzero; linear: %s; completeness at 128 steps on %d cases: max rel gap %.4f; %.1fs",
                    nonzero_at_baseline, lin.detail.c_str(), cases, worst, secs)};
  }));

  report("deletion-fidelity", need_run([&]() -> Outcome {
    const auto j = read_json(loaded->dir / "explain" / "deletion.json");
    const auto ids = j.at("cases").get<std::vector<std::string>>();
    const int lead = j.at("lead_time").get<int>();
    std::map<std::string, std::vector<DeletionCurve>> curves;
    std::map<std::string, double> mean;
    for (const auto& m : j.at("ranking")) {
      for (const auto& c : m.at("curves")) curves[m.at("method")].push_back(DeletionCurve::from_json(c));
      mean[m.at("method")] = m.at("mean_auc").get<double>();
    }
    const auto& ig = curves.at("ig");
    const auto& rnd = curves.at("random");
    int wins = 0, anchor_errors = 0;
    const Network& net = loaded->segmentation.graph;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      wins += ig[i].auc <= rnd[i].auc;
      const auto it = std::find_if(test.begin(), test.end(), [&](const Scenario& s) { return s.id == ids[i]; });
      const ClassGrid truth = it->truth_classes(lead);
      const double full = deletion_score(net, it->inputs.channels, truth, it->mask, lead);
      const double none = deletion_score(net, make_baseline(it->inputs.channels), truth, it->mask, lead);
      for (const auto& [method, cs] : curves) {
        if (cs[i].ks.front() != 0.0 || cs[i].ks.back() != 100.0) ++anchor_errors;
        if (cs[i].scores.front() != full || cs[i].scores.back() != none) ++anchor_errors;
      }
    }
    const double share = ids.empty() ? 0.0 : static_cast<double>(wins) / ids.size();
    const double secs = stage_time("explain");
    const bool ok = ids.size() == 30 && mean.at("ig") < mean.at("random") && share >= kDeletionWinShare &&
                    anchor_errors == 0 && secs < kExplainBudgetS;
    return {ok, fmt("%zu cases; mean AUC IG %.4f vs random %.4f (saliency %.4f); IG <= random in %d (%.0f%%); "
                    "anchor errors %d; explain stage %.0fs",
                    ids.size(), mean.at("ig"), mean.at("random"), mean.count("saliency") ? mean.at("saliency") : NAN,
                    wins, 100 * share, anchor_errors, secs)};
  }));

  report("calibration-suite", need_run([&] { return calibration_suite(*loaded, test); }));

  report("calibration-direction", need_run([&]() -> Outcome {
    const auto e = read_json(loaded->dir / "calibration" / "ece.json");
    const auto f = read_json(loaded->dir / "calibration" / "f1.json");
    int ts_up = 0, lts_down = 0, f1_ts = 0, f1_lts = 0;
    std::string table;
    for (std::size_t l = 0; l < e.at("rows").size(); ++l) {
      const auto& r = e.at("rows")[l];
      const double before = r.at("before"), ts = r.at("after").at("temperature"), lts = r.at("after").at("local_temperature");
      ts_up += ts > before;
      lts_down += lts < before;
      table += fmt(" L%d %.4f/%.4f/%.4f", r.at("lead_time").get<int>(), before, ts, lts);
      const auto& fr = f.at("leads")[l];
      f1_ts += fr.at("none").at("exact") == fr.at("temperature").at("exact");
      f1_lts += std::abs(fr.at("none").at("value").get<double>() - fr.at("local_temperature").at("value").get<double>()) <= kLtsF1Tol;
    }
    const double secs = stage_time("calibrate");
    const bool ok = e.at("rows").size() == kNumLeadTimes && e.at("bins") == 10 && ts_up == 0 && lts_down >= 5 &&
                    f1_ts == kNumLeadTimes && f1_lts == kNumLeadTimes && secs < kCalibrateBudgetS;
    return {ok, fmt("ECE before/TS/LTS:%s; TS increases %d, LTS decreases %d; F1 exact under TS %d/6, within %.3f under LTS %d/6; "
                    "calibrate stage %.0fs",
                    table.c_str(), ts_up, lts_down, f1_ts, kLtsF1Tol, f1_lts, secs)};
  }));

  report("classifier", need_run([&]() -> Outcome {
    const auto c = read_json(loaded->dir / "reports" / "classifier.json");
    const double acc = c.at("accuracy");
    // sampler law on the training labels of this run
    const auto split = read_json(loaded->dir / "split.json");
    const auto train_ids = split.at("train").get<std::vector<std::string>>();
    const auto train = read_dataset(loaded->dir / "data", &train_ids);
    std::vector<int> labels;
    for (const auto& s : train) labels.push_back(static_cast<int>(s.label));
    const Outcome law = sampler_law(labels);
    return {acc >= kClassifierAccuracy && law.pass,
            fmt("held-out accuracy %.4f on %ld cases; sampler at 100k draws: %s", acc, c.at("test_cases").get<long>(),
                law.detail.c_str())};
  }));

  report("receptive-field", need_run([&]() -> Outcome {
    const auto j = read_json(loaded->dir / "explain" / "receptive_field.json");
    const double outside = j.at("mass_outside_theoretical");
    const int eff = j.at("effective_radius_px"), theo = j.at("theoretical_radius_px");
    const int n = j.at("cases");
    return {n == 16 && outside == 0.0 && eff <= theo,
            fmt("%d samples; mass outside theoretical field %g; effective radius %d px <= theoretical %d px", n, outside,
                eff, theo)};
  }));

  report("pipeline-determinism", [&] { return determinism(scratch); });

  std::printf("%s: %d failing\n", failures == 0 ? "ALL PASS" : "SOME FAIL", failures);
  return failures == 0 ? 0 : 1;
}
