#include "nowcast/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "nowcast/datagen.hpp"
#include "nowcast/grdf.hpp"
#include "nowcast/model.hpp"

namespace nowcast {

namespace {

// -log softmax(z / T)[y] for one pixel, and optionally d/dT.
double pixel_nll(const double* z, int y, double T, double* d_dT) {
  double s[kNumClasses];
  double m = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < kNumClasses; ++k) {
    s[k] = z[k] / T;
    m = std::max(m, s[k]);
  }
  double sum = 0.0;
  for (int k = 0; k < kNumClasses; ++k) sum += std::exp(s[k] - m);
  const double lse = m + std::log(sum);
  if (d_dT) {
    double ez = 0.0;
    for (int k = 0; k < kNumClasses; ++k) ez += std::exp(s[k] - lse) * z[k];
    *d_dT = (z[y] - ez) / (T * T);
  }
  return lse - s[y];
}

void check_sample(const CalibrationSample& s) {
  if (!s.mask) throw InvalidInput("calibration sample without a mask");
  if (s.logits.channels() != kNumClasses) throw InvalidInput("expected 3-class logits");
  if (s.truth.height != s.logits.height() || s.truth.width != s.logits.width() ||
      s.mask->height != s.truth.height || s.mask->width != s.truth.width) {
    throw InvalidInput("logits, truth and mask shapes differ");
  }
}

Tensor mapping_input(const Tensor& logits, const Tensor& input) {
  if (logits.height() != input.height() || logits.width() != input.width()) {
    throw InvalidInput("logits and input shapes differ");
  }
  Tensor t(logits.channels() + input.channels(), logits.height(), logits.width());
  std::copy(logits.values().begin(), logits.values().end(), t.values().begin());
  std::copy(input.values().begin(), input.values().end(), t.values().begin() + logits.size());
  return t;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

PixelSet gather_pixels(std::span<const CalibrationSample> samples) {
  PixelSet px;
  for (const auto& s : samples) {
    check_sample(s);
    const std::size_t n = s.logits.plane();
    for (std::size_t i = 0; i < n; ++i) {
      if (!s.mask->valid[i]) continue;
      for (int k = 0; k < kNumClasses; ++k) px.logits.push_back(s.logits[k * n + i]);
      px.labels.push_back(s.truth.labels[i]);
    }
  }
  return px;
}

double temperature_nll(const PixelSet& px, double T) {
  if (px.size() == 0) throw EmptyDataset("no validation pixels");
  double sum = 0.0;
  for (std::size_t i = 0; i < px.size(); ++i) {
    sum += pixel_nll(&px.logits[i * kNumClasses], px.labels[i], T, nullptr);
  }
  return sum / static_cast<double>(px.size());
}

nlohmann::json TemperatureScalar::to_json() const {
  return {{"method", "temperature"}, {"lead_time", lead_time}, {"T", T}, {"warnings", warnings}};
}

TemperatureScalar TemperatureScalar::from_json(const nlohmann::json& j) {
  TemperatureScalar t;
  t.T = j.at("T").get<double>();
  t.lead_time = j.at("lead_time").get<int>();
  t.warnings = j.value("warnings", std::vector<std::string>{});
  if (!(t.T > 0.0)) throw InvalidParameter("temperature must be positive");
  return t;
}

TemperatureScalar fit_temperature(const PixelSet& px, int lead_time, double tol) {
  if (px.size() == 0) throw EmptyDataset("no validation pixels");
  TemperatureScalar out;
  out.lead_time = lead_time;
  std::array<long, kNumClasses> seen{};
  for (auto y : px.labels) ++seen.at(y);
  for (int k = 0; k < kNumClasses; ++k) {
    if (seen[k] == 0) out.warnings.push_back("class " + std::to_string(k) + " absent from validation pixels");
  }
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(kMinTemperature), b = std::log(kMaxTemperature);
  double c = b - invphi * (b - a), d = a + invphi * (b - a);
  double fc = temperature_nll(px, std::exp(c)), fd = temperature_nll(px, std::exp(d));
  while (b - a > tol) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - invphi * (b - a);
      fc = temperature_nll(px, std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + invphi * (b - a);
      fd = temperature_nll(px, std::exp(d));
    }
  }
  out.T = std::exp(0.5 * (a + b));
  return out;
}

TemperatureScalar fit_temperature(std::span<const CalibrationSample> samples, int lead_time) {
  return fit_temperature(gather_pixels(samples), lead_time);
}

ConfidenceGrid confidence_of(const ProbGrid& p) {
  ConfidenceGrid q;
  q.lead_time = p.lead_time;
  q.q = Tensor(1, p.p.height(), p.p.width());
  const std::size_t n = p.p.plane();
  for (std::size_t i = 0; i < n; ++i) {
    double m = p.p[i];
    for (int k = 1; k < p.p.channels(); ++k) m = std::max(m, p.p[k * n + i]);
    q.q[i] = m;
  }
  return q;
}

CalibratedGrid apply_temperature(const LogitGrid& z, double T) {
  if (!(T > 0.0) || !std::isfinite(T)) throw InvalidParameter("temperature must be finite and > 0");
  LogitGrid scaled = z;
  for (double& v : scaled.z.values()) v /= T;
  CalibratedGrid out;
  out.probs = softmax(scaled);
  out.confidence = confidence_of(out.probs);
  return out;
}

CalibratedGrid apply_temperature(const LogitGrid& z, const TemperatureScalar& t) {
  return apply_temperature(z, t.T);
}

nlohmann::json LtsConfig::to_json() const {
  return {{"hidden", hidden},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"seed", seed}};
}

LtsConfig LtsConfig::from_json(const nlohmann::json& j) {
  LtsConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  return c;
}

LocalTemperature identity_local_temperature(int lead_time, int hidden, std::uint64_t seed) {
  if (hidden < 1) throw InvalidParameter("hidden channels must be >= 1");
  LocalTemperature lt;
  lt.lead_time = lead_time;
  Network& g = lt.net;
  g = Network(kNumClasses + kNumInputChannels);
  int x = g.add(Op::Conv3x3, {0}, hidden, "lts1.conv");
  x = g.add(Op::BiasAdd, {x}, 0, "lts1.bias");
  x = g.add(Op::Relu, {x}, 0, "lts1.relu");
  x = g.add(Op::Conv3x3, {x}, hidden, "lts2.conv");
  x = g.add(Op::BiasAdd, {x}, 0, "lts2.bias");
  x = g.add(Op::Relu, {x}, 0, "lts2.relu");
  x = g.add(Op::Conv3x3, {x}, 1, "lts3.conv");
  x = g.add(Op::BiasAdd, {x}, 0, "lts3.bias");
  g.outputs = {x};

  std::mt19937_64 rng(splitmix64(seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int layer : {1, 4}) {
    Layer& l = g.layers[layer];
    const double sd = std::sqrt(2.0 / (9.0 * g.layers[l.inputs[0]].channels));
    for (double& w : l.weight) w = normal(rng) * sd;
  }
  // layer 7 (last conv) and every bias stay zero
  g.validate();
  return lt;
}

double temperature_transform(double o) {
  const double softplus = std::max(o, 0.0) + std::log1p(std::exp(-std::abs(o)));
  return 1.0 + 0.99 * (softplus / std::numbers::ln2 - 1.0);
}

namespace {

double temperature_derivative(double o) {
  const double sig = o >= 0.0 ? 1.0 / (1.0 + std::exp(-o)) : std::exp(o) / (1.0 + std::exp(o));
  return 0.99 * sig / std::numbers::ln2;
}

}  // namespace

Tensor temperature_field(const LocalTemperature& lt, const Tensor& logits, const Tensor& input) {
  const auto outs = network_outputs(lt.net, forward(lt.net, mapping_input(logits, input)));
  Tensor T = outs.front();
  for (double& v : T.values()) v = temperature_transform(v);
  return T;
}

CalibratedGrid apply_local_temperature(const LocalTemperature& lt, const LogitGrid& z,
                                       const Tensor& input) {
  const Tensor T = temperature_field(lt, z.z, input);
  LogitGrid scaled = z;
  const std::size_t n = z.z.plane();
  for (int k = 0; k < z.z.channels(); ++k) {
    for (std::size_t i = 0; i < n; ++i) scaled.z[k * n + i] /= T[i];
  }
  CalibratedGrid out;
  out.probs = softmax(scaled);
  out.confidence = confidence_of(out.probs);
  return out;
}

double local_temperature_nll(const LocalTemperature& lt, std::span<const CalibrationSample> samples) {
  double sum = 0.0;
  std::size_t count = 0;
  double z[kNumClasses];
  for (const auto& s : samples) {
    check_sample(s);
    if (!s.input) throw InvalidInput("local temperature scaling needs the model input");
    const Tensor T = temperature_field(lt, s.logits, *s.input);
    const std::size_t n = s.logits.plane();
    for (std::size_t i = 0; i < n; ++i) {
      if (!s.mask->valid[i]) continue;
      for (int k = 0; k < kNumClasses; ++k) z[k] = s.logits[k * n + i];
      sum += pixel_nll(z, s.truth.labels[i], T[i], nullptr);
      ++count;
    }
  }
  if (count == 0) throw EmptyDataset("no validation pixels");
  return sum / static_cast<double>(count);
}

LocalTemperature fit_local_temperature(std::span<const CalibrationSample> val, int lead_time,
                                       const LtsConfig& cfg) {
  if (val.empty()) throw EmptyDataset("local temperature scaling needs validation samples");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw InvalidParameter("bad LTS schedule");
  for (const auto& s : val) {
    check_sample(s);
    if (!s.input) throw InvalidInput("local temperature scaling needs the model input");
  }
  LocalTemperature lt = identity_local_temperature(lead_time, cfg.hidden, cfg.seed);
  std::vector<Tensor> inputs;
  inputs.reserve(val.size());
  for (const auto& s : val) inputs.push_back(mapping_input(s.logits, *s.input));

  TrainConfig opt_cfg;
  opt_cfg.learning_rate = cfg.learning_rate;
  opt_cfg.weight_decay = 0.0;
  Adam opt(lt.net, opt_cfg);
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x5157u));
  std::vector<std::size_t> order(val.size());
  std::iota(order.begin(), order.end(), 0);

  lt.initial_nll = local_temperature_nll(lt, val);
  lt.epoch_nll.push_back(lt.initial_nll);
  Network best = lt.net;
  double best_nll = lt.initial_nll;
  double z[kNumClasses];
  std::vector<Tensor> d_out(1);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      std::size_t pixels = 0;
      for (std::size_t k = b0; k < b1; ++k) pixels += val[order[k]].mask->count();
      if (pixels == 0) continue;
      Gradients grads(lt.net);
      for (std::size_t k = b0; k < b1; ++k) {
        const auto& s = val[order[k]];
        const Activations acts = forward(lt.net, inputs[order[k]]);
        const Tensor& o = acts.at(lt.net.outputs.front());
        d_out[0] = Tensor(1, o.height(), o.width());
        const std::size_t n = o.plane();
        for (std::size_t i = 0; i < n; ++i) {
          if (!s.mask->valid[i]) continue;
          for (int c = 0; c < kNumClasses; ++c) z[c] = s.logits[c * n + i];
          double dT = 0.0;
          pixel_nll(z, s.truth.labels[i], temperature_transform(o[i]), &dT);
          d_out[0][i] = dT * temperature_derivative(o[i]) / static_cast<double>(pixels);
        }
        backward(lt.net, acts, d_out, grads, false);
      }
      opt.step(lt.net, grads);
    }
    const double nll = local_temperature_nll(lt, val);
    if (!std::isfinite(nll)) throw TrainingFailure("local temperature fit diverged", epoch);
    lt.epoch_nll.push_back(nll);
    if (nll < best_nll) {
      best_nll = nll;
      best = lt.net;
    }
  }
  lt.net = std::move(best);
  lt.final_nll = best_nll;
  return lt;
}

void save_local_temperature(const std::filesystem::path& stem, const LocalTemperature& lt) {
  save_network(stem, lt.net, 0, "lts.lead" + std::to_string(lt.lead_time));
  nlohmann::json meta = {{"method", "local_temperature"},
                         {"lead_time", lt.lead_time},
                         {"epoch_nll", lt.epoch_nll},
                         {"initial_nll", lt.initial_nll},
                         {"final_nll", lt.final_nll}};
  write_text_file(stem.string() + ".json", meta.dump(2));
}

LocalTemperature load_local_temperature(const std::filesystem::path& stem) {
  LocalTemperature lt;
  lt.net = load_network(stem).net;
  const auto meta = nlohmann::json::parse(read_text_file(stem.string() + ".json"));
  lt.lead_time = meta.at("lead_time").get<int>();
  lt.epoch_nll = meta.value("epoch_nll", std::vector<double>{});
  lt.initial_nll = meta.value("initial_nll", 0.0);
  lt.final_nll = meta.value("final_nll", 0.0);
  return lt;
}

double sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

PlattBinary fit_platt_binary(std::span<const double> scores, std::span<const std::uint8_t> labels,
                             std::vector<std::string>* warnings) {
  if (scores.size() != labels.size()) throw InvalidInput("scores and labels differ in length");
  if (scores.empty()) throw EmptyDataset("Platt scaling needs data");
  const std::size_t pos = static_cast<std::size_t>(std::count_if(
      labels.begin(), labels.end(), [](std::uint8_t v) { return v != 0; }));
  if ((pos == 0 || pos == labels.size()) && warnings) {
    warnings->push_back("single-class data; intercept absorbs the prior");
  }
  constexpr double ridge = 1e-6;
  const double n = static_cast<double>(scores.size());
  double a = 1.0, b = 0.0;
  auto objective = [&](double aa, double bb) {
    double f = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const double t = aa * scores[i] + bb;
      // log(1 + e^t) - y t
      const double lp = std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t)));
      f += lp - (labels[i] ? t : 0.0);
    }
    return f / n + 0.5 * ridge * (aa * aa + bb * bb);
  };
  double f = objective(a, b);
  for (int it = 0; it < 100; ++it) {
    double ga = 0.0, gb = 0.0, haa = 0.0, hab = 0.0, hbb = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const double s = scores[i];
      const double p = sigmoid(a * s + b);
      const double r = p - (labels[i] ? 1.0 : 0.0);
      const double w = p * (1.0 - p);
      ga += r * s;
      gb += r;
      haa += w * s * s;
      hab += w * s;
      hbb += w;
    }
    ga = ga / n + ridge * a;
    gb = gb / n + ridge * b;
    haa = haa / n + ridge;
    hab /= n;
    hbb = hbb / n + ridge;
    const double det = haa * hbb - hab * hab;
    if (!(det > 0.0)) break;
    double da = (hbb * ga - hab * gb) / det;
    double db = (haa * gb - hab * ga) / det;
    double step = 1.0;
    double fn = objective(a - da, b - db);
    while (fn > f && step > 1e-10) {
      step *= 0.5;
      fn = objective(a - step * da, b - step * db);
    }
    if (fn > f) break;
    a -= step * da;
    b -= step * db;
    const bool done = std::abs(f - fn) < 1e-14 && std::hypot(step * da, step * db) < 1e-10;
    f = fn;
    if (done) break;
  }
  return {a, b};
}

nlohmann::json PlattParams::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : classes) arr.push_back({{"a", c.a}, {"b", c.b}});
  return {{"method", "platt"}, {"lead_time", lead_time}, {"classes", arr}, {"warnings", warnings}};
}

PlattParams PlattParams::from_json(const nlohmann::json& j) {
  PlattParams p;
  p.lead_time = j.at("lead_time").get<int>();
  p.classes.clear();
  for (const auto& c : j.at("classes")) p.classes.push_back({c.at("a").get<double>(), c.at("b").get<double>()});
  if (p.classes.size() != kNumClasses) throw InvalidInput("Platt parameters need 3 classes");
  p.warnings = j.value("warnings", std::vector<std::string>{});
  return p;
}

PlattParams fit_platt(const PixelSet& px, int lead_time) {
  if (px.size() == 0) throw EmptyDataset("no validation pixels");
  PlattParams out;
  out.lead_time = lead_time;
  std::vector<double> s(px.size());
  std::vector<std::uint8_t> y(px.size());
  for (int k = 0; k < kNumClasses; ++k) {
    for (std::size_t i = 0; i < px.size(); ++i) {
      s[i] = px.logits[i * kNumClasses + k];
      y[i] = px.labels[i] == k ? 1 : 0;
    }
    std::vector<std::string> w;
    out.classes[k] = fit_platt_binary(s, y, &w);
    for (auto& m : w) out.warnings.push_back("class " + std::to_string(k) + ": " + m);
  }
  return out;
}

CalibratedGrid apply_platt(const LogitGrid& z, const PlattParams& p) {
  if (z.z.channels() != kNumClasses) throw InvalidInput("expected 3-class logits");
  CalibratedGrid out;
  out.probs.lead_time = z.lead_time;
  out.probs.p = Tensor(kNumClasses, z.z.height(), z.z.width());
  const std::size_t n = z.z.plane();
  for (std::size_t i = 0; i < n; ++i) {
    double q[kNumClasses], sum = 0.0;
    for (int k = 0; k < kNumClasses; ++k) {
      q[k] = sigmoid(p.classes[k].a * z.z[k * n + i] + p.classes[k].b);
      sum += q[k];
    }
    for (int k = 0; k < kNumClasses; ++k) out.probs.p[k * n + i] = q[k] / sum;
  }
  out.confidence = confidence_of(out.probs);
  return out;
}

int bin_index(double confidence, int bins) {
  const int b = static_cast<int>(std::ceil(confidence * bins)) - 1;
  return std::clamp(b, 0, bins - 1);
}

double BinningTable::apply(double confidence) const { return values.at(bin_index(confidence, bins())); }

nlohmann::json BinningTable::to_json() const {
  return {{"method", "histogram_binning"},
          {"lead_time", lead_time},
          {"edges", edges},
          {"values", values},
          {"counts", counts}};
}

BinningTable BinningTable::from_json(const nlohmann::json& j) {
  BinningTable t;
  t.lead_time = j.at("lead_time").get<int>();
  t.edges = j.at("edges").get<std::vector<double>>();
  t.values = j.at("values").get<std::vector<double>>();
  t.counts = j.value("counts", std::vector<long>(t.values.size(), 0));
  if (t.values.empty() || t.edges.size() != t.values.size() + 1) {
    throw InvalidInput("malformed binning table");
  }
  return t;
}

BinningTable fit_histogram_binning(std::span<const double> confidences,
                                   std::span<const std::uint8_t> correct, int bins) {
  if (bins < 1) throw InvalidParameter("bin count must be >= 1");
  if (confidences.size() != correct.size()) throw InvalidInput("confidence and correctness differ in length");
  if (confidences.empty()) throw EmptyDataset("histogram binning needs data");
  BinningTable t;
  t.edges.resize(bins + 1);
  for (int i = 0; i <= bins; ++i) t.edges[i] = static_cast<double>(i) / bins;
  std::vector<double> hits(bins, 0.0);
  t.counts.assign(bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const int b = bin_index(confidences[i], bins);
    ++t.counts[b];
    hits[b] += correct[i] ? 1.0 : 0.0;
  }
  t.values.resize(bins);
  for (int b = 0; b < bins; ++b) {
    t.values[b] = t.counts[b] > 0 ? hits[b] / static_cast<double>(t.counts[b])
                                  : (t.edges[b] + t.edges[b + 1]) / 2.0;
  }
  return t;
}

nlohmann::json ReliabilityBins::to_json() const {
  return {{"n", n}, {"acc", acc}, {"conf", conf}, {"hits", hits}, {"conf_sum", conf_sum}, {"total", total}};
}

ReliabilityBins reliability_diagram(std::span<const double> confidences,
                                    std::span<const std::uint8_t> correct, int bins) {
  if (bins < 1) throw InvalidParameter("bin count must be >= 1");
  if (confidences.size() != correct.size()) throw InvalidInput("confidence and correctness differ in length");
  ReliabilityBins r;
  r.n.assign(bins, 0);
  r.acc.assign(bins, 0.0);
  r.conf.assign(bins, 0.0);
  r.hits.assign(bins, 0);
  r.conf_sum.assign(bins, 0.0);
  std::vector<double> comp(bins, 0.0);  // Neumaier compensation
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const int b = bin_index(confidences[i], bins);
    ++r.n[b];
    r.hits[b] += correct[i] ? 1 : 0;
    const double v = confidences[i], t = r.conf_sum[b] + v;
    comp[b] += std::abs(r.conf_sum[b]) >= std::abs(v) ? (r.conf_sum[b] - t) + v : (v - t) + r.conf_sum[b];
    r.conf_sum[b] = t;
  }
  for (int b = 0; b < bins; ++b) {
    r.conf_sum[b] += comp[b];
    if (r.n[b] == 0) continue;
    r.acc[b] = static_cast<double>(r.hits[b]) / static_cast<double>(r.n[b]);
    r.conf[b] = r.conf_sum[b] / static_cast<double>(r.n[b]);
  }
  r.total = static_cast<long>(confidences.size());
  return r;
}

double ece_from_bins(const ReliabilityBins& r) {
  if (r.total == 0) return 0.0;
  double e = 0.0;
  for (std::size_t b = 0; b < r.n.size(); ++b) {
    if (r.n[b] == 0) continue;
    e += std::abs(static_cast<double>(r.hits[b]) - r.conf_sum[b]);
  }
  return e / static_cast<double>(r.total);
}

double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, int bins) {
  return ece_from_bins(reliability_diagram(confidences, correct, bins));
}

SampledEce ece_sampled(std::span<const double> confidences, std::span<const std::uint8_t> correct,
                       int bins, const SamplingProfile& profile) {
  if (confidences.size() != correct.size()) throw InvalidInput("confidence and correctness differ in length");
  if (profile.length == 0 || profile.length > confidences.size()) {
    throw InvalidParameter("sample length exceeds the available pixels");
  }
  if (profile.repeats < 1) throw InvalidParameter("repeats must be >= 1");
  std::mt19937_64 rng(splitmix64(profile.seed));
  std::vector<std::size_t> idx(confidences.size());
  std::vector<double> c(profile.length);
  std::vector<std::uint8_t> y(profile.length);
  SampledEce out;
  for (int r = 0; r < profile.repeats; ++r) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // partial Fisher-Yates
    for (std::size_t i = 0; i < profile.length; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
      c[i] = confidences[idx[i]];
      y[i] = correct[idx[i]];
    }
    out.per_draw.push_back(ece(c, y, bins));
  }
  out.mean = std::accumulate(out.per_draw.begin(), out.per_draw.end(), 0.0) /
             static_cast<double>(out.per_draw.size());
  return out;
}

ConfidencePixels confidence_pixels(std::span<const ProbGrid> probs,
                                   std::span<const CalibrationSample> samples) {
  if (probs.size() != samples.size()) throw InvalidInput("probability grids and samples differ in count");
  ConfidencePixels out;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    check_sample(samples[s]);
    const Tensor& p = probs[s].p;
    const ClassGrid pred = argmax_class(p);
    const std::size_t n = p.plane();
    for (std::size_t i = 0; i < n; ++i) {
      if (!samples[s].mask->valid[i]) continue;
      double m = p[i];
      for (int k = 1; k < p.channels(); ++k) m = std::max(m, p[k * n + i]);
      out.confidence.push_back(m);
      out.correct.push_back(pred.labels[i] == samples[s].truth.labels[i] ? 1 : 0);
    }
  }
  return out;
}

std::string EceReport::to_csv() const {
  std::ostringstream os;
  os << "lead_time,before";
  for (const auto& m : methods) os << ',' << m;
  os << ",sampled_before";
  for (const auto& m : methods) os << ",sampled_" << m;
  os << '\n';
  for (const auto& r : rows) {
    os << r.lead_time << ',' << fmt(r.before);
    for (double v : r.after) os << ',' << fmt(v);
    os << ',' << fmt(r.sampled_before.mean);
    for (const auto& s : r.sampled_after) os << ',' << fmt(s.mean);
    os << '\n';
  }
  return os.str();
}

nlohmann::json EceReport::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json after = nlohmann::json::object(), sampled = nlohmann::json::object();
    for (std::size_t m = 0; m < methods.size(); ++m) {
      after[methods[m]] = r.after.at(m);
      if (m < r.sampled_after.size()) {
        sampled[methods[m]] = {{"mean", r.sampled_after[m].mean}, {"per_draw", r.sampled_after[m].per_draw}};
      }
    }
    rows_j.push_back({{"lead_time", r.lead_time},
                      {"before", r.before},
                      {"after", after},
                      {"sampled_before",
                       {{"mean", r.sampled_before.mean}, {"per_draw", r.sampled_before.per_draw}}},
                      {"sampled_after", sampled}});
  }
  return {{"methods", methods}, {"bins", bins}, {"rows", rows_j}};
}

EceReport EceReport::from_json(const nlohmann::json& j) {
  EceReport r;
  r.bins = j.value("bins", 10);
  r.methods = j.at("methods").get<std::vector<std::string>>();
  for (const auto& e : j.at("rows")) {
    EceRow row;
    row.lead_time = e.at("lead_time").get<int>();
    row.before = e.at("before").get<double>();
    for (const auto& m : r.methods) row.after.push_back(e.at("after").at(m).get<double>());
    const auto& sb = e.at("sampled_before");
    row.sampled_before = {sb.at("mean").get<double>(), sb.at("per_draw").get<std::vector<double>>()};
    for (const auto& m : r.methods) {
      if (!e.at("sampled_after").contains(m)) continue;
      const auto& s = e.at("sampled_after").at(m);
      row.sampled_after.push_back({s.at("mean").get<double>(), s.at("per_draw").get<std::vector<double>>()});
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

}  // namespace nowcast
