#include "nowcast/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nowcast/grdf.hpp"

namespace nowcast {

namespace {

struct SampleTargets {
  std::vector<ClassGrid> classes;  // per lead time
  const ValidityMask* mask = nullptr;
};

std::vector<SampleTargets> build_targets(const ScenarioRefs& data) {
  std::vector<SampleTargets> out;
  out.reserve(data.size());
  for (const Scenario* s : data) {
    SampleTargets t;
    for (int lead = 1; lead <= kNumLeadTimes; ++lead) t.classes.push_back(s->truth_classes(lead));
    t.mask = &s->mask;
    out.push_back(std::move(t));
  }
  return out;
}

// Weighted masked cross entropy of all heads; fills d_outputs scaled by `scale`.
// Returns (sum of weighted CE, sum of weights).
std::pair<double, double> segmentation_ce(const std::vector<Tensor>& outs,
                                          const SampleTargets& tgt,
                                          std::span<const double> weights,
                                          std::vector<Tensor>* d_outs) {
  double loss = 0.0, wsum = 0.0;
  const std::size_t n = outs.front().plane();
  if (d_outs) {
    d_outs->clear();
    for (const auto& o : outs) d_outs->emplace_back(o.channels(), o.height(), o.width());
  }
  double z[kNumClasses], p[kNumClasses];
  for (std::size_t h = 0; h < outs.size(); ++h) {
    const Tensor& o = outs[h];
    const ClassGrid& truth = tgt.classes[h];
    for (std::size_t i = 0; i < n; ++i) {
      if (!tgt.mask->valid[i]) continue;
      for (int k = 0; k < kNumClasses; ++k) z[k] = o[k * n + i];
      const double m = std::max({z[0], z[1], z[2]});
      double s = 0.0;
      for (int k = 0; k < kNumClasses; ++k) {
        p[k] = std::exp(z[k] - m);
        s += p[k];
      }
      const int y = truth.labels[i];
      const double w = weights.empty() ? 1.0 : weights[y];
      loss += w * (std::log(s) + m - z[y]);
      wsum += w;
      if (d_outs) {
        for (int k = 0; k < kNumClasses; ++k) {
          (*d_outs)[h][k * n + i] = w * (p[k] / s - (k == y ? 1.0 : 0.0));
        }
      }
    }
  }
  return {loss, wsum};
}

void check_weights(std::span<const double> w, std::size_t k) {
  if (w.empty()) return;
  if (w.size() != k) throw InvalidParameter("class weight count mismatch");
  for (double v : w) {
    if (!(v > 0.0) || !std::isfinite(v)) throw InvalidParameter("class weights must be positive");
  }
}

}  // namespace

NetworkParams build_segmentation_net(const ArchConfig& a) {
  NetworkParams p;
  Network& g = p.graph;
  g = Network(kNumInputChannels);
  int x = g.add(Op::Conv3x3, {0}, a.enc1, "enc1.conv");
  x = g.add(Op::BiasAdd, {x}, 0, "enc1.bias");
  const int skip1 = g.add(Op::Relu, {x}, 0, "enc1.relu");
  x = g.add(Op::Downsample2, {skip1}, 0, "enc1.down");
  x = g.add(Op::Conv3x3, {x}, a.enc2, "enc2.conv");
  x = g.add(Op::BiasAdd, {x}, 0, "enc2.bias");
  const int skip2 = g.add(Op::Relu, {x}, 0, "enc2.relu");
  x = g.add(Op::Downsample2, {skip2}, 0, "enc2.down");
  x = g.add(Op::Conv3x3, {x}, a.enc3, "enc3.conv");
  x = g.add(Op::BiasAdd, {x}, 0, "enc3.bias");
  x = g.add(Op::Relu, {x}, 0, "enc3.relu");
  p.encoder_end = x;
  x = g.add(Op::Upsample2, {x}, 0, "dec2.up");
  x = g.add(Op::Concat, {x, skip2}, 0, "dec2.cat");
  x = g.add(Op::Conv3x3, {x}, a.enc2, "dec2.conv");
  x = g.add(Op::BiasAdd, {x}, 0, "dec2.bias");
  x = g.add(Op::Relu, {x}, 0, "dec2.relu");
  x = g.add(Op::Upsample2, {x}, 0, "dec1.up");
  x = g.add(Op::Concat, {x, skip1}, 0, "dec1.cat");
  x = g.add(Op::Conv3x3, {x}, a.enc1, "dec1.conv");
  x = g.add(Op::BiasAdd, {x}, 0, "dec1.bias");
  const int feat = g.add(Op::Relu, {x}, 0, "dec1.relu");
  for (int lead = 1; lead <= kNumLeadTimes; ++lead) {
    g.outputs.push_back(
        g.add(Op::PixelLinear, {feat}, kNumClasses, "head" + std::to_string(lead)));
  }
  g.validate();
  return p;
}

void init_weights(Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 1; i < net.layers.size(); ++i) {
    Layer& l = net.layers[i];
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
    if (l.weight.empty()) continue;
    const int cin = net.layers[l.inputs[0]].channels;
    const int fan_in = l.op == Op::Conv3x3 ? cin * 9 : cin;
    const double stddev = std::sqrt(2.0 / fan_in);
    const std::size_t per_in = l.op == Op::Conv3x3 ? 9 : 1;
    for (std::size_t k = 0; k < l.weight.size(); ++k) {
      double v = normal(rng) * stddev;
      const int ci = static_cast<int>((k / per_in) % cin);
      if (l.inputs[0] == 0 && ci < kNumRadarFrames) v *= 0.1;  // radar in mm/hr
      l.weight[k] = v;
    }
  }
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidParameter("learning rate must be a finite non-negative number");
  }
  if (epochs < 1) throw InvalidParameter("epochs must be >= 1");
  if (batch_size < 1) throw InvalidParameter("batch size must be >= 1");
  if (!(weight_decay >= 0.0)) throw InvalidParameter("weight decay must be >= 0");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"weight_decay", weight_decay},
          {"epochs", epochs},               {"batch_size", batch_size},
          {"seed", seed},                   {"class_weights", class_weights},
          {"beta1", beta1},                 {"beta2", beta2},
          {"epsilon", epsilon},             {"optimizer", "adam"}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.class_weights = j.value("class_weights", c.class_weights);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  return c;
}

TrainConfig TrainConfig::reference_finetune() {
  TrainConfig c;
  c.learning_rate = 1e-6;
  c.weight_decay = 1e-8;
  return c;
}

nlohmann::json TrainLog::to_json() const {
  return {{"epoch_loss", epoch_loss}, {"seed", seed}, {"config_hash", config_hash}};
}

Adam::Adam(const Network& net, const TrainConfig& cfg) : cfg_(cfg) {
  for (const auto& l : net.layers) {
    mw_.emplace_back(l.weight.size(), 0.0);
    vw_.emplace_back(l.weight.size(), 0.0);
    mb_.emplace_back(l.bias.size(), 0.0);
    vb_.emplace_back(l.bias.size(), 0.0);
  }
}

void Adam::step(Network& net, const Gradients& grads) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                    std::vector<double>& v) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k] + cfg_.weight_decay * p[k];
      m[k] = b1 * m[k] + (1.0 - b1) * gk;
      v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
      p[k] -= cfg_.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.epsilon);
    }
  };
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    update(net.layers[i].weight, grads.weight[i], mw_[i], vw_[i]);
    update(net.layers[i].bias, grads.bias[i], mb_[i], vb_[i]);
  }
}

ScenarioRefs select(const std::vector<Scenario>& data, std::span<const std::size_t> indices) {
  ScenarioRefs out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(&data.at(i));
  return out;
}

std::vector<LogitGrid> predict(const NetworkParams& net, const Tensor& x) {
  if (x.channels() != kNumInputChannels) throw InvalidInput("expected a 12-channel input");
  if (x.height() % 4 != 0 || x.width() % 4 != 0) {
    throw InvalidInput("grid dims must be divisible by 4");
  }
  const Activations acts = forward(net.graph, x);
  std::vector<LogitGrid> out;
  for (std::size_t h = 0; h < net.graph.outputs.size(); ++h) {
    out.push_back(LogitGrid{acts.values[net.graph.outputs[h]], static_cast<int>(h) + 1});
  }
  return out;
}

std::vector<LogitGrid> predict(const NetworkParams& net, const FusedInput& x) {
  x.validate();
  return predict(net, x.channels);
}

double segmentation_loss(const NetworkParams& net, const ScenarioRefs& data,
                         std::span<const double> class_weights) {
  check_weights(class_weights, kNumClasses);
  const auto targets = build_targets(data);
  double loss = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto outs = network_outputs(net.graph, forward(net.graph, data[i]->inputs.channels));
    const auto [l, w] = segmentation_ce(outs, targets[i], class_weights, nullptr);
    loss += l;
    wsum += w;
  }
  return wsum > 0.0 ? loss / wsum : 0.0;
}

SegmentationTraining train_segmentation(const ScenarioRefs& data, const TrainConfig& cfg,
                                        const ArchConfig& arch) {
  NetworkParams p = build_segmentation_net(arch);
  init_weights(p.graph, cfg.seed);
  return train_segmentation(data, cfg, std::move(p));
}

SegmentationTraining train_segmentation(const ScenarioRefs& data, const TrainConfig& cfg,
                                        NetworkParams init) {
  cfg.validate();
  check_weights(cfg.class_weights, kNumClasses);
  if (data.empty()) throw EmptyDataset("training set is empty");
  const auto targets = build_targets(data);

  SegmentationTraining result{std::move(init), {}};
  result.log.seed = cfg.seed;
  result.log.config_hash = sha256_hex(cfg.to_json().dump());
  Network& net = result.params.graph;
  Adam opt(net, cfg);
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0xA5A5u));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<Tensor> d_outs;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_samples = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      Gradients grads(net);
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t i = order[k];
        const Activations acts = forward(net, data[i]->inputs.channels);
        const auto outs = network_outputs(net, acts);
        const auto [l, w] = segmentation_ce(outs, targets[i], cfg.class_weights, &d_outs);
        if (w <= 0.0) continue;
        const double scale = 1.0 / (w * static_cast<double>(b1 - b0));
        for (auto& d : d_outs) {
          for (double& v : d.values()) v *= scale;
        }
        backward(net, acts, d_outs, grads, false);
        epoch_loss += l / w;
        ++epoch_samples;
      }
      opt.step(net, grads);
    }
    const double mean = epoch_samples ? epoch_loss / static_cast<double>(epoch_samples) : 0.0;
    if (!std::isfinite(mean)) throw TrainingFailure("segmentation loss diverged", epoch);
    result.log.epoch_loss.push_back(mean);
  }
  return result;
}

Sampler::Sampler(std::vector<int> class_counts, std::vector<int> labels)
    : counts_(std::move(class_counts)), labels_(std::move(labels)) {
  members_.resize(counts_.size());
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    const int c = labels_[i];
    if (c < 0 || c >= static_cast<int>(counts_.size())) throw InvalidInput("label out of range");
    if (counts_[c] <= 0) {
      throw InvalidInput("class " + std::to_string(c) + " is present in the data but has zero count");
    }
    members_[c].push_back(i);
  }
  for (std::size_t c = 0; c < counts_.size(); ++c) {
    if (counts_[c] < 0) throw InvalidInput("negative class count");
    if (!members_[c].empty()) {
      if (static_cast<int>(members_[c].size()) != counts_[c]) {
        throw InvalidInput("class counts do not match labels");
      }
      present_.push_back(static_cast<int>(c));
    }
  }
  if (present_.empty()) throw EmptyDataset("sampler has no samples");
}

double Sampler::class_probability(int c) const {
  const bool present = std::find(present_.begin(), present_.end(), c) != present_.end();
  return present ? 1.0 / static_cast<double>(present_.size()) : 0.0;
}

double Sampler::index_probability(std::size_t i) const {
  const int c = labels_.at(i);
  return class_probability(c) / static_cast<double>(counts_[c]);
}

std::size_t Sampler::draw(std::mt19937_64& rng) const {
  // Per-sample weight 1/count(c) == pick a present class uniformly, then a member uniformly.
  const int c = present_[std::uniform_int_distribution<std::size_t>(0, present_.size() - 1)(rng)];
  const auto& m = members_[c];
  return m[std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng)];
}

Sampler make_sampler(std::span<const int> class_counts, std::span<const int> labels) {
  return Sampler({class_counts.begin(), class_counts.end()}, {labels.begin(), labels.end()});
}

Sampler make_sampler(std::span<const int> labels, int num_classes) {
  std::vector<int> counts(num_classes, 0);
  for (int l : labels) {
    if (l < 0 || l >= num_classes) throw InvalidInput("label out of range");
    ++counts[l];
  }
  return Sampler(std::move(counts), {labels.begin(), labels.end()});
}

ClassifierParams classifier_from_encoder(const NetworkParams& seg, std::uint64_t head_seed) {
  ClassifierParams c;
  c.encoder_end = seg.encoder_end;
  c.graph.layers.assign(seg.graph.layers.begin(), seg.graph.layers.begin() + seg.encoder_end + 1);
  const int pooled = c.graph.add(Op::GlobalAvgPool, {seg.encoder_end}, 0, "clf.pool");
  const int logits = c.graph.add(Op::PixelLinear, {pooled}, kNumRainTypes, "clf.linear");
  c.graph.outputs = {logits};
  Layer& head = c.graph.layers[logits];
  std::mt19937_64 rng(splitmix64(head_seed));
  std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / c.graph.layers[pooled].channels));
  for (double& w : head.weight) w = normal(rng);
  c.graph.validate();
  return c;
}

ClassifierTraining train_classifier(const ScenarioRefs& data, const NetworkParams& encoder,
                                    const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw EmptyDataset("classifier training set is empty");
  std::vector<int> labels;
  labels.reserve(data.size());
  for (const Scenario* s : data) labels.push_back(static_cast<int>(s->label));
  const Sampler sampler = make_sampler(labels, kNumRainTypes);

  std::vector<double> weights = cfg.class_weights;
  if (weights.empty()) {
    const auto& counts = sampler.class_counts();
    double sum = 0.0;
    int present = 0;
    weights.assign(kNumRainTypes, 0.0);
    for (int c = 0; c < kNumRainTypes; ++c) {
      if (counts[c] > 0) {
        weights[c] = 1.0 / counts[c];
        sum += weights[c];
        ++present;
      }
    }
    for (double& w : weights) w = w > 0.0 ? w * present / sum : 1.0;
  }
  check_weights(weights, kNumRainTypes);

  ClassifierTraining result{classifier_from_encoder(encoder, cfg.seed ^ 0xC1A5u), {}};
  result.log.seed = cfg.seed;
  result.log.config_hash = sha256_hex(cfg.to_json().dump());
  Network& net = result.params.graph;
  Adam opt(net, cfg);
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x5A3Bu));

  double z[kNumRainTypes], p[kNumRainTypes];
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0, epoch_w = 0.0;
    for (std::size_t b0 = 0; b0 < data.size(); b0 += cfg.batch_size) {
      const std::size_t bn = std::min<std::size_t>(cfg.batch_size, data.size() - b0);
      Gradients grads(net);
      std::vector<std::size_t> batch(bn);
      double batch_w = 0.0;
      for (auto& i : batch) {
        i = sampler.draw(rng);
        batch_w += weights[labels[i]];
      }
      for (std::size_t i : batch) {
        const Activations acts = forward(net, data[i]->inputs.channels);
        const Tensor& out = acts.values[net.outputs[0]];
        for (int k = 0; k < kNumRainTypes; ++k) z[k] = out[k];
        softmax_vector(z, p);
        const int y = labels[i];
        const double w = weights[y];
        epoch_loss += -w * std::log(std::max(p[y], 1e-300));
        epoch_w += w;
        std::vector<Tensor> d(1, Tensor(kNumRainTypes, 1, 1));
        for (int k = 0; k < kNumRainTypes; ++k) d[0][k] = w * (p[k] - (k == y)) / batch_w;
        backward(net, acts, d, grads, false);
      }
      opt.step(net, grads);
    }
    const double mean = epoch_loss / epoch_w;
    if (!std::isfinite(mean)) throw TrainingFailure("classifier loss diverged", epoch);
    result.log.epoch_loss.push_back(mean);
  }
  return result;
}

TypePrediction classify_type(const ClassifierParams& clf, const FusedInput& x) {
  const Activations acts = forward(clf.graph, x.channels);
  const Tensor& out = acts.values[clf.graph.outputs[0]];
  TypePrediction r;
  double z[kNumRainTypes];
  for (int k = 0; k < kNumRainTypes; ++k) z[k] = out[k];
  softmax_vector(z, r.probabilities);
  int best = 0;
  for (int k = 1; k < kNumRainTypes; ++k) {
    if (r.probabilities[k] > r.probabilities[best]) best = k;
  }
  r.label = static_cast<RainType>(best);
  return r;
}

long ConfusionMatrix::total() const {
  long t = 0;
  for (const auto& row : counts) t += std::accumulate(row.begin(), row.end(), 0L);
  return t;
}

long ConfusionMatrix::trace() const {
  long t = 0;
  for (int i = 0; i < kNumRainTypes; ++i) t += counts[i][i];
  return t;
}

double ConfusionMatrix::accuracy() const {
  const long n = total();
  return n ? static_cast<double>(trace()) / static_cast<double>(n) : 0.0;
}

long ConfusionMatrix::row_sum(int truth) const {
  return std::accumulate(counts[truth].begin(), counts[truth].end(), 0L);
}

ConfusionMatrix confusion_matrix(const ClassifierParams& clf, const ScenarioRefs& test) {
  if (test.empty()) throw EmptyDataset("test set is empty");
  ConfusionMatrix m;
  for (const Scenario* s : test) {
    const auto pred = classify_type(clf, s->inputs);
    ++m.counts[static_cast<int>(s->label)][static_cast<int>(pred.label)];
  }
  return m;
}

void save_network(const std::filesystem::path& stem, const Network& net, int encoder_end,
                  const std::string& role) {
  const auto flat = net.flatten_params();
  GrdfFile f;
  f.dims = {static_cast<std::int64_t>(flat.size())};
  f.kind = "weights";
  f.extra = {{"role", role}};
  f.payload.assign(flat.begin(), flat.end());
  write_grdf(stem.string() + ".grdf", f);
  nlohmann::json arch = architecture_json(net);
  arch["encoder_end"] = encoder_end;
  arch["role"] = role;
  arch["weights"] = stem.filename().string() + ".grdf";
  write_text_file(stem.string() + ".arch.json", arch.dump(2));
}

LoadedNetwork load_network(const std::filesystem::path& stem) {
  const auto arch = nlohmann::json::parse(read_text_file(stem.string() + ".arch.json"));
  LoadedNetwork r;
  r.net = network_from_architecture(arch);
  r.encoder_end = arch.value("encoder_end", 0);
  r.role = arch.value("role", std::string{});
  const GrdfFile f = read_grdf(stem.string() + ".grdf");
  std::vector<double> flat(f.payload.begin(), f.payload.end());
  r.net.load_params(flat);
  r.net.validate();
  return r;
}

}  // namespace nowcast
