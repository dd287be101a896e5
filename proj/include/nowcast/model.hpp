#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nowcast/datagen.hpp"
#include "nowcast/network.hpp"

namespace nowcast {

struct ArchConfig {
  int enc1 = 8;   // full-resolution features
  int enc2 = 16;  // half resolution
  int enc3 = 16;  // quarter resolution (bottleneck)
};

/// Encoder-decoder surrogate with skip connections and one 3-class head per
/// lead time. Layers [0, encoder_end] form the encoder.
struct NetworkParams {
  Network graph;
  int encoder_end = 0;

  std::span<const int> heads() const { return graph.outputs; }
};

struct ClassifierParams {
  Network graph;  // encoder copy + global average pool + linear to 6 type logits
  int encoder_end = 0;
};

NetworkParams build_segmentation_net(const ArchConfig& arch = {});
/// He-normal weights, zero biases; radar-channel fan-in of the first conv is scaled by 0.1.
void init_weights(Network& net, std::uint64_t seed);

struct TrainConfig {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  int epochs = 30;
  int batch_size = 8;
  std::uint64_t seed = 7;
  std::vector<double> class_weights;  // empty = uniform
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  /// Optimiser settings quoted for the original large model (lr 1e-6, wd 1e-8).
  static TrainConfig reference_finetune();
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::uint64_t seed = 0;
  std::string config_hash;

  nlohmann::json to_json() const;
};

/// First-moment / second-moment optimiser over a Network's parameters (L2 weight decay).
class Adam {
 public:
  Adam(const Network& net, const TrainConfig& cfg);
  void step(Network& net, const Gradients& grads);

 private:
  TrainConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> mw_, vw_, mb_, vb_;
};

using ScenarioRefs = std::vector<const Scenario*>;
ScenarioRefs select(const std::vector<Scenario>& data, std::span<const std::size_t> indices);

/// One logit grid per lead time (1..6).
std::vector<LogitGrid> predict(const NetworkParams& net, const FusedInput& x);
std::vector<LogitGrid> predict(const NetworkParams& net, const Tensor& x);

struct SegmentationTraining {
  NetworkParams params;
  TrainLog log;
};

/// Masked per-pixel cross-entropy over all lead times, minibatch Adam.
SegmentationTraining train_segmentation(const ScenarioRefs& data, const TrainConfig& cfg,
                                        const ArchConfig& arch = {});
/// Continues from given parameters (used by the lr = 0 contract and fine-tuning).
SegmentationTraining train_segmentation(const ScenarioRefs& data, const TrainConfig& cfg,
                                        NetworkParams init);

/// Mean masked cross-entropy of a network on a dataset.
double segmentation_loss(const NetworkParams& net, const ScenarioRefs& data,
                         std::span<const double> class_weights = {});

/// Multinomial sampling law: every sample of class c has weight 1 / count(c).
class Sampler {
 public:
  Sampler(std::vector<int> class_counts, std::vector<int> labels);

  /// Probability that one draw returns some sample of class c.
  double class_probability(int c) const;
  /// Probability of drawing a specific index.
  double index_probability(std::size_t i) const;
  std::size_t draw(std::mt19937_64& rng) const;
  std::size_t size() const { return labels_.size(); }
  const std::vector<int>& class_counts() const { return counts_; }

 private:
  std::vector<int> counts_;
  std::vector<int> labels_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<int> present_;
};

/// Builds the sampler for `labels`; throws InvalidInput if a labelled class has zero count.
Sampler make_sampler(std::span<const int> class_counts, std::span<const int> labels);
Sampler make_sampler(std::span<const int> labels, int num_classes);

/// Classifier whose encoder is a bit-exact copy of the segmentation encoder.
ClassifierParams classifier_from_encoder(const NetworkParams& seg, std::uint64_t head_seed);

struct ClassifierTraining {
  ClassifierParams params;
  TrainLog log;
};

/// Weighted cross-entropy, batches drawn by the inverse-count sampler.
/// Empty cfg.class_weights selects inverse-frequency weights normalised to mean 1.
ClassifierTraining train_classifier(const ScenarioRefs& data, const NetworkParams& encoder,
                                    const TrainConfig& cfg);

struct TypePrediction {
  RainType label = RainType::MonsoonSouth;
  std::array<double, kNumRainTypes> probabilities{};
};

TypePrediction classify_type(const ClassifierParams& clf, const FusedInput& x);

struct ConfusionMatrix {
  std::array<std::array<long, kNumRainTypes>, kNumRainTypes> counts{};  // [truth][predicted]

  long total() const;
  long trace() const;
  double accuracy() const;
  long row_sum(int truth) const;
};

ConfusionMatrix confusion_matrix(const ClassifierParams& clf, const ScenarioRefs& test);

/// Weights as float32 GRDF plus a JSON architecture descriptor next to it.
void save_network(const std::filesystem::path& stem, const Network& net, int encoder_end,
                  const std::string& role);
struct LoadedNetwork {
  Network net;
  int encoder_end = 0;
  std::string role;
};
LoadedNetwork load_network(const std::filesystem::path& stem);

}  // namespace nowcast
