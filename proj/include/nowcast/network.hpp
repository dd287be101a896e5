#pragma once

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nowcast/grid.hpp"

namespace nowcast {

/// The closed set of differentiable operations a Network may contain.
enum class Op {
  Input,
  Conv3x3,        // 3x3, stride 1, zero "same" padding, no bias
  BiasAdd,        // per-channel bias
  Relu,
  Downsample2,    // 2x2 average pool, stride 2
  Upsample2,      // nearest-neighbour x2
  Concat,         // channel concatenation
  PixelLinear,    // per-pixel affine map (1x1 conv with bias)
  GlobalAvgPool,  // C x H x W -> C x 1 x 1
};

std::string_view op_name(Op op);
/// Throws UnsupportedOp for names outside the op set.
Op op_from_name(std::string_view name);

struct Layer {
  Op op = Op::Input;
  std::vector<int> inputs;
  int channels = 0;  // output channel count
  std::vector<double> weight;
  std::vector<double> bias;
  std::string name;

  friend bool operator==(const Layer&, const Layer&) = default;
};

/// A DAG of layers in topological order; layers[0] is the input node.
struct Network {
  std::vector<Layer> layers;
  std::vector<int> outputs;

  Network() = default;
  explicit Network(int in_channels);

  int in_channels() const { return layers.front().channels; }
  int add(Op op, std::vector<int> inputs, int out_channels = 0, std::string name = {});

  std::size_t num_params() const;
  std::vector<double> flatten_params() const;
  void load_params(std::span<const double> flat);
  /// Structural checks: input indices, channel arithmetic, weight sizes, finiteness.
  void validate() const;

  friend bool operator==(const Network&, const Network&) = default;
};

/// Activations of every layer from one forward pass.
struct Activations {
  std::vector<Tensor> values;
  const Tensor& at(int layer) const { return values.at(layer); }
};

Activations forward(const Network& net, const Tensor& x);
std::vector<Tensor> network_outputs(const Network& net, const Activations& acts);

struct Gradients {
  std::vector<std::vector<double>> weight;  // per layer, same layout as Layer::weight
  std::vector<std::vector<double>> bias;
  Tensor input;

  explicit Gradients(const Network& net);
  void add(const Gradients& other);
  void scale(double s);
};

/// Reverse-mode sweep. `d_outputs[i]` is dL/d(outputs[i]); empty tensors count as zero.
/// Parameter gradients are accumulated into `grads`.
void backward(const Network& net, const Activations& acts, std::span<const Tensor> d_outputs,
              Gradients& grads, bool need_input_grad = true);

/// Scalar functional of the network outputs. Must write d(value)/d(outputs[i])
/// into grad_outputs[i] (pre-sized, zero-filled).
using OutputFunctional =
    std::function<double(std::span<const Tensor> outputs, std::span<Tensor> grad_outputs)>;

struct ValueAndGrad {
  double value = 0.0;
  Tensor grad;  // same shape as the network input
};

ValueAndGrad forward_with_gradient(const Network& net, const Tensor& x, const OutputFunctional& f);

/// Architecture descriptor (no weights).
nlohmann::json architecture_json(const Network& net);
/// Rebuilds an unweighted network from a descriptor; throws UnsupportedOp.
Network network_from_architecture(const nlohmann::json& arch);

/// Worst-case input footprint of one output pixel, in input pixels along one axis:
/// output pixel p depends only on input pixels in [p - before, p + after].
struct ReceptiveField {
  int before = 0;
  int after = 0;
  int size() const { return before + after + 1; }
  int radius() const { return before > after ? before : after; }
};

ReceptiveField receptive_field(const Network& net, int output_layer);

}  // namespace nowcast
