#include "nowcast/network.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Core>

namespace nowcast {

namespace {

struct OpEntry {
  Op op;
  std::string_view name;
};

constexpr OpEntry kOps[] = {
    {Op::Input, "input"},
    {Op::Conv3x3, "conv3x3"},
    {Op::BiasAdd, "bias_add"},
    {Op::Relu, "relu"},
    {Op::Downsample2, "downsample2"},
    {Op::Upsample2, "upsample2"},
    {Op::Concat, "concat"},
    {Op::PixelLinear, "pixel_linear"},
    {Op::GlobalAvgPool, "global_avg_pool"},
};

std::size_t expected_weight_size(const Network& net, const Layer& l) {
  switch (l.op) {
    case Op::Conv3x3:
      return static_cast<std::size_t>(l.channels) * net.layers[l.inputs[0]].channels * 9;
    case Op::PixelLinear:
      return static_cast<std::size_t>(l.channels) * net.layers[l.inputs[0]].channels;
    default:
      return 0;
  }
}

std::size_t expected_bias_size(const Layer& l) {
  return (l.op == Op::BiasAdd || l.op == Op::PixelLinear) ? static_cast<std::size_t>(l.channels)
                                                          : 0;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

constexpr int kTilePixels = 512;

int tile_rows(int width) { return std::max(1, kTilePixels / std::max(1, width)); }

// Unrolls the 3x3 zero-padded neighbourhood of output rows [ya, yb):
// row (ci*9 + k), column = pixel within the tile.
void im2col3x3(const Tensor& in, int ya, int yb, RowMatrix& col) {
  const int ci_n = in.channels(), h = in.height(), wd = in.width();
  col.setZero(static_cast<Eigen::Index>(ci_n) * 9, static_cast<Eigen::Index>(yb - ya) * wd);
  for (int ci = 0; ci < ci_n; ++ci) {
    const double* src = in.channel(ci).data();
    for (int ky = 0; ky < 3; ++ky) {
      const int dy = ky - 1;
      const int y0 = std::max(ya, -dy), y1 = std::min(yb, h - dy);
      for (int kx = 0; kx < 3; ++kx) {
        const int dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
        double* row = col.row(ci * 9 + ky * 3 + kx).data();
        for (int y = y0; y < y1; ++y) {
          const double* irow = src + (y + dy) * wd + dx;
          double* orow = row + (y - ya) * wd;
          for (int x = x0; x < x1; ++x) orow[x] = irow[x];
        }
      }
    }
  }
}

void col2im3x3_add(const RowMatrix& col, int ya, int yb, Tensor& din) {
  const int ci_n = din.channels(), h = din.height(), wd = din.width();
  for (int ci = 0; ci < ci_n; ++ci) {
    double* dst = din.channel(ci).data();
    for (int ky = 0; ky < 3; ++ky) {
      const int dy = ky - 1;
      const int y0 = std::max(ya, -dy), y1 = std::min(yb, h - dy);
      for (int kx = 0; kx < 3; ++kx) {
        const int dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
        const double* row = col.row(ci * 9 + ky * 3 + kx).data();
        for (int y = y0; y < y1; ++y) {
          double* drow = dst + (y + dy) * wd + dx;
          const double* srow = row + (y - ya) * wd;
          for (int x = x0; x < x1; ++x) drow[x] += srow[x];
        }
      }
    }
  }
}

void conv3x3_forward(const Tensor& in, const std::vector<double>& w, Tensor& out) {
  const Eigen::Index co_n = out.channels(), k = static_cast<Eigen::Index>(in.channels()) * 9;
  const Eigen::Index n = static_cast<Eigen::Index>(in.plane());
  const int h = in.height(), wd = in.width(), step = tile_rows(wd);
  const ConstRowMap wm(w.data(), co_n, k);
  RowMap om(out.data(), co_n, n);
  RowMatrix col;
  for (int ya = 0; ya < h; ya += step) {
    const int yb = std::min(h, ya + step);
    im2col3x3(in, ya, yb, col);
    om.middleCols(static_cast<Eigen::Index>(ya) * wd, col.cols()).noalias() = wm * col;
  }
}

void conv3x3_backward(const Tensor& in, const std::vector<double>& w, const Tensor& dout,
                      std::vector<double>& dw, Tensor* din) {
  const Eigen::Index co_n = dout.channels(), k = static_cast<Eigen::Index>(in.channels()) * 9;
  const Eigen::Index n = static_cast<Eigen::Index>(in.plane());
  const int h = in.height(), wd = in.width(), step = tile_rows(wd);
  const ConstRowMap g(dout.data(), co_n, n);
  const ConstRowMap wm(w.data(), co_n, k);
  RowMap dwm(dw.data(), co_n, k);
  RowMatrix col, dcol;
  for (int ya = 0; ya < h; ya += step) {
    const int yb = std::min(h, ya + step);
    im2col3x3(in, ya, yb, col);
    const auto gt = g.middleCols(static_cast<Eigen::Index>(ya) * wd, col.cols());
    dwm.noalias() += gt * col.transpose();
    if (din) {
      dcol.noalias() = wm.transpose() * gt;
      col2im3x3_add(dcol, ya, yb, *din);
    }
  }
}

}  // namespace

std::string_view op_name(Op op) {
  for (const auto& e : kOps) {
    if (e.op == op) return e.name;
  }
  return "unknown";
}

Op op_from_name(std::string_view name) {
  for (const auto& e : kOps) {
    if (e.name == name) return e.op;
  }
  throw UnsupportedOp("unsupported op '" + std::string(name) + "'");
}

Network::Network(int in_channels) {
  Layer in;
  in.op = Op::Input;
  in.channels = in_channels;
  in.name = "input";
  layers.push_back(std::move(in));
}

int Network::add(Op op, std::vector<int> inputs, int out_channels, std::string name) {
  if (layers.empty()) throw InvalidInput("network has no input layer");
  for (int i : inputs) {
    if (i < 0 || i >= static_cast<int>(layers.size())) {
      throw InvalidInput("layer input index out of range");
    }
  }
  Layer l;
  l.op = op;
  l.inputs = std::move(inputs);
  l.name = std::move(name);
  switch (op) {
    case Op::Input:
      throw InvalidInput("only one input layer is allowed");
    case Op::Conv3x3:
    case Op::PixelLinear:
      l.channels = out_channels;
      break;
    case Op::Concat:
      for (int i : l.inputs) l.channels += layers[i].channels;
      break;
    default:
      l.channels = layers[l.inputs.at(0)].channels;
      break;
  }
  layers.push_back(std::move(l));
  Layer& added = layers.back();
  added.weight.assign(expected_weight_size(*this, added), 0.0);
  added.bias.assign(expected_bias_size(added), 0.0);
  return static_cast<int>(layers.size()) - 1;
}

std::size_t Network::num_params() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

std::vector<double> Network::flatten_params() const {
  std::vector<double> flat;
  flat.reserve(num_params());
  for (const auto& l : layers) {
    flat.insert(flat.end(), l.weight.begin(), l.weight.end());
    flat.insert(flat.end(), l.bias.begin(), l.bias.end());
  }
  return flat;
}

void Network::load_params(std::span<const double> flat) {
  if (flat.size() != num_params()) {
    throw InvalidInput("parameter count mismatch: expected " + std::to_string(num_params()) +
                       ", got " + std::to_string(flat.size()));
  }
  std::size_t off = 0;
  for (auto& l : layers) {
    std::copy_n(flat.begin() + off, l.weight.size(), l.weight.begin());
    off += l.weight.size();
    std::copy_n(flat.begin() + off, l.bias.size(), l.bias.begin());
    off += l.bias.size();
  }
}

void Network::validate() const {
  if (layers.empty() || layers[0].op != Op::Input) {
    throw InvalidInput("network must start with an input layer");
  }
  for (std::size_t i = 1; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.op == Op::Input) throw InvalidInput("only one input layer is allowed");
    if (l.inputs.empty()) throw InvalidInput("layer " + std::to_string(i) + " has no inputs");
    for (int in : l.inputs) {
      if (in < 0 || in >= static_cast<int>(i)) {
        throw InvalidInput("layer " + std::to_string(i) + " is not topologically ordered");
      }
    }
    if (l.op != Op::Concat && l.inputs.size() != 1) {
      throw InvalidInput("layer " + std::to_string(i) + " takes exactly one input");
    }
    if (l.weight.size() != expected_weight_size(*this, l) ||
        l.bias.size() != expected_bias_size(l)) {
      throw InvalidInput("layer " + std::to_string(i) + " has wrongly sized parameters");
    }
    for (double v : l.weight) {
      if (!std::isfinite(v)) throw InvalidInput("non-finite weight");
    }
    for (double v : l.bias) {
      if (!std::isfinite(v)) throw InvalidInput("non-finite bias");
    }
  }
  if (outputs.empty()) throw InvalidInput("network declares no outputs");
  for (int o : outputs) {
    if (o <= 0 || o >= static_cast<int>(layers.size())) {
      throw InvalidInput("output index out of range");
    }
  }
}

Activations forward(const Network& net, const Tensor& x) {
  if (x.channels() != net.in_channels()) {
    throw InvalidInput("input has " + std::to_string(x.channels()) + " channels, network expects " +
                       std::to_string(net.in_channels()));
  }
  Activations acts;
  acts.values.resize(net.layers.size());
  acts.values[0] = x;
  for (std::size_t i = 1; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    const Tensor& in = acts.values[l.inputs[0]];
    const int h = in.height(), w = in.width();
    Tensor out;
    switch (l.op) {
      case Op::Input:
        throw InvalidInput("unexpected input layer");
      case Op::Conv3x3:
        out = Tensor(l.channels, h, w);
        conv3x3_forward(in, l.weight, out);
        break;
      case Op::BiasAdd:
        out = in;
        for (int c = 0; c < l.channels; ++c) {
          for (double& v : out.channel(c)) v += l.bias[c];
        }
        break;
      case Op::Relu:
        out = in;
        for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
        break;
      case Op::Downsample2: {
        if (h % 2 != 0 || w % 2 != 0) throw InvalidInput("downsample2 needs even grid dims");
        out = Tensor(l.channels, h / 2, w / 2);
        for (int c = 0; c < l.channels; ++c) {
          for (int y = 0; y < h / 2; ++y) {
            for (int xx = 0; xx < w / 2; ++xx) {
              out.at(c, y, xx) = 0.25 * (in.at(c, 2 * y, 2 * xx) + in.at(c, 2 * y, 2 * xx + 1) +
                                         in.at(c, 2 * y + 1, 2 * xx) +
                                         in.at(c, 2 * y + 1, 2 * xx + 1));
            }
          }
        }
        break;
      }
      case Op::Upsample2:
        out = Tensor(l.channels, h * 2, w * 2);
        for (int c = 0; c < l.channels; ++c) {
          for (int y = 0; y < 2 * h; ++y) {
            for (int xx = 0; xx < 2 * w; ++xx) out.at(c, y, xx) = in.at(c, y / 2, xx / 2);
          }
        }
        break;
      case Op::Concat: {
        out = Tensor(l.channels, h, w);
        int c0 = 0;
        for (int src : l.inputs) {
          const Tensor& t = acts.values[src];
          if (t.height() != h || t.width() != w) {
            throw InvalidInput("concat inputs have different spatial dims");
          }
          std::copy(t.values().begin(), t.values().end(), out.data() + c0 * out.plane());
          c0 += t.channels();
        }
        break;
      }
      case Op::PixelLinear: {
        out = Tensor(l.channels, h, w);
        const int ci_n = in.channels();
        for (int co = 0; co < l.channels; ++co) {
          auto o = out.channel(co);
          std::fill(o.begin(), o.end(), l.bias[co]);
          for (int ci = 0; ci < ci_n; ++ci) {
            const double wv = l.weight[static_cast<std::size_t>(co) * ci_n + ci];
            auto src = in.channel(ci);
            for (std::size_t p = 0; p < o.size(); ++p) o[p] += wv * src[p];
          }
        }
        break;
      }
      case Op::GlobalAvgPool:
        out = Tensor(l.channels, 1, 1);
        for (int c = 0; c < l.channels; ++c) {
          double s = 0.0;
          for (double v : in.channel(c)) s += v;
          out[c] = s / static_cast<double>(in.plane());
        }
        break;
    }
    acts.values[i] = std::move(out);
  }
  return acts;
}

std::vector<Tensor> network_outputs(const Network& net, const Activations& acts) {
  std::vector<Tensor> outs;
  outs.reserve(net.outputs.size());
  for (int o : net.outputs) outs.push_back(acts.values[o]);
  return outs;
}

Gradients::Gradients(const Network& net) {
  weight.resize(net.layers.size());
  bias.resize(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    weight[i].assign(net.layers[i].weight.size(), 0.0);
    bias[i].assign(net.layers[i].bias.size(), 0.0);
  }
}

void Gradients::add(const Gradients& other) {
  for (std::size_t i = 0; i < weight.size(); ++i) {
    for (std::size_t j = 0; j < weight[i].size(); ++j) weight[i][j] += other.weight[i][j];
    for (std::size_t j = 0; j < bias[i].size(); ++j) bias[i][j] += other.bias[i][j];
  }
}

void Gradients::scale(double s) {
  for (auto& w : weight) {
    for (double& v : w) v *= s;
  }
  for (auto& b : bias) {
    for (double& v : b) v *= s;
  }
}

void backward(const Network& net, const Activations& acts, std::span<const Tensor> d_outputs,
              Gradients& grads, bool need_input_grad) {
  if (d_outputs.size() != net.outputs.size()) {
    throw InvalidInput("output gradient count does not match network outputs");
  }
  const std::size_t n = net.layers.size();
  std::vector<Tensor> delta(n);
  auto accumulate = [&](int idx, const Tensor& g) {
    if (delta[idx].empty()) {
      delta[idx] = g;
    } else {
      double* d = delta[idx].data();
      const double* s = g.data();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += s[i];
    }
  };
  for (std::size_t k = 0; k < net.outputs.size(); ++k) {
    if (d_outputs[k].empty()) continue;
    if (!d_outputs[k].same_shape(acts.values[net.outputs[k]])) {
      throw InvalidInput("output gradient shape mismatch");
    }
    accumulate(net.outputs[k], d_outputs[k]);
  }

  for (std::size_t i = n - 1; i >= 1; --i) {
    const Layer& l = net.layers[i];
    if (delta[i].empty()) continue;
    const Tensor& g = delta[i];
    const Tensor& in = acts.values[l.inputs[0]];
    // gradient flowing into layer 0 is only materialised when requested
    const bool want_in = l.inputs[0] != 0 || need_input_grad;
    switch (l.op) {
      case Op::Input:
        break;
      case Op::Conv3x3: {
        Tensor din;
        if (want_in) din = Tensor(in.channels(), in.height(), in.width());
        conv3x3_backward(in, l.weight, g, grads.weight[i], din.empty() ? nullptr : &din);
        if (!din.empty()) accumulate(l.inputs[0], din);
        break;
      }
      case Op::BiasAdd:
        for (int c = 0; c < l.channels; ++c) {
          double s = 0.0;
          for (double v : g.channel(c)) s += v;
          grads.bias[i][c] += s;
        }
        if (want_in) accumulate(l.inputs[0], g);
        break;
      case Op::Relu: {
        Tensor din = g;
        const Tensor& out = acts.values[i];
        for (std::size_t p = 0; p < din.size(); ++p) {
          if (!(out[p] > 0.0)) din[p] = 0.0;
        }
        if (want_in) accumulate(l.inputs[0], din);
        break;
      }
      case Op::Downsample2: {
        if (!want_in) break;
        Tensor din(in.channels(), in.height(), in.width());
        for (int c = 0; c < l.channels; ++c) {
          for (int y = 0; y < in.height(); ++y) {
            for (int x = 0; x < in.width(); ++x) din.at(c, y, x) = 0.25 * g.at(c, y / 2, x / 2);
          }
        }
        accumulate(l.inputs[0], din);
        break;
      }
      case Op::Upsample2: {
        if (!want_in) break;
        Tensor din(in.channels(), in.height(), in.width());
        for (int c = 0; c < l.channels; ++c) {
          for (int y = 0; y < g.height(); ++y) {
            for (int x = 0; x < g.width(); ++x) din.at(c, y / 2, x / 2) += g.at(c, y, x);
          }
        }
        accumulate(l.inputs[0], din);
        break;
      }
      case Op::Concat: {
        int c0 = 0;
        for (int src : l.inputs) {
          const Tensor& t = acts.values[src];
          if (src != 0 || need_input_grad) {
            Tensor part(t.channels(), t.height(), t.width());
            std::copy_n(g.data() + c0 * g.plane(), part.size(), part.data());
            accumulate(src, part);
          }
          c0 += t.channels();
        }
        break;
      }
      case Op::PixelLinear: {
        const int ci_n = in.channels();
        const bool in_grad = want_in;
        Tensor din;
        if (in_grad) din = Tensor(ci_n, in.height(), in.width());
        for (int co = 0; co < l.channels; ++co) {
          auto go = g.channel(co);
          double sb = 0.0;
          for (double v : go) sb += v;
          grads.bias[i][co] += sb;
          for (int ci = 0; ci < ci_n; ++ci) {
            const std::size_t wi = static_cast<std::size_t>(co) * ci_n + ci;
            auto src = in.channel(ci);
            double acc = 0.0;
            for (std::size_t p = 0; p < go.size(); ++p) acc += go[p] * src[p];
            grads.weight[i][wi] += acc;
            if (in_grad) {
              const double wv = l.weight[wi];
              auto d = din.channel(ci);
              for (std::size_t p = 0; p < go.size(); ++p) d[p] += wv * go[p];
            }
          }
        }
        if (in_grad) accumulate(l.inputs[0], din);
        break;
      }
      case Op::GlobalAvgPool: {
        if (!want_in) break;
        Tensor din(in.channels(), in.height(), in.width());
        const double inv = 1.0 / static_cast<double>(in.plane());
        for (int c = 0; c < l.channels; ++c) {
          for (double& v : din.channel(c)) v = g[c] * inv;
        }
        accumulate(l.inputs[0], din);
        break;
      }
    }
    delta[i] = Tensor();  // release early
  }
  if (need_input_grad) {
    grads.input = delta[0].empty() ? Tensor(acts.values[0].channels(), acts.values[0].height(),
                                            acts.values[0].width())
                                   : std::move(delta[0]);
  }
}

ValueAndGrad forward_with_gradient(const Network& net, const Tensor& x, const OutputFunctional& f) {
  const Activations acts = forward(net, x);
  const std::vector<Tensor> outs = network_outputs(net, acts);
  std::vector<Tensor> d_outs;
  d_outs.reserve(outs.size());
  for (const auto& o : outs) d_outs.emplace_back(o.channels(), o.height(), o.width());
  ValueAndGrad r;
  r.value = f(outs, d_outs);
  Gradients grads(net);
  backward(net, acts, d_outs, grads, true);
  r.grad = std::move(grads.input);
  return r;
}

nlohmann::json architecture_json(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : net.layers) {
    layers.push_back({{"op", op_name(l.op)},
                      {"inputs", l.inputs},
                      {"channels", l.channels},
                      {"name", l.name},
                      {"weight_count", l.weight.size()},
                      {"bias_count", l.bias.size()}});
  }
  return {{"layers", layers}, {"outputs", net.outputs}};
}

Network network_from_architecture(const nlohmann::json& arch) {
  const auto& layers = arch.at("layers");
  if (layers.empty()) throw InvalidInput("architecture has no layers");
  const auto& first = layers.at(0);
  if (op_from_name(first.at("op").get<std::string>()) != Op::Input) {
    throw InvalidInput("architecture must begin with an input layer");
  }
  Network net(first.at("channels").get<int>());
  for (std::size_t i = 1; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const Op op = op_from_name(l.at("op").get<std::string>());
    net.add(op, l.at("inputs").get<std::vector<int>>(), l.at("channels").get<int>(),
            l.value("name", std::string{}));
    if (net.layers.back().channels != l.at("channels").get<int>()) {
      throw InvalidInput("channel count mismatch in layer " + std::to_string(i));
    }
  }
  net.outputs = arch.at("outputs").get<std::vector<int>>();
  net.validate();
  return net;
}

ReceptiveField receptive_field(const Network& net, int output_layer) {
  // Per layer: input-pixel reach before/after the pixel position, and the
  // layer's pixel pitch measured in input pixels.
  struct Reach {
    double before = 0, after = 0, pitch = 1;
  };
  std::vector<Reach> r(net.layers.size());
  for (std::size_t i = 1; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    Reach in = r[l.inputs[0]];
    switch (l.op) {
      case Op::Conv3x3:
        in.before += in.pitch;
        in.after += in.pitch;
        break;
      case Op::Downsample2:
        // output q covers inputs 2q and 2q+1
        in.after += in.pitch;
        in.pitch *= 2;
        break;
      case Op::Upsample2:
        // output q reads input floor(q/2), which sits up to one fine pitch earlier
        in.pitch /= 2;
        in.before += in.pitch;
        break;
      case Op::Concat:
        for (int src : l.inputs) {
          in.before = std::max(in.before, r[src].before);
          in.after = std::max(in.after, r[src].after);
        }
        break;
      case Op::GlobalAvgPool:
        in.before = in.after = 1e9;
        break;
      default:
        break;
    }
    r[i] = in;
  }
  const Reach& o = r.at(output_layer);
  return {static_cast<int>(std::ceil(o.before)), static_cast<int>(std::ceil(o.after))};
}

}  // namespace nowcast
