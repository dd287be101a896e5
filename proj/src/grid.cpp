#include "nowcast/grid.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace nowcast {

Tensor::Tensor(int channels, int height, int width, double fill)
    : c_(channels), h_(height), w_(width) {
  if (channels < 0 || height < 0 || width < 0) {
    throw InvalidInput("negative tensor dimension");
  }
  data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::size_t ValidityMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

void ValidityMask::validate() const {
  if (valid.size() != static_cast<std::size_t>(height) * width) {
    throw InvalidInput("mask size does not match its dimensions");
  }
  if (count() == 0) throw InvalidInput("validity mask has no valid cells");
}

ValidityMask radar_coverage_mask(int height, int width) {
  ValidityMask m(height, width, false);
  const double radius = 0.95 * std::min(height, width) / 2.0;
  const double cy = (height - 1) / 2.0;
  const double cx = (width - 1) / 2.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dy = y - cy, dx = x - cx;
      if (dy * dy + dx * dx <= radius * radius) m.valid[y * width + x] = 1;
    }
  }
  return m;
}

void ClassGrid::validate() const {
  if (labels.size() != static_cast<std::size_t>(height) * width) {
    throw InvalidInput("class grid size does not match its dimensions");
  }
  for (auto l : labels) {
    if (l >= kNumClasses) throw InvalidInput("class label out of range: " + std::to_string(l));
  }
}

void RainField::validate() const {
  if (values.channels() != 1) throw InvalidInput("rain field must have one channel");
  if (values.height() < 8 || values.width() < 8) throw InvalidInput("rain field smaller than 8x8");
  for (double v : values.values()) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite rain rate");
    if (v < 0.0) throw InvalidInput("negative rain rate");
  }
}

void FusedInput::validate() const {
  if (channels.channels() != kNumInputChannels) {
    throw InvalidInput("fused input must have 12 channels, got " +
                       std::to_string(channels.channels()));
  }
  if (!channels.all_finite()) throw InvalidInput("non-finite value in fused input");
  for (int c = 0; c < kNumRadarFrames; ++c) {
    for (double v : channels.channel(c)) {
      if (v < 0.0) throw InvalidInput("negative radar value in channel " + std::to_string(c));
    }
  }
  for (int c = kNumRadarFrames; c < kNumInputChannels; ++c) {
    for (double v : channels.channel(c)) {
      if (v < 0.0 || v > 1.0) {
        throw InvalidInput("coordinate channel " + std::to_string(c) + " outside [0,1]");
      }
    }
  }
}

void LogitGrid::validate() const {
  if (z.channels() != kNumClasses) throw InvalidInput("logit grid must have 3 channels");
  if (!z.all_finite()) throw InvalidInput("non-finite logit");
}

void ProbGrid::validate(double tol) const {
  if (p.channels() != kNumClasses) throw InvalidInput("probability grid must have 3 channels");
  const std::size_t n = p.plane();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int k = 0; k < kNumClasses; ++k) {
      const double v = p[k * n + i];
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidInput("probability outside [0,1]");
      s += v;
    }
    if (std::abs(s - 1.0) > tol) throw InvalidInput("probabilities do not sum to 1");
  }
}

void softmax_vector(std::span<const double> z, std::span<double> out) {
  double m = z[0];
  for (double v : z) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite logit passed to softmax");
    m = std::max(m, v);
  }
  double s = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    out[k] = std::exp(z[k] - m);
    s += out[k];
  }
  for (std::size_t k = 0; k < z.size(); ++k) out[k] /= s;
}

Tensor softmax(const Tensor& z) {
  Tensor out(z.channels(), z.height(), z.width());
  const std::size_t n = z.plane();
  const int k = z.channels();
  std::vector<double> in(k), res(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < k; ++c) in[c] = z[c * n + i];
    softmax_vector(in, res);
    for (int c = 0; c < k; ++c) out[c * n + i] = res[c];
  }
  return out;
}

ProbGrid softmax(const LogitGrid& z) { return ProbGrid{softmax(z.z), z.lead_time}; }

std::uint8_t rain_class(double rate) {
  if (!std::isfinite(rate)) throw InvalidInput("non-finite rain rate");
  if (rate < 0.0) throw InvalidInput("negative rain rate");
  if (rate < 1.0) return 0;
  if (rate < 10.0) return 1;
  return 2;
}

ClassGrid rain_to_classes(const RainField& field) {
  field.validate();
  ClassGrid g(field.height(), field.width());
  for (std::size_t i = 0; i < g.size(); ++i) g.labels[i] = rain_class(field.values[i]);
  return g;
}

ClassGrid argmax_class(const Tensor& p) {
  ClassGrid g(p.height(), p.width());
  const std::size_t n = p.plane();
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < p.channels(); ++c) {
      if (p[c * n + i] > p[best * n + i]) best = c;
    }
    g.labels[i] = static_cast<std::uint8_t>(best);
  }
  return g;
}

ClassGrid argmax_class(const ProbGrid& p) { return argmax_class(p.p); }

double class_midpoint(int cls) {
  switch (cls) {
    case 0: return 0.5;
    case 1: return 5.0;
    case 2: return 20.0;
    default: throw InvalidInput("class index out of range");
  }
}

}  // namespace nowcast
