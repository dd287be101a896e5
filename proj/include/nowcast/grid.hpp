#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "nowcast/error.hpp"

namespace nowcast {

inline constexpr int kNumClasses = 3;
inline constexpr int kNumLeadTimes = 6;
inline constexpr int kNumInputChannels = 12;
inline constexpr int kNumRadarFrames = 7;
inline constexpr int kLonChannel = 7;
inline constexpr int kLatChannel = 8;

/// Dense C x H x W grid of doubles, row-major, channel-major.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int channels, int height, int width, double fill = 0.0);

  int channels() const noexcept { return c_; }
  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h_) * w_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Tensor& o) const noexcept {
    return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  std::span<double> channel(int c) noexcept { return {data_.data() + c * plane(), plane()}; }
  std::span<const double> channel(int c) const noexcept {
    return {data_.data() + c * plane(), plane()};
  }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& at(int c, int y, int x) noexcept { return data_[(c * plane()) + y * w_ + x]; }
  double at(int c, int y, int x) const noexcept { return data_[(c * plane()) + y * w_ + x]; }

  void fill(double v);
  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  int c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

/// H x W boolean-like grid.
struct ValidityMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> valid;

  ValidityMask() = default;
  ValidityMask(int h, int w, bool value = true)
      : height(h), width(w), valid(static_cast<std::size_t>(h) * w, value ? 1 : 0) {}

  std::size_t size() const noexcept { return valid.size(); }
  bool operator()(int y, int x) const noexcept { return valid[y * width + x] != 0; }
  std::size_t count() const noexcept;
  void validate() const;
  friend bool operator==(const ValidityMask&, const ValidityMask&) = default;
};

/// Disk of radius 0.95 * min(H, W) / 2 centered on the grid.
ValidityMask radar_coverage_mask(int height, int width);

struct ClassGrid {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  ClassGrid() = default;
  ClassGrid(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const noexcept { return labels.size(); }
  std::uint8_t operator()(int y, int x) const noexcept { return labels[y * width + x]; }
  void validate() const;
  friend bool operator==(const ClassGrid&, const ClassGrid&) = default;
};

struct RainField {
  Tensor values;  // 1 x H x W, mm/hr
  std::int64_t timestamp = 0;  // minutes since epoch

  int height() const noexcept { return values.height(); }
  int width() const noexcept { return values.width(); }
  void validate() const;
};

/// 12-channel early-fusion input: 7 radar frames (oldest first), lon, lat,
/// then year / month / day-of-year encodings.
struct FusedInput {
  Tensor channels;

  int height() const noexcept { return channels.height(); }
  int width() const noexcept { return channels.width(); }
  void validate() const;
};

struct LogitGrid {
  Tensor z;  // K x H x W
  int lead_time = 1;

  void validate() const;
};

struct ProbGrid {
  Tensor p;  // K x H x W
  int lead_time = 1;

  void validate(double tol = 1e-6) const;
};

struct ConfidenceGrid {
  Tensor q;  // 1 x H x W, per-pixel max class probability
  int lead_time = 1;
};

/// Per-pixel softmax over the channel axis.
Tensor softmax(const Tensor& z);
ProbGrid softmax(const LogitGrid& z);

/// Softmax of a single K-vector; out must have the same length as z.
void softmax_vector(std::span<const double> z, std::span<double> out);

/// 0: rate < 1, 1: 1 <= rate < 10, 2: rate >= 10 (mm/hr).
std::uint8_t rain_class(double rate);
ClassGrid rain_to_classes(const RainField& field);

/// Per-pixel argmax; ties resolve to the lowest class index.
ClassGrid argmax_class(const Tensor& p);
ClassGrid argmax_class(const ProbGrid& p);

/// Representative rain rate inside each class interval (0.5, 5, 20 mm/hr).
double class_midpoint(int cls);

}  // namespace nowcast
