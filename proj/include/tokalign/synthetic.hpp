#pragma once

// Class-conditional grating images with a controllable test-time shift.
// Class c uses layout c mod 4 (vertical grating, horizontal grating, 0/90
// degree plaid, 45/135 degree plaid) at frequency base_frequency *
// frequency_ratio^(c / 4) cycles per image. Every layout maps onto itself
// under a horizontal flip, so flipped views keep their label. Each sample
// draws random phases and additive Gaussian pixel noise.

#include <cstdint>
#include <string>

#include "tokalign/dataset.hpp"

namespace tokalign {

enum class ShiftKind { MeanOffset, ContrastScale, Blur, Mixture };

std::string to_string(ShiftKind k);
ShiftKind parse_shift_kind(const std::string& s);

struct ShiftSpec {
  ShiftKind kind = ShiftKind::MeanOffset;
  /// 0 leaves images untouched. Mean offset adds the magnitude to every pixel,
  /// contrast scale multiplies deviations from the image mean by
  /// 1 / (1 + magnitude), blur applies a Gaussian of sigma = magnitude pixels,
  /// mixture applies all three at half magnitude.
  double magnitude = 0.0;
  std::uint64_t seed = 0;
};

struct SyntheticConfig {
  int n_classes = 8;
  int image_size = 32;
  int channels = 1;
  int n_train = 1000;
  int n_val = 400;
  int n_test = 400;
  double amplitude = 1.0;
  double noise = 0.35;
  double base_frequency = 1.5;
  double frequency_ratio = 4.0;
  /// Mean offset of 1.3 costs the default encoder well over 15 points.
  ShiftSpec shift{ShiftKind::MeanOffset, 1.3, 0};
};

struct SyntheticBundles {
  DatasetBundle source_train;
  DatasetBundle source_val;
  DatasetBundle test_shifted;
};

/// Renders one clean-plus-noise sample of class `label`.
Image render_grating(const SyntheticConfig& config, int label, std::uint64_t stream_seed);
Image apply_shift(const Image& image, const ShiftSpec& shift);

/// Fully seed-deterministic; the three splits use independent streams and
/// classes are balanced in round-robin order.
SyntheticBundles gen_synthetic(const SyntheticConfig& config, std::uint64_t seed);

}  // namespace tokalign
