#pragma once

#include <cstdint>
#include <vector>

#include "tokalign/image.hpp"

namespace tokalign {

struct AugmentConfig {
  /// Crop area as a fraction of the image area.
  double scale_min = 0.5;
  double scale_max = 1.0;
  /// Crop aspect ratio (width / height), sampled log-uniformly.
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  double flip_probability = 0.5;
};

struct CropParams {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  bool flip = false;

  bool operator==(const CropParams&) const = default;
};

/// The original image at index 0 followed by randomly augmented views.
struct ViewBatch {
  std::vector<Image> views;
  std::uint64_t seed = 0;
  /// One entry per sampled view (views 1..n-1).
  std::vector<CropParams> params_log;
};

/// Random resized crop + horizontal flip. View i >= 1 draws from its own
/// stream derive_seed(seed, i), so the batch does not depend on generation
/// order.
ViewBatch generate_views(const Image& image, int n_views, std::uint64_t seed, const AugmentConfig& config = {});

CropParams sample_crop(int height, int width, std::uint64_t stream_seed, const AugmentConfig& config);

/// Bilinear resize of the crop rectangle to out_h x out_w. Sampling is
/// corner-aligned: output corners map exactly onto the crop corners.
Image resized_crop(const Image& image, const CropParams& crop, int out_h, int out_w);

Image flip_horizontal(const Image& image);

}  // namespace tokalign
