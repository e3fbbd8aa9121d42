#include "tokalign/augment.hpp"

#include <cmath>

#include "tokalign/errors.hpp"
#include "tokalign/random.hpp"

namespace tokalign {

CropParams sample_crop(int height, int width, std::uint64_t stream_seed, const AugmentConfig& config) {
  std::mt19937_64 rng(stream_seed);
  const double area = static_cast<double>(height) * width;
  const double log_lo = std::log(config.ratio_min), log_hi = std::log(config.ratio_max);
  CropParams crop{0, 0, width, height, false};
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * uniform(rng, config.scale_min, config.scale_max);
    const double ratio = std::exp(uniform(rng, log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= width && h <= height) {
      crop = {uniform_int(rng, 0, width - w), uniform_int(rng, 0, height - h), w, h, false};
      break;
    }
  }
  crop.flip = uniform01(rng) < config.flip_probability;
  return crop;
}

Image resized_crop(const Image& image, const CropParams& crop, int out_h, int out_w) {
  if (crop.x < 0 || crop.y < 0 || crop.width <= 0 || crop.height <= 0 || crop.x + crop.width > image.width ||
      crop.y + crop.height > image.height)
    throw ContractError("resized_crop: rectangle outside the image");
  Image out(image.channels, out_h, out_w);
  auto source = [](int out_i, int out_n, int start, int len) {
    return out_n == 1 ? start + 0.5 * (len - 1)
                      : start + static_cast<double>(out_i) * (len - 1) / static_cast<double>(out_n - 1);
  };
  for (int oy = 0; oy < out_h; ++oy) {
    const double sy = source(oy, out_h, crop.y, crop.height);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, crop.y + crop.height - 1);
    const double fy = sy - y0;
    for (int ox = 0; ox < out_w; ++ox) {
      const double sx = source(ox, out_w, crop.x, crop.width);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, crop.x + crop.width - 1);
      const double fx = sx - x0;
      for (int c = 0; c < image.channels; ++c) {
        const double top = image.at(c, y0, x0) + fx * (image.at(c, y0, x1) - image.at(c, y0, x0));
        const double bottom = image.at(c, y1, x0) + fx * (image.at(c, y1, x1) - image.at(c, y1, x0));
        out.at(c, oy, ox) = top + fy * (bottom - top);
      }
    }
  }
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out(image.channels, image.height, image.width);
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
  return out;
}

ViewBatch generate_views(const Image& image, int n_views, std::uint64_t seed, const AugmentConfig& config) {
  if (n_views < 1) throw ContractError("generate_views: n_views must be >= 1");
  if (!(config.scale_min > 0.0 && config.scale_min <= config.scale_max && config.scale_max <= 1.0))
    throw ConfigError("generate_views: crop scale range must satisfy 0 < min <= max <= 1");
  if (!(config.ratio_min > 0.0 && config.ratio_min <= config.ratio_max))
    throw ConfigError("generate_views: invalid aspect ratio range");
  ViewBatch batch;
  batch.seed = seed;
  batch.views.reserve(static_cast<std::size_t>(n_views));
  batch.views.push_back(image);
  for (int i = 1; i < n_views; ++i) {
    const CropParams crop =
        sample_crop(image.height, image.width, derive_seed(seed, static_cast<std::uint64_t>(i)), config);
    Image view = resized_crop(image, crop, image.height, image.width);
    if (crop.flip) view = flip_horizontal(view);
    batch.params_log.push_back(crop);
    batch.views.push_back(std::move(view));
  }
  return batch;
}

}  // namespace tokalign
