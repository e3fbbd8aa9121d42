#include "tokalign/synthetic.hpp"

#include <cmath>
#include <numbers>
#include <algorithm>
#include <random>
#include <sstream>

#include "tokalign/errors.hpp"
#include "tokalign/model.hpp"
#include "tokalign/random.hpp"

namespace tokalign {

std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::MeanOffset: return "mean-offset";
    case ShiftKind::ContrastScale: return "contrast-scale";
    case ShiftKind::Blur: return "blur";
    case ShiftKind::Mixture: return "mixture";
  }
  return "?";
}

ShiftKind parse_shift_kind(const std::string& s) {
  if (s == "mean-offset") return ShiftKind::MeanOffset;
  if (s == "contrast-scale") return ShiftKind::ContrastScale;
  if (s == "blur") return ShiftKind::Blur;
  if (s == "mixture") return ShiftKind::Mixture;
  throw ConfigError("unknown shift kind '" + s + "' (expected mean-offset, contrast-scale, blur or mixture)");
}

Image render_grating(const SyntheticConfig& config, int label, std::uint64_t stream_seed) {
  std::mt19937_64 rng(stream_seed);
  std::normal_distribution<double> noise(0.0, config.noise);
  constexpr double pi = std::numbers::pi;
  const double freq = config.base_frequency * std::pow(config.frequency_ratio, label / 4);
  // Orientation pairs per layout; single gratings repeat the same angle.
  static constexpr double kAngles[4][2] = {{0.0, 0.0}, {pi / 2, pi / 2}, {0.0, pi / 2}, {pi / 4, 3 * pi / 4}};
  const int layout = label % 4;
  const bool plaid = layout >= 2;
  const double phase0 = uniform(rng, 0.0, 2.0 * pi);
  const double phase1 = uniform(rng, 0.0, 2.0 * pi);
  const double n = config.image_size;
  Image im(config.channels, config.image_size, config.image_size);
  for (int c = 0; c < config.channels; ++c)
    for (int y = 0; y < config.image_size; ++y)
      for (int x = 0; x < config.image_size; ++x) {
        auto wave = [&](double theta, double phase) {
          return std::sin(2.0 * pi * freq * (x * std::cos(theta) + y * std::sin(theta)) / n + phase);
        };
        const double v = plaid ? (wave(kAngles[layout][0], phase0) + wave(kAngles[layout][1], phase1)) / std::sqrt(2.0)
                               : wave(kAngles[layout][0], phase0);
        im.at(c, y, x) = config.amplitude * v + noise(rng);
      }
  quantize_to_f32(im);
  return im;
}

namespace {

Image offset(const Image& im, double m) {
  Image out = im;
  for (double& v : out.data) v += m;
  return out;
}

Image contrast(const Image& im, double m) {
  Image out = im;
  const double factor = 1.0 / (1.0 + m);
  const std::size_t plane = static_cast<std::size_t>(im.height) * im.width;
  for (int c = 0; c < im.channels; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += im.data[c * plane + i];
    mean /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) out.data[c * plane + i] = mean + factor * (im.data[c * plane + i] - mean);
  }
  return out;
}

// Separable Gaussian blur with clamped borders.
Image blur(const Image& im, double sigma) {
  if (sigma <= 0.0) return im;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& w : k) w /= total;
  Image tmp = im, out = im;
  for (int c = 0; c < im.channels; ++c) {
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i)
          s += k[static_cast<std::size_t>(i + radius)] * im.at(c, y, std::clamp(x + i, 0, im.width - 1));
        tmp.at(c, y, x) = s;
      }
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i)
          s += k[static_cast<std::size_t>(i + radius)] * tmp.at(c, std::clamp(y + i, 0, im.height - 1), x);
        out.at(c, y, x) = s;
      }
  }
  return out;
}

}  // namespace

Image apply_shift(const Image& image, const ShiftSpec& shift) {
  if (!(shift.magnitude >= 0.0)) throw ConfigError("shift magnitude must be >= 0");
  if (shift.magnitude == 0.0) return image;
  Image out;
  switch (shift.kind) {
    case ShiftKind::MeanOffset: out = offset(image, shift.magnitude); break;
    case ShiftKind::ContrastScale: out = contrast(image, shift.magnitude); break;
    case ShiftKind::Blur: out = blur(image, shift.magnitude); break;
    case ShiftKind::Mixture:
      out = offset(contrast(blur(image, shift.magnitude / 2), shift.magnitude / 2), shift.magnitude / 2);
      break;
  }
  quantize_to_f32(out);
  return out;
}

SyntheticBundles gen_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
  if (config.n_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (config.n_classes > 16) throw ConfigError("synthetic data supports at most 16 classes");
  if (config.image_size < 1 || config.channels < 1) throw ConfigError("invalid synthetic image shape");
  if (config.n_train < 0 || config.n_val < 0 || config.n_test < 0) throw ConfigError("negative split size");
  if (!(config.shift.magnitude >= 0.0)) throw ConfigError("shift magnitude must be >= 0");

  const Vocabulary vocab = Vocabulary::synthetic(config.n_classes);
  auto make = [&](const std::string& split, int n, std::uint64_t stream, bool shifted) {
    DatasetBundle b;
    b.split = split;
    b.channels = config.channels;
    b.height = b.width = config.image_size;
    b.n_classes = config.n_classes;
    b.class_names = vocab.class_names();
    b.extra["seed"] = std::to_string(seed);
    if (shifted) {
      b.extra["shift_kind"] = to_string(config.shift.kind);
      std::ostringstream mag;
      mag.precision(17);
      mag << config.shift.magnitude;
      b.extra["shift_magnitude"] = mag.str();
    }
    const std::uint64_t split_seed = derive_seed(seed, stream);
    for (int i = 0; i < n; ++i) {
      const int label = i % config.n_classes;
      Image im = render_grating(config, label, derive_seed(split_seed, static_cast<std::uint64_t>(i)));
      if (shifted) im = apply_shift(im, config.shift);
      b.images.push_back(std::move(im));
      b.labels.push_back(label);
    }
    return b;
  };
  return {make("source-train", config.n_train, 1, false), make("source-val", config.n_val, 2, false),
          make("test-shifted", config.n_test, 3, true)};
}

}  // namespace tokalign
