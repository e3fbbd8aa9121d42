#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "tokalign/augment.hpp"
#include "tokalign/model.hpp"

namespace tokalign {

struct PretrainConfig {
  int epochs = 4;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  /// Train on one random resized crop / flip of every image per epoch.
  bool augment = true;
  AugmentConfig augment_config;
};

/// Per-epoch callback: (epoch index, mean training loss).
using EpochCallback = std::function<void(int, double)>;

/// Trains every backbone weight and the model's own prompts jointly with cross
/// entropy over classify() outputs. Deterministic for a fixed seed.
DualEncoder pretrain_backbone(const ModelConfig& config, std::span<const Image> images,
                              std::span<const int> labels, const PretrainConfig& train,
                              const EpochCallback& on_epoch = {});

/// Class probabilities for a set of images under fixed prompts, n x C.
Matrix predict_probs(const DualEncoder& model, const PromptState& prompts, std::span<const Image> images,
                     int batch_size = 64);

double top1_accuracy(const Matrix& probs, std::span<const int> labels);

}  // namespace tokalign
