#pragma once

// Finite-difference checks of the adaptation objective on small random
// episodes: a freshly initialised toy model, augmented views of one grating
// image and source statistics from a handful of other gratings.

#include <cstdint>
#include <string>
#include <vector>

#include "tokalign/grad_check.hpp"
#include "tokalign/stats.hpp"
#include "tokalign/tta.hpp"

namespace tokalign {

/// 16x16 single-channel images, width 16, two heads, four classes.
ModelConfig toy_model_config();

struct GradEpisode {
  DualEncoder model;
  PromptState prompts;
  std::vector<Image> views;
  SourceStats stats;
  /// Set up for CMD so the test statistics reach order cmd_order.
  TTAConfig config;
};

enum class LossPart { Entropy, Align, Total };
std::string to_string(LossPart part);

/// Eight views of one grating, filter ratio 0.25, every vision layer aligned.
GradEpisode make_grad_episode(std::uint64_t seed);

/// Distance from the nearest non-differentiable point: the entropy gap at the
/// filter boundary and the smallest |test - source| moment difference.
double episode_margin(const GradEpisode& episode);

struct EpisodeOutput {
  AlignLoss variant = AlignLoss::L1;
  LossPart part = LossPart::Entropy;
};

/// The checked outputs in order: entropy, then align and total per variant.
std::vector<EpisodeOutput> episode_outputs();

/// All outputs over [text prompts..., couplings...] from one forward pass.
ad::MultiFunction episode_objective(const GradEpisode& episode);
std::vector<Matrix> episode_params(const GradEpisode& episode);

struct EpisodeCheckRow {
  std::uint64_t seed = 0;
  EpisodeOutput output;
  ad::GradCheckResult result;
};

struct EpisodeCheckReport {
  std::vector<EpisodeCheckRow> rows;
  int episodes = 0;
  /// Episodes redrawn because they sat within `margin` of a kink.
  int resampled = 0;
  /// Worst blockwise relative error (GradCheckResult::max_block_error).
  double max_relative_error() const;
  /// Worst per-coordinate relative error, for diagnostics.
  double max_coordinate_error() const;
};

EpisodeCheckReport run_episode_checks(int n_episodes, std::uint64_t seed, double margin = 5e-4,
                                      double step = 1e-4);

}  // namespace tokalign
