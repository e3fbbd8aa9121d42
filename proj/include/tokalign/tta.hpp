#pragma once

// Per-sample test-time prompt adaptation: confidence-filtered entropy of the
// view predictions plus beta times the alignment between the views' token
// statistics and precomputed source statistics.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokalign/augment.hpp"
#include "tokalign/model.hpp"
#include "tokalign/optim.hpp"
#include "tokalign/stats.hpp"

namespace tokalign {

enum class AlignLoss { L1, L2, KL, CMD };
enum class AdaptMode { Episodic, Continuous };

std::string to_string(AlignLoss v);
std::string to_string(AdaptMode m);
std::string to_string(OptimizerKind k);
/// Throw ConfigError on unknown names.
AlignLoss parse_align_loss(const std::string& s);
AdaptMode parse_adapt_mode(const std::string& s);
OptimizerKind parse_optimizer(const std::string& s);

struct TTAConfig {
  double beta = 100.0;
  int n_views = 64;
  double filter_ratio = 0.10;
  double learning_rate = 5e-4;
  /// 0 skips adaptation entirely (zero-shot prediction).
  int n_steps = 1;
  /// 1-based vision layer indices.
  std::vector<int> align_layers{1, 2, 3};
  AlignLoss align_loss = AlignLoss::L1;
  /// Highest central moment used by the CMD variant.
  int cmd_order = 5;
  AdaptMode mode = AdaptMode::Episodic;
  double prompt_reg_lambda = 0.0;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  /// Variance floor for the Gaussian KL variant.
  double kl_floor = 1e-12;
  bool train_coupling = true;
  /// Number of images whose views feed the test statistics (the sample
  /// itself plus bag_size - 1 companions).
  int bag_size = 1;
  AugmentConfig augment;
  TokenMask token_mask;

  /// Throws ConfigError when a field is outside its domain for `model`.
  void validate(const ModelConfig& model) const;
  /// Highest moment order the alignment variant reads.
  int required_order() const { return align_loss == AlignLoss::CMD ? cmd_order : 2; }
};

struct StepLog {
  double entropy = 0.0;
  double align = 0.0;
  double total = 0.0;
  bool operator==(const StepLog&) const = default;
};

struct EpisodeResult {
  int prediction = -1;
  RowVector probs;
  /// Losses measured before each update.
  std::vector<StepLog> steps;
  /// Views kept by the confidence filter at the last step.
  std::vector<int> kept;
  double wall_seconds = 0.0;

  /// Equality of everything except the wall time.
  bool same_outcome(const EpisodeResult& o) const;
};

// ---- loss pieces -----------------------------------------------------------

/// Shannon entropy (natural log) of every row.
std::vector<double> row_entropies(const Matrix& probs);

/// The max(1, floor(ratio * N)) rows with the lowest entropy, returned in
/// ascending index order. Equal entropies prefer the lower index.
std::vector<int> confidence_filter(const Matrix& probs, double ratio);

/// Entropy of the mean of the kept probability rows.
ad::Var entropy_loss(ad::Var probs, std::span<const int> kept);
double entropy_loss(const Matrix& probs, std::span<const int> kept);

struct AlignOptions {
  AlignLoss variant = AlignLoss::L1;
  int cmd_order = 5;
  double kl_floor = 1e-12;
};

/// Alignment between test statistics (indexed like `layers`) and source
/// statistics (indexed by layer - 1). L1 and L2 sum over channels and average
/// over layers; KL sums the per-channel Gaussian KL(test || source) over
/// channels and averages over layers.
ad::Var align_loss(const StatsVars& test, const SourceStats& source, std::span<const int> layers,
                   const AlignOptions& options);
/// Numeric form; `test` holds moments for every layer like `source`.
double align_loss(const SourceStats& test, const SourceStats& source, std::span<const int> layers,
                  const AlignOptions& options);

inline ad::Var combined_loss(ad::Var entropy, ad::Var align, double beta) { return entropy + align * beta; }

// ---- episodes --------------------------------------------------------------

struct EpisodeLoss {
  ad::Var probs;
  std::vector<int> kept;
  ad::Var entropy;
  /// Test statistics of the aligned layers (empty without source stats).
  StatsVars test_stats;
  std::optional<ad::Var> align;
  ad::Var total;
};

/// Builds the adaptation objective for `views` on the tape behind `weights`.
/// Only the first `n_primary` views feed the prediction entropy; all views
/// feed the statistics. Without `stats` the objective is the entropy alone.
EpisodeLoss episode_loss(const DualEncoder& model, WeightBinder& weights, const PromptVars& prompts,
                         std::span<const Image> views, std::size_t n_primary, const SourceStats* stats,
                         const TTAConfig& config);

/// Holds everything shared by the episodes of one run: the frozen model, the
/// optional source statistics (hash-checked once) and the configuration.
class Adapter {
 public:
  /// Throws CompatibilityError if `stats` were computed for another model and
  /// ConfigError on an invalid configuration.
  Adapter(const DualEncoder& model, const SourceStats* stats, TTAConfig config);

  /// One episode on `image`. Episodic mode first resets `prompts`; continuous
  /// mode keeps them and the optimizer state. `bag` supplies the companion
  /// images for bag-of-samples statistics.
  EpisodeResult adapt(const Image& image, PromptState& prompts, std::uint64_t seed,
                      std::span<const Image> bag = {});

  /// Loss pieces for `views` under `prompts` without updating anything.
  StepLog evaluate(std::span<const Image> views, const PromptState& prompts) const;

  const TTAConfig& config() const { return config_; }
  const DualEncoder& model() const { return model_; }
  bool has_stats() const { return stats_ != nullptr; }
  /// Resets the optimizer state carried across continuous-mode samples.
  void reset_optimizer() { opt_state_ = {}; }

 private:
  struct StepOutput {
    StepLog log;
    std::vector<int> kept;
    std::vector<Matrix> grad_text;
    std::vector<Matrix> grad_coupling;
  };
  StepOutput step(std::span<const Image> views, std::size_t n_primary, const PromptState& prompts,
                  bool want_grads) const;

  const DualEncoder& model_;
  const SourceStats* stats_;
  TTAConfig config_;
  OptimizerState opt_state_;
};

/// Single-episode convenience wrapper around Adapter using config.seed.
EpisodeResult adapt_and_predict(const Image& image, const DualEncoder& model, PromptState& prompts,
                                const SourceStats* source_stats, const TTAConfig& config);

/// Continuous adaptation over a stream: prompts and optimizer state persist.
/// Sample i uses seed derive_seed(config.seed, i). With prompt_reg_lambda > 0
/// every update is followed by the proximal step of lambda*||p - p_prev||^2.
std::vector<EpisodeResult> continuous_adapt(std::span<const Image> stream, const DualEncoder& model,
                                            PromptState& prompts, const SourceStats* source_stats,
                                            const TTAConfig& config);

/// Max-norm distance between two prompt states (text and coupling).
double prompt_distance(const PromptState& a, const PromptState& b);

}  // namespace tokalign
