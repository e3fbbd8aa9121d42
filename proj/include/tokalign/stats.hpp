#pragma once

// Per-layer, channel-wise token statistics. Means and variances collapse both
// the view axis and the token axis into one width-sized row per layer;
// variances and higher central moments use the biased 1/N normalisation.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tokalign/autodiff.hpp"
#include "tokalign/binary_io.hpp"
#include "tokalign/model.hpp"

namespace tokalign {

/// Which token positions of a vision sequence contribute to statistics.
struct TokenMask {
  bool cls = false;
  bool prompts = false;
  bool patches = true;

  /// Selected positions inside one sequence, ascending.
  std::vector<ad::Index> positions(const ModelConfig& config) const;
};

/// Rows of a stacked (n_seq * seq_len) batch selected by `positions`, in
/// sequence-major order.
std::vector<ad::Index> token_rows(ad::Index n_seq, ad::Index seq_len, std::span<const ad::Index> positions);

/// Output tokens of one forward pass: per layer, (n_images * seq_len) x width.
struct LayerTokens {
  std::vector<Matrix> layers;
  ad::Index seq_len = 0;
};

struct LayerStats {
  std::vector<RowVector> mu;
  std::vector<RowVector> var;

  int n_layers() const { return static_cast<int>(mu.size()); }
};

struct SourceStats {
  std::vector<RowVector> mu;
  std::vector<RowVector> var;
  /// higher[l][k - 3] is the order-k central moment of layer l, k = 3..max_order.
  std::vector<std::vector<RowVector>> higher;
  int max_order = 2;
  io::Digest model_hash{};
  std::string dataset_id;
  std::uint64_t sample_count = 0;

  int n_layers() const { return static_cast<int>(mu.size()); }
  int width() const { return mu.empty() ? 0 : static_cast<int>(mu.front().cols()); }
  /// Order 1 is the mean, order 2 the variance.
  const RowVector& moment(int layer, int order) const;

  bool operator==(const SourceStats&) const;
};

// ---- numeric ---------------------------------------------------------------

/// Two-pass statistics over every batch, as if the batches were concatenated
/// in order.
LayerStats view_stats(std::span<const LayerTokens> batches, std::span<const ad::Index> positions);
/// Single-pass streaming statistics (row-by-row accumulator); agrees with the
/// two-pass route to rounding.
LayerStats view_stats_streaming(std::span<const LayerTokens> batches, std::span<const ad::Index> positions);

/// Central moments of orders 2..max_order: result[l][k - 2].
std::vector<std::vector<RowVector>> central_moments(std::span<const LayerTokens> batches,
                                                    std::span<const ad::Index> positions, int max_order);

/// Statistics of the pretrained encoder, run with the checkpoint's own
/// source-trained prompts, over a dataset. Each image runs its own forward
/// pass and its tokens are reduced with two passes and merged in dataset order,
/// so the result is bit-identical for every batch_size.
SourceStats compute_source_stats(const DualEncoder& model, std::span<const Image> dataset, int batch_size,
                                 int max_order, const TokenMask& mask = {}, std::string dataset_id = "");

/// Wraps numeric statistics as a SourceStats record for `model`.
SourceStats make_source_stats(const DualEncoder& model, const LayerStats& stats,
                              const std::vector<std::vector<RowVector>>& moments, int max_order);

/// Layer tokens of a batch of images under the checkpoint's own prompts.
LayerTokens pretrained_tokens(const DualEncoder& model, std::span<const Image> images);

// ---- differentiable --------------------------------------------------------

struct StatsVars {
  std::vector<ad::Var> mu;
  std::vector<ad::Var> var;
  /// higher[i][k - 3] for orders 3..max_order.
  std::vector<std::vector<ad::Var>> higher;
};

/// Statistics of the selected token rows of each given layer. `layers` are
/// 1-based layer indices; the outputs follow their order. `layer_tokens` may
/// hold several token batches per layer (one per forward pass); they are
/// concatenated in order before reduction.
StatsVars view_stats(std::span<const std::vector<ad::Var>> layer_tokens_per_batch, ad::Index seq_len,
                     std::span<const ad::Index> positions, std::span<const int> layers, int max_order);

// ---- files -----------------------------------------------------------------

void save_stats(const SourceStats& stats, const std::string& path);
/// Throws FormatError on malformed input and CompatibilityError when the
/// stored model hash differs from `expected_model_hash`.
SourceStats load_stats(const std::string& path, const io::Digest& expected_model_hash);
/// Loads without the hash check.
SourceStats load_stats_unchecked(const std::string& path);
std::vector<std::uint8_t> serialize_stats(const SourceStats& stats);
SourceStats deserialize_stats(std::span<const std::uint8_t> bytes);
/// Human-readable JSON mirror of the binary file.
std::string stats_to_json(const SourceStats& stats);

}  // namespace tokalign
