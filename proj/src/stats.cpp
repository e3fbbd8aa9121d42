#include "tokalign/stats.hpp"

#include <algorithm>

#include "tokalign/checkpoint.hpp"
#include "tokalign/errors.hpp"
#include "tokalign/moments.hpp"

namespace tokalign {

namespace {

void require_positions(std::span<const ad::Index> positions) {
  if (positions.empty()) throw ContractError("statistics: token mask selects no positions");
}

/// Selected rows of layer `l` across all batches, concatenated in order.
Matrix selected_rows(std::span<const LayerTokens> batches, std::span<const ad::Index> positions, std::size_t l) {
  ad::Index total = 0;
  for (const LayerTokens& b : batches) total += b.layers.at(l).rows() / b.seq_len * static_cast<ad::Index>(positions.size());
  Matrix out(total, batches.front().layers.at(l).cols());
  ad::Index at = 0;
  for (const LayerTokens& b : batches) {
    const Matrix& x = b.layers[l];
    for (ad::Index r : token_rows(x.rows() / b.seq_len, b.seq_len, positions)) out.row(at++) = x.row(r);
  }
  return out;
}

std::size_t layer_count(std::span<const LayerTokens> batches) {
  if (batches.empty()) throw ContractError("statistics: no token batches");
  const std::size_t n = batches.front().layers.size();
  for (const LayerTokens& b : batches) {
    if (b.layers.size() != n) throw DimensionError("statistics: batches disagree on layer count");
    if (b.seq_len <= 0) throw ContractError("statistics: invalid sequence length");
  }
  return n;
}

}  // namespace

std::vector<ad::Index> TokenMask::positions(const ModelConfig& config) const {
  std::vector<ad::Index> out;
  if (cls) out.push_back(0);
  if (prompts)
    for (int i = 0; i < config.n_prompt_tokens; ++i) out.push_back(1 + i);
  if (patches)
    for (int i = 0; i < config.n_patches(); ++i) out.push_back(1 + config.n_prompt_tokens + i);
  return out;
}

std::vector<ad::Index> token_rows(ad::Index n_seq, ad::Index seq_len, std::span<const ad::Index> positions) {
  std::vector<ad::Index> rows;
  rows.reserve(static_cast<std::size_t>(n_seq) * positions.size());
  for (ad::Index s = 0; s < n_seq; ++s)
    for (ad::Index p : positions) {
      if (p < 0 || p >= seq_len) throw DimensionError("token_rows: position outside the sequence");
      rows.push_back(s * seq_len + p);
    }
  return rows;
}

const RowVector& SourceStats::moment(int layer, int order) const {
  const auto l = static_cast<std::size_t>(layer);
  if (order == 1) return mu.at(l);
  if (order == 2) return var.at(l);
  if (order < 1 || order > max_order) throw ContractError("SourceStats: order not stored");
  return higher.at(l).at(static_cast<std::size_t>(order - 3));
}

bool SourceStats::operator==(const SourceStats& o) const {
  auto eq = [](const std::vector<RowVector>& a, const std::vector<RowVector>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].cols() != b[i].cols() || a[i] != b[i]) return false;
    return true;
  };
  if (!eq(mu, o.mu) || !eq(var, o.var) || higher.size() != o.higher.size()) return false;
  for (std::size_t l = 0; l < higher.size(); ++l)
    if (!eq(higher[l], o.higher[l])) return false;
  return max_order == o.max_order && model_hash == o.model_hash && dataset_id == o.dataset_id &&
         sample_count == o.sample_count;
}

LayerStats view_stats(std::span<const LayerTokens> batches, std::span<const ad::Index> positions) {
  require_positions(positions);
  const std::size_t n_layers = layer_count(batches);
  LayerStats out;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const Matrix x = selected_rows(batches, positions, l);
    RowVector mu = column_mean(x);
    out.var.push_back(column_central_moment(x, mu, 2));
    out.mu.push_back(std::move(mu));
  }
  return out;
}

LayerStats view_stats_streaming(std::span<const LayerTokens> batches, std::span<const ad::Index> positions) {
  require_positions(positions);
  const std::size_t n_layers = layer_count(batches);
  LayerStats out;
  for (std::size_t l = 0; l < n_layers; ++l) {
    MomentAccumulator<double> acc(batches.front().layers[l].cols(), 2);
    for (const LayerTokens& b : batches) {
      const Matrix& x = b.layers[l];
      for (ad::Index r : token_rows(x.rows() / b.seq_len, b.seq_len, positions)) acc.add_row(x.row(r));
    }
    out.mu.push_back(acc.mean());
    out.var.push_back(acc.central_moment(2));
  }
  return out;
}

std::vector<std::vector<RowVector>> central_moments(std::span<const LayerTokens> batches,
                                                    std::span<const ad::Index> positions, int max_order) {
  if (max_order < 2) throw ContractError("central_moments: order must be >= 2");
  require_positions(positions);
  const std::size_t n_layers = layer_count(batches);
  std::vector<std::vector<RowVector>> out(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    const Matrix x = selected_rows(batches, positions, l);
    const RowVector mu = column_mean(x);
    for (int k = 2; k <= max_order; ++k) out[l].push_back(column_central_moment(x, mu, k));
  }
  return out;
}

LayerTokens pretrained_tokens(const DualEncoder& model, std::span<const Image> images) {
  ad::Tape tape;
  WeightBinder w(tape, false);
  const PromptVars pv = bind_model_prompts(w, model);
  const VisionForward f = forward_images(model, w, images, pv.vision);
  LayerTokens out;
  out.seq_len = f.seq_len;
  for (const ad::Var& v : f.layer_tokens) out.layers.push_back(v.value());
  return out;
}

SourceStats compute_source_stats(const DualEncoder& model, std::span<const Image> dataset, int batch_size,
                                 int max_order, const TokenMask& mask, std::string dataset_id) {
  if (dataset.empty()) throw DataError("source statistics: empty dataset");
  if (batch_size < 1) throw ContractError("source statistics: batch size must be >= 1");
  if (max_order < 2) throw ContractError("source statistics: order must be >= 2");
  const std::vector<ad::Index> positions = mask.positions(model.config);
  require_positions(positions);
  const auto n_layers = static_cast<std::size_t>(model.config.vision_layers);
  std::vector<MomentAccumulator<double>> acc(n_layers,
                                             MomentAccumulator<double>(model.config.vision_width, max_order));
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < dataset.size(); start += bs) {
    const std::size_t count = std::min(bs, dataset.size() - start);
    for (std::size_t i = 0; i < count; ++i) {
      // One image per forward: GEMM blocking depends on the row count, so
      // stacking images would make the bits depend on batch_size.
      const LayerTokens tokens = pretrained_tokens(model, dataset.subspan(start + i, 1));
      const std::vector<ad::Index> rows = token_rows(1, tokens.seq_len, positions);
      for (std::size_t l = 0; l < n_layers; ++l) {
        Matrix x(static_cast<ad::Index>(rows.size()), tokens.layers[l].cols());
        for (std::size_t j = 0; j < rows.size(); ++j) x.row(static_cast<ad::Index>(j)) = tokens.layers[l].row(rows[j]);
        acc[l].merge(MomentAccumulator<double>::from_rows(x, max_order));
      }
    }
  }
  SourceStats out;
  out.max_order = max_order;
  out.model_hash = model_hash(model);
  out.dataset_id = std::move(dataset_id);
  out.sample_count = dataset.size();
  for (const auto& a : acc) {
    out.mu.push_back(a.mean());
    out.var.push_back(a.central_moment(2));
    std::vector<RowVector> hi;
    for (int k = 3; k <= max_order; ++k) hi.push_back(a.central_moment(k));
    out.higher.push_back(std::move(hi));
  }
  return out;
}

SourceStats make_source_stats(const DualEncoder& model, const LayerStats& stats,
                              const std::vector<std::vector<RowVector>>& moments, int max_order) {
  if (max_order < 2) throw ContractError("make_source_stats: order must be >= 2");
  SourceStats out;
  out.mu = stats.mu;
  out.var = stats.var;
  out.max_order = max_order;
  out.model_hash = model_hash(model);
  for (std::size_t l = 0; l < stats.mu.size(); ++l) {
    std::vector<RowVector> hi;
    for (int k = 3; k <= max_order; ++k) hi.push_back(moments.at(l).at(static_cast<std::size_t>(k - 2)));
    out.higher.push_back(std::move(hi));
  }
  return out;
}

StatsVars view_stats(std::span<const std::vector<ad::Var>> layer_tokens_per_batch, ad::Index seq_len,
                     std::span<const ad::Index> positions, std::span<const int> layers, int max_order) {
  require_positions(positions);
  if (layer_tokens_per_batch.empty()) throw ContractError("view_stats: no token batches");
  if (max_order < 2) throw ContractError("view_stats: order must be >= 2");
  StatsVars out;
  for (int layer : layers) {
    std::vector<ad::Var> parts;
    for (const auto& batch : layer_tokens_per_batch) {
      if (layer < 1 || layer > static_cast<int>(batch.size()))
        throw ContractError("view_stats: layer " + std::to_string(layer) + " out of range");
      const ad::Var x = batch[static_cast<std::size_t>(layer - 1)];
      parts.push_back(ad::gather_rows(x, token_rows(x.rows() / seq_len, seq_len, positions)));
    }
    const ad::Var rows = parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
    out.mu.push_back(ad::column_moment(rows, 1));
    out.var.push_back(ad::column_moment(rows, 2));
    std::vector<ad::Var> hi;
    for (int k = 3; k <= max_order; ++k) hi.push_back(ad::column_moment(rows, k));
    out.higher.push_back(std::move(hi));
  }
  return out;
}

}  // namespace tokalign
