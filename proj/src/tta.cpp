#include "tokalign/tta.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "tokalign/checkpoint.hpp"
#include "tokalign/errors.hpp"
#include "tokalign/moments.hpp"
#include "tokalign/random.hpp"

namespace tokalign {

std::string to_string(AlignLoss v) {
  switch (v) {
    case AlignLoss::L1: return "l1";
    case AlignLoss::L2: return "l2";
    case AlignLoss::KL: return "kl";
    case AlignLoss::CMD: return "cmd";
  }
  return "?";
}

std::string to_string(AdaptMode m) { return m == AdaptMode::Episodic ? "episodic" : "continuous"; }

std::string to_string(OptimizerKind k) { return k == OptimizerKind::AdamW ? "adamw" : "sgd"; }

AlignLoss parse_align_loss(const std::string& s) {
  if (s == "l1") return AlignLoss::L1;
  if (s == "l2") return AlignLoss::L2;
  if (s == "kl") return AlignLoss::KL;
  if (s == "cmd") return AlignLoss::CMD;
  throw ConfigError("unknown align_loss '" + s + "' (expected l1, l2, kl or cmd)");
}

AdaptMode parse_adapt_mode(const std::string& s) {
  if (s == "episodic") return AdaptMode::Episodic;
  if (s == "continuous") return AdaptMode::Continuous;
  throw ConfigError("unknown mode '" + s + "' (expected episodic or continuous)");
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adamw") return OptimizerKind::AdamW;
  if (s == "sgd") return OptimizerKind::SGD;
  throw ConfigError("unknown optimizer '" + s + "' (expected adamw or sgd)");
}

void TTAConfig::validate(const ModelConfig& model) const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and >= 0");
  if (n_views < 1) throw ConfigError("n_views must be >= 1");
  if (!(filter_ratio > 0.0 && filter_ratio <= 1.0)) throw ConfigError("filter_ratio must lie in (0, 1]");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (n_steps < 0) throw ConfigError("n_steps must be >= 0");
  if (align_layers.empty()) throw ConfigError("align_layers must not be empty");
  for (int l : align_layers)
    if (l < 1 || l > model.vision_layers)
      throw ConfigError("align layer " + std::to_string(l) + " outside [1, " + std::to_string(model.vision_layers) +
                        "]");
  if (align_loss == AlignLoss::CMD && cmd_order < 3) throw ConfigError("cmd_order must be >= 3");
  if (!(prompt_reg_lambda >= 0.0)) throw ConfigError("prompt_reg_lambda must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(kl_floor > 0.0)) throw ConfigError("kl_floor must be > 0");
  if (bag_size < 1) throw ConfigError("bag_size must be >= 1");
}

bool EpisodeResult::same_outcome(const EpisodeResult& o) const {
  return prediction == o.prediction && probs.cols() == o.probs.cols() && probs == o.probs && steps == o.steps &&
         kept == o.kept;
}

std::vector<double> row_entropies(const Matrix& probs) {
  std::vector<double> h(static_cast<std::size_t>(probs.rows()), 0.0);
  for (ad::Index r = 0; r < probs.rows(); ++r) {
    double s = 0.0;
    for (ad::Index c = 0; c < probs.cols(); ++c) {
      const double p = probs(r, c);
      if (p > 0.0) s -= p * std::log(p);
    }
    h[static_cast<std::size_t>(r)] = s;
  }
  return h;
}

std::vector<int> confidence_filter(const Matrix& probs, double ratio) {
  const auto n = static_cast<int>(probs.rows());
  if (n == 0) return {};
  const int keep = std::clamp(static_cast<int>(std::floor(ratio * n)), 1, n);
  const std::vector<double> h = row_entropies(probs);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return h[static_cast<std::size_t>(a)] < h[static_cast<std::size_t>(b)]; });
  order.resize(static_cast<std::size_t>(keep));
  std::sort(order.begin(), order.end());
  return order;
}

ad::Var entropy_loss(ad::Var probs, std::span<const int> kept) {
  if (kept.empty()) throw ContractError("entropy_loss: no kept rows");
  const std::vector<ad::Index> rows(kept.begin(), kept.end());
  const ad::Var mean = ad::column_mean(ad::gather_rows(probs, rows));
  return ad::scale(ad::sum(ad::xlogx(mean)), -1.0);
}

double entropy_loss(const Matrix& probs, std::span<const int> kept) {
  if (kept.empty()) throw ContractError("entropy_loss: no kept rows");
  Matrix x(static_cast<ad::Index>(kept.size()), probs.cols());
  for (std::size_t i = 0; i < kept.size(); ++i) x.row(static_cast<ad::Index>(i)) = probs.row(kept[i]);
  const RowVector p = column_mean(x);
  double s = 0.0;
  for (ad::Index c = 0; c < p.cols(); ++c)
    if (p(c) > 0.0) s -= p(c) * std::log(p(c));
  return s;
}

namespace {

ad::Var distance(ad::Var test, const RowVector& source, AlignLoss variant) {
  const ad::Var diff = ad::sub(test, test.tape().constant(source));
  return variant == AlignLoss::L2 ? ad::sum(ad::square(diff)) : ad::sum(ad::abs(diff));
}

ad::Var gaussian_kl(ad::Var mu, ad::Var var, const RowVector& mu_s, const RowVector& var_s, double floor) {
  ad::Tape& tape = mu.tape();
  const RowVector var_sc = var_s.cwiseMax(floor);
  const ad::Var v = ad::clamp_min(var, floor);
  const ad::Var dm = ad::sub(mu, tape.constant(mu_s));
  const ad::Var ratio = ad::mul(ad::add(v, ad::square(dm)), tape.constant(var_sc.cwiseInverse()));
  // 0.5 * sum(log var_s - log var + (var + dmu^2) / var_s - 1)
  const double const_part = var_sc.array().log().sum() - static_cast<double>(var_sc.cols());
  return ad::scale(ad::add_scalar(ad::sub(ad::sum(ratio), ad::sum(ad::log(v))), const_part), 0.5);
}

}  // namespace

ad::Var align_loss(const StatsVars& test, const SourceStats& source, std::span<const int> layers,
                   const AlignOptions& options) {
  if (layers.empty()) throw ContractError("align_loss: no layers");
  if (test.mu.size() != layers.size() || test.var.size() != layers.size())
    throw ContractError("align_loss: test statistics do not match the layer list");
  if (options.variant == AlignLoss::CMD) {
    if (source.max_order < options.cmd_order)
      throw ContractError("align_loss: source statistics stop at order " + std::to_string(source.max_order));
    if (test.higher.size() != layers.size()) throw ContractError("align_loss: missing higher test moments");
  }
  ad::Var total;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const int layer = layers[i];
    if (layer < 1 || layer > source.n_layers())
      throw ContractError("align_loss: layer " + std::to_string(layer) + " not in source statistics");
    const auto l = static_cast<std::size_t>(layer - 1);
    if (test.mu[i].cols() != source.mu[l].cols() || test.var[i].cols() != source.var[l].cols() ||
        test.mu[i].rows() != 1)
      throw ContractError("align_loss: width mismatch between test and source statistics");
    ad::Var term;
    if (options.variant == AlignLoss::KL) {
      term = gaussian_kl(test.mu[i], test.var[i], source.mu[l], source.var[l], options.kl_floor);
    } else {
      term = distance(test.mu[i], source.mu[l], options.variant) + distance(test.var[i], source.var[l], options.variant);
      if (options.variant == AlignLoss::CMD)
        for (int k = 3; k <= options.cmd_order; ++k) {
          const ad::Var m = test.higher[i].at(static_cast<std::size_t>(k - 3));
          if (m.cols() != source.mu[l].cols()) throw ContractError("align_loss: width mismatch in higher moments");
          term = term + distance(m, source.moment(layer - 1, k), AlignLoss::L1);
        }
    }
    total = i == 0 ? term : total + term;
  }
  return ad::scale(total, 1.0 / static_cast<double>(layers.size()));
}

double align_loss(const SourceStats& test, const SourceStats& source, std::span<const int> layers,
                  const AlignOptions& options) {
  ad::Tape tape;
  StatsVars sv;
  for (int layer : layers) {
    if (layer < 1 || layer > test.n_layers()) throw ContractError("align_loss: layer not in test statistics");
    sv.mu.push_back(tape.constant(test.moment(layer - 1, 1)));
    sv.var.push_back(tape.constant(test.moment(layer - 1, 2)));
    std::vector<ad::Var> hi;
    if (options.variant == AlignLoss::CMD)
      for (int k = 3; k <= options.cmd_order; ++k) hi.push_back(tape.constant(test.moment(layer - 1, k)));
    sv.higher.push_back(std::move(hi));
  }
  return align_loss(sv, source, layers, options).scalar();
}

// ---- episodes --------------------------------------------------------------

Adapter::Adapter(const DualEncoder& model, const SourceStats* stats, TTAConfig config)
    : model_(model), stats_(stats), config_(std::move(config)) {
  config_.validate(model_.config);
  if (config_.token_mask.positions(model_.config).empty()) throw ConfigError("token mask selects no positions");
  if (stats_ != nullptr) {
    if (stats_->model_hash != model_hash(model_))
      throw CompatibilityError("source statistics were computed for model " + io::to_hex(stats_->model_hash) +
                               ", not for the loaded model " + io::to_hex(model_hash(model_)));
    if (stats_->n_layers() != model_.config.vision_layers || stats_->width() != model_.config.vision_width)
      throw ContractError("source statistics shape does not match the model");
    if (stats_->max_order < config_.required_order())
      throw ContractError("source statistics stop at order " + std::to_string(stats_->max_order) + ", need " +
                          std::to_string(config_.required_order()));
  }
}

EpisodeLoss episode_loss(const DualEncoder& model, WeightBinder& weights, const PromptVars& prompts,
                         std::span<const Image> views, std::size_t n_primary, const SourceStats* stats,
                         const TTAConfig& config) {
  std::vector<int> classes(static_cast<std::size_t>(model.config.n_classes));
  std::iota(classes.begin(), classes.end(), 0);
  const ad::Var text = forward_texts(model, weights, classes, prompts.text);
  const VisionForward vis = forward_images(model, weights, views, prompts.vision);
  EpisodeLoss out;
  out.probs = classify(vis.features, text, model.config.logit_scale);
  if (n_primary < views.size()) out.probs = ad::slice_rows(out.probs, 0, static_cast<ad::Index>(n_primary));
  out.kept = confidence_filter(out.probs.value(), config.filter_ratio);
  out.entropy = entropy_loss(out.probs, out.kept);
  out.total = out.entropy;
  if (stats != nullptr) {
    const std::vector<ad::Index> positions = config.token_mask.positions(model.config);
    const std::vector<std::vector<ad::Var>> batches{vis.layer_tokens};
    out.test_stats = view_stats(batches, vis.seq_len, positions, config.align_layers, config.required_order());
    out.align = align_loss(out.test_stats, *stats, config.align_layers, {config.align_loss, config.cmd_order, config.kl_floor});
    out.total = combined_loss(out.entropy, *out.align, config.beta);
  }
  return out;
}

Adapter::StepOutput Adapter::step(std::span<const Image> views, std::size_t n_primary, const PromptState& prompts,
                                  bool want_grads) const {
  ad::Tape tape;
  WeightBinder weights(tape, false);
  const PromptVars pv = bind_prompts(tape, prompts, want_grads, want_grads && config_.train_coupling);
  const EpisodeLoss loss = episode_loss(model_, weights, pv, views, n_primary, stats_, config_);

  StepOutput out;
  out.kept = loss.kept;
  out.log.entropy = loss.entropy.scalar();
  if (loss.align) out.log.align = loss.align->scalar();
  out.log.total = loss.total.scalar();
  if (!std::isfinite(out.log.total)) throw ContractError("adaptation loss is not finite");

  if (want_grads) {
    const ad::Gradients grads = tape.backward(loss.total);
    for (const ad::Var& v : pv.text) out.grad_text.push_back(grads.at(v.id()));
    if (config_.train_coupling)
      for (const ad::Var& v : pv.coupling) out.grad_coupling.push_back(grads.at(v.id()));
  }
  return out;
}

StepLog Adapter::evaluate(std::span<const Image> views, const PromptState& prompts) const {
  return step(views, views.size(), prompts, false).log;
}

EpisodeResult Adapter::adapt(const Image& image, PromptState& prompts, std::uint64_t seed,
                             std::span<const Image> bag) {
  const auto start = std::chrono::steady_clock::now();
  if (config_.mode == AdaptMode::Episodic) {
    prompts.reset();
    opt_state_ = {};
  }
  EpisodeResult result;
  if (config_.n_steps > 0) {
    std::vector<Image> views = generate_views(image, config_.n_views, seed, config_.augment).views;
    const std::size_t n_primary = views.size();
    if (!bag.empty()) {
      // Companions only feed the statistics; each contributes an equal share
      // of the view budget.
      const int per_member = std::max(1, config_.n_views / config_.bag_size);
      for (std::size_t j = 0; j < bag.size(); ++j) {
        ViewBatch extra = generate_views(bag[j], per_member, derive_seed(seed, 0x6261670000ULL + j), config_.augment);
        for (Image& v : extra.views) views.push_back(std::move(v));
      }
    }

    OptimizerConfig opt;
    opt.kind = config_.optimizer;
    opt.learning_rate = config_.learning_rate;
    opt.weight_decay = config_.weight_decay;
    const double prox = 2.0 * config_.learning_rate * config_.prompt_reg_lambda;

    for (int s = 0; s < config_.n_steps; ++s) {
      StepOutput out = step(views, n_primary, prompts, true);
      result.steps.push_back(out.log);
      result.kept = std::move(out.kept);

      std::vector<Matrix*> params;
      std::vector<Matrix> grads;
      for (std::size_t i = 0; i < prompts.text.size(); ++i) {
        params.push_back(&prompts.text[i]);
        grads.push_back(std::move(out.grad_text[i]));
      }
      if (config_.train_coupling)
        for (std::size_t i = 0; i < prompts.coupling.size(); ++i) {
          params.push_back(&prompts.coupling[i]);
          grads.push_back(std::move(out.grad_coupling[i]));
        }
      std::vector<Matrix> before;
      if (prox > 0.0)
        for (const Matrix* p : params) before.push_back(*p);
      optimizer_step(params, grads, opt_state_, opt);
      if (prox > 0.0)
        for (std::size_t i = 0; i < params.size(); ++i) *params[i] = (*params[i] + prox * before[i]) / (1.0 + prox);
    }
  }

  const ImageEncoding enc = encode_image(model_, image, prompts);
  result.probs = classify(enc.feature, encode_texts(model_, prompts), model_.config.logit_scale);
  result.prediction = 0;
  for (ad::Index c = 1; c < result.probs.cols(); ++c)
    if (result.probs(c) > result.probs(result.prediction)) result.prediction = static_cast<int>(c);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

EpisodeResult adapt_and_predict(const Image& image, const DualEncoder& model, PromptState& prompts,
                                const SourceStats* source_stats, const TTAConfig& config) {
  Adapter adapter(model, source_stats, config);
  return adapter.adapt(image, prompts, config.seed);
}

std::vector<EpisodeResult> continuous_adapt(std::span<const Image> stream, const DualEncoder& model,
                                            PromptState& prompts, const SourceStats* source_stats,
                                            const TTAConfig& config) {
  if (config.mode != AdaptMode::Continuous) throw ContractError("continuous_adapt requires mode=continuous");
  Adapter adapter(model, source_stats, config);
  std::vector<EpisodeResult> out;
  out.reserve(stream.size());
  for (std::size_t i = 0; i < stream.size(); ++i) out.push_back(adapter.adapt(stream[i], prompts, derive_seed(config.seed, i)));
  return out;
}

double prompt_distance(const PromptState& a, const PromptState& b) {
  if (a.text.size() != b.text.size() || a.coupling.size() != b.coupling.size())
    throw DimensionError("prompt_distance: prompt depths differ");
  double d = 0.0;
  for (std::size_t i = 0; i < a.text.size(); ++i) d = std::max(d, (a.text[i] - b.text[i]).cwiseAbs().maxCoeff());
  for (std::size_t i = 0; i < a.coupling.size(); ++i)
    d = std::max(d, (a.coupling[i] - b.coupling[i]).cwiseAbs().maxCoeff());
  return d;
}

}  // namespace tokalign
