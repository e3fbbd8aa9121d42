#include "tokalign/episode_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tokalign/random.hpp"
#include "tokalign/synthetic.hpp"

namespace tokalign {

ModelConfig toy_model_config() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.vision_width = 16;
  c.vision_layers = 3;
  c.vision_heads = 2;
  c.text_width = 16;
  c.text_layers = 2;
  c.text_heads = 2;
  c.embed_dim = 16;
  c.mlp_ratio = 2;
  c.n_classes = 4;
  c.n_prompt_tokens = 2;
  c.prompt_depth = 2;
  // Random weights at the usual scale give near one-hot views.
  c.logit_scale = 10.0;
  return c;
}

std::string to_string(LossPart part) {
  switch (part) {
    case LossPart::Entropy: return "entropy";
    case LossPart::Align: return "align";
    case LossPart::Total: return "total";
  }
  return "?";
}

GradEpisode make_grad_episode(std::uint64_t seed) {
  const ModelConfig mc = toy_model_config();
  GradEpisode ep{DualEncoder::initialize(mc, derive_seed(seed, 1)), {}, {}, {}, {}};
  ep.prompts = PromptState::from_model(ep.model);

  SyntheticConfig data;
  data.n_classes = mc.n_classes;
  data.image_size = mc.image_size;
  data.base_frequency = 1.5;
  data.frequency_ratio = 4.0;
  std::vector<Image> source;
  for (int i = 0; i < 8; ++i) source.push_back(render_grating(data, i % mc.n_classes, derive_seed(seed, 100 + i)));
  ep.stats = compute_source_stats(ep.model, source, 4, 5);

  const Image image = render_grating(data, static_cast<int>(seed % 4), derive_seed(seed, 2));
  ep.config.n_views = 8;
  ep.config.filter_ratio = 0.25;
  ep.config.align_layers = {1, 2, 3};
  ep.config.align_loss = AlignLoss::CMD;
  ep.config.beta = 1.0;
  ep.views = generate_views(image, ep.config.n_views, derive_seed(seed, 3), ep.config.augment).views;
  return ep;
}

double episode_margin(const GradEpisode& ep) {
  const Matrix probs = [&] {
    ad::Tape tape;
    WeightBinder w(tape, false);
    const PromptVars pv = bind_prompts(tape, ep.prompts, false, false);
    return episode_loss(ep.model, w, pv, ep.views, ep.views.size(), nullptr, ep.config).probs.value();
  }();
  std::vector<double> h = row_entropies(probs);
  std::sort(h.begin(), h.end());
  const std::size_t keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(ep.config.filter_ratio * static_cast<double>(h.size()))));
  double margin = keep < h.size() ? h[keep] - h[keep - 1] : std::numeric_limits<double>::infinity();

  // The episode prompts are the model's own, so these are the views' tokens.
  const std::vector<LayerTokens> batches{pretrained_tokens(ep.model, ep.views)};
  const std::vector<ad::Index> pos = ep.config.token_mask.positions(ep.model.config);
  const LayerStats ls = view_stats(batches, pos);
  const auto moments = central_moments(batches, pos, ep.config.cmd_order);
  for (int layer : ep.config.align_layers) {
    const auto l = static_cast<std::size_t>(layer - 1);
    margin = std::min(margin, (ls.mu[l] - ep.stats.moment(layer - 1, 1)).cwiseAbs().minCoeff());
    for (int k = 2; k <= ep.config.cmd_order; ++k)
      margin = std::min(margin,
                        (moments[l][static_cast<std::size_t>(k - 2)] - ep.stats.moment(layer - 1, k)).cwiseAbs().minCoeff());
  }
  return margin;
}

std::vector<EpisodeOutput> episode_outputs() {
  std::vector<EpisodeOutput> out{{AlignLoss::L1, LossPart::Entropy}};
  for (AlignLoss v : {AlignLoss::L1, AlignLoss::L2, AlignLoss::KL, AlignLoss::CMD}) {
    out.push_back({v, LossPart::Align});
    out.push_back({v, LossPart::Total});
  }
  return out;
}

ad::MultiFunction episode_objective(const GradEpisode& ep) {
  return [&ep](ad::Tape& tape, std::span<const ad::Var> p) {
    const std::size_t depth = ep.prompts.text.size();
    WeightBinder w(tape, false);
    PromptVars pv;
    for (std::size_t i = 0; i < depth; ++i) {
      pv.text.push_back(p[i]);
      pv.coupling.push_back(p[depth + i]);
      pv.vision.push_back(couple(p[i], p[depth + i]));
    }
    const EpisodeLoss loss = episode_loss(ep.model, w, pv, ep.views, ep.views.size(), &ep.stats, ep.config);
    std::vector<ad::Var> out{loss.entropy};
    for (const EpisodeOutput& o : episode_outputs()) {
      if (o.part != LossPart::Align) continue;
      const ad::Var align = align_loss(loss.test_stats, ep.stats, ep.config.align_layers,
                                       {o.variant, ep.config.cmd_order, ep.config.kl_floor});
      out.push_back(align);
      out.push_back(combined_loss(loss.entropy, align, ep.config.beta));
    }
    return out;
  };
}

std::vector<Matrix> episode_params(const GradEpisode& ep) {
  std::vector<Matrix> out = ep.prompts.text;
  out.insert(out.end(), ep.prompts.coupling.begin(), ep.prompts.coupling.end());
  return out;
}

double EpisodeCheckReport::max_relative_error() const {
  double m = 0.0;
  for (const EpisodeCheckRow& r : rows) m = std::max(m, r.result.max_block_error);
  return m;
}

double EpisodeCheckReport::max_coordinate_error() const {
  double m = 0.0;
  for (const EpisodeCheckRow& r : rows) m = std::max(m, r.result.max_relative_error);
  return m;
}

EpisodeCheckReport run_episode_checks(int n_episodes, std::uint64_t seed, double margin, double step) {
  EpisodeCheckReport report;
  const std::vector<EpisodeOutput> outputs = episode_outputs();
  std::uint64_t draw = 0;
  while (report.episodes < n_episodes) {
    const std::uint64_t s = derive_seed(seed, draw++);
    const GradEpisode ep = make_grad_episode(s);
    if (!(episode_margin(ep) > margin)) {
      ++report.resampled;
      continue;
    }
    const std::vector<ad::GradCheckResult> results = ad::grad_check(episode_objective(ep), episode_params(ep), step);
    for (std::size_t k = 0; k < outputs.size(); ++k) report.rows.push_back({s, outputs[k], results[k]});
    ++report.episodes;
  }
  return report;
}

}  // namespace tokalign
