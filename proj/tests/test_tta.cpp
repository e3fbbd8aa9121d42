#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tokalign/checkpoint.hpp"
#include "tokalign/episode_check.hpp"
#include "tokalign/errors.hpp"
#include "tokalign/pretrain.hpp"
#include "tokalign/random.hpp"
#include "tokalign/synthetic.hpp"
#include "tokalign/tta.hpp"

using namespace tokalign;

namespace {

SyntheticConfig toy_data() {
  const ModelConfig mc = toy_model_config();
  SyntheticConfig d;
  d.n_classes = mc.n_classes;
  d.image_size = mc.image_size;
  d.base_frequency = 1.5;
  d.frequency_ratio = 4.0;
  return d;
}

Image toy_image(std::uint64_t seed, double offset = 0.0) {
  Image img = render_grating(toy_data(), static_cast<int>(seed % 4), derive_seed(seed, 77));
  return apply_shift(img, {ShiftKind::MeanOffset, offset, 0});
}

std::vector<int> sort_oracle(const Matrix& probs, double ratio) {
  const std::vector<double> h = row_entropies(probs);
  std::vector<int> idx(h.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return h[static_cast<std::size_t>(a)] < h[static_cast<std::size_t>(b)]; });
  const int k = std::max(1, static_cast<int>(std::floor(ratio * static_cast<double>(h.size()))));
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

SourceStats single_layer(double mu, double var) {
  SourceStats s;
  s.mu.push_back(RowVector::Constant(1, mu));
  s.var.push_back(RowVector::Constant(1, var));
  s.higher.emplace_back();
  return s;
}

double gaussian_kl(double m1, double v1, double m2, double v2) {
  return 0.5 * std::log(v2 / v1) + (v1 + (m1 - m2) * (m1 - m2)) / (2.0 * v2) - 0.5;
}

}  // namespace

TEST(ConfidenceFilter, ExhaustiveAgainstSortOracle) {
  // Three row types with two sharing an entropy, so ties are frequent.
  const Matrix rows{{0.7, 0.2, 0.1}, {0.1, 0.2, 0.7}, {1.0 / 3, 1.0 / 3, 1.0 / 3}};
  for (int n = 1; n <= 7; ++n) {
    int total = 1;
    for (int i = 0; i < n; ++i) total *= 3;
    for (int code = 0; code < total; ++code) {
      Matrix probs(n, 3);
      for (int i = 0, c = code; i < n; ++i, c /= 3) probs.row(i) = rows.row(c % 3);
      for (double ratio : {0.1, 0.25, 0.5, 0.9, 1.0})
        ASSERT_EQ(confidence_filter(probs, ratio), sort_oracle(probs, ratio)) << n << " " << code << " " << ratio;
    }
  }
}

TEST(ConfidenceFilter, Examples) {
  std::mt19937_64 rng(1);
  Matrix probs(64, 5);
  for (ad::Index r = 0; r < 64; ++r) {
    for (ad::Index c = 0; c < 5; ++c) probs(r, c) = uniform(rng, 0.1, 1.0);
    probs.row(r) /= probs.row(r).sum();
  }
  EXPECT_EQ(confidence_filter(probs, 0.10).size(), 6u);
  std::vector<int> all(64);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(confidence_filter(probs, 1.0), all);

  Matrix u = Matrix::Constant(5, 4, 0.25);
  u.row(3) << 0, 1, 0, 0;
  EXPECT_EQ(confidence_filter(u, 0.01), std::vector<int>{3});
}

TEST(EntropyLoss, Examples) {
  const std::vector<int> both{0, 1};
  Matrix onehot = Matrix::Zero(2, 3);
  onehot(0, 1) = onehot(1, 1) = 1.0;
  EXPECT_EQ(entropy_loss(onehot, both), 0.0);
  EXPECT_NEAR(entropy_loss(Matrix::Constant(1, 8, 0.125), std::vector<int>{0}), std::log(8.0), 1e-15);
  Matrix split{{1.0, 0.0}, {0.0, 1.0}};
  EXPECT_NEAR(entropy_loss(split, both), std::log(2.0), 1e-15);
  // Only kept rows count.
  EXPECT_EQ(entropy_loss(split, std::vector<int>{1}), 0.0);

  ad::Tape tape;
  EXPECT_NEAR(entropy_loss(tape.constant(split), both).scalar(), std::log(2.0), 1e-15);
}

TEST(AlignLoss, HandExamples) {
  const std::vector<int> one{1};
  const SourceStats src = single_layer(0.0, 1.0);
  const SourceStats test = single_layer(0.5, 1.25);
  EXPECT_NEAR(align_loss(test, src, one, {AlignLoss::L1}), 0.75, 1e-15);
  EXPECT_NEAR(align_loss(test, src, one, {AlignLoss::L2}), 0.25 + 0.0625, 1e-15);
  EXPECT_NEAR(align_loss(test, src, one, {AlignLoss::KL}), gaussian_kl(0.5, 1.25, 0.0, 1.0), 1e-14);
  for (AlignLoss v : {AlignLoss::L1, AlignLoss::L2, AlignLoss::KL})
    EXPECT_EQ(align_loss(src, src, one, {v}), 0.0) << to_string(v);
}

TEST(AlignLoss, LayersAveragedChannelsSummed) {
  SourceStats src, test;
  for (int l = 0; l < 3; ++l) {
    src.mu.push_back(RowVector::Zero(4));
    src.var.push_back(RowVector::Ones(4));
    src.higher.emplace_back();
    test.mu.push_back(RowVector::Constant(4, 0.1 * (l + 1)));
    test.var.push_back(RowVector::Ones(4));
    test.higher.emplace_back();
  }
  const std::vector<int> layers{1, 3};
  // (4 * 0.1 + 4 * 0.3) / 2
  EXPECT_NEAR(align_loss(test, src, layers, {AlignLoss::L1}), 0.8, 1e-14);
  EXPECT_NEAR(align_loss(test, src, layers, {AlignLoss::KL}), (4 * 0.005 + 4 * 0.045) / 2, 1e-14);
}

TEST(AlignLoss, KLFloorsVariance) {
  const std::vector<int> one{1};
  const SourceStats src = single_layer(0.0, 1.0);
  const SourceStats zero = single_layer(0.0, 0.0);
  const double v = align_loss(zero, src, one, {AlignLoss::KL, 5, 1e-12});
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, gaussian_kl(0.0, 1e-12, 0.0, 1.0), 1e-9);
}

TEST(CombinedLoss, Arithmetic) {
  ad::Tape tape;
  const ad::Var l = combined_loss(tape.constant(Matrix::Constant(1, 1, 1.0)), tape.constant(Matrix::Constant(1, 1, 0.01)), 100.0);
  EXPECT_NEAR(l.scalar(), 2.0, 1e-15);
}

TEST(CombinedLoss, GradientIsSumOfParts) {
  const GradEpisode ep = make_grad_episode(3);
  const std::vector<Matrix> params = episode_params(ep);
  ad::Gradients g_total, g_ent, g_align;
  std::vector<ad::Var> pvars;
  auto run = [&](auto pick) {
    ad::Tape tape;
    WeightBinder w(tape, false);
    const PromptVars pv = bind_prompts(tape, ep.prompts, true, true);
    const EpisodeLoss loss = episode_loss(ep.model, w, pv, ep.views, ep.views.size(), &ep.stats, ep.config);
    const ad::Gradients g = tape.backward(pick(loss));
    std::vector<Matrix> out;
    for (const ad::Var& v : pv.text) out.push_back(g.at(v.id()));
    for (const ad::Var& v : pv.coupling) out.push_back(g.at(v.id()));
    return out;
  };
  const auto total = run([](const EpisodeLoss& l) { return l.total; });
  const auto ent = run([](const EpisodeLoss& l) { return l.entropy; });
  const auto align = run([](const EpisodeLoss& l) { return *l.align; });
  ASSERT_EQ(total.size(), params.size());
  for (std::size_t i = 0; i < total.size(); ++i) {
    const Matrix sum = ent[i] + ep.config.beta * align[i];
    EXPECT_LT((total[i] - sum).cwiseAbs().maxCoeff(), 1e-12 * (1.0 + sum.cwiseAbs().maxCoeff()));
  }
}

TEST(Adapter, BetaZeroMatchesEntropyOnly) {
  const GradEpisode ep = make_grad_episode(11);
  TTAConfig cfg = ep.config;
  cfg.beta = 0.0;
  cfg.n_steps = 2;
  cfg.learning_rate = 1e-2;
  Adapter with(ep.model, &ep.stats, cfg);
  Adapter without(ep.model, nullptr, cfg);
  for (std::uint64_t s = 0; s < 5; ++s) {
    PromptState a = ep.prompts, b = ep.prompts;
    const EpisodeResult ra = with.adapt(toy_image(s, 0.4), a, s);
    const EpisodeResult rb = without.adapt(toy_image(s, 0.4), b, s);
    EXPECT_EQ(ra.prediction, rb.prediction);
    EXPECT_EQ(ra.probs, rb.probs);
    EXPECT_EQ(ra.kept, rb.kept);
    ASSERT_EQ(ra.steps.size(), rb.steps.size());
    for (std::size_t i = 0; i < ra.steps.size(); ++i) {
      EXPECT_EQ(ra.steps[i].entropy, rb.steps[i].entropy);
      EXPECT_EQ(ra.steps[i].total, rb.steps[i].total);
    }
    EXPECT_TRUE(a == b);
  }
}

TEST(Adapter, ZeroStepsIsZeroShot) {
  const GradEpisode ep = make_grad_episode(12);
  TTAConfig cfg = ep.config;
  cfg.n_steps = 0;
  Adapter adapter(ep.model, &ep.stats, cfg);
  for (std::uint64_t s = 0; s < 4; ++s) {
    PromptState p = ep.prompts;
    const Image img = toy_image(s);
    const EpisodeResult r = adapter.adapt(img, p, s);
    const std::vector<Image> one{img};
    const Matrix zs = predict_probs(ep.model, PromptState::from_model(ep.model), one, 1);
    EXPECT_LT((r.probs - zs.row(0)).cwiseAbs().maxCoeff(), 1e-12);
    ad::Index arg = 0;
    zs.row(0).maxCoeff(&arg);
    EXPECT_EQ(r.prediction, static_cast<int>(arg));
    EXPECT_TRUE(r.steps.empty());
    EXPECT_TRUE(p == PromptState::from_model(ep.model));
  }
}

TEST(Adapter, AlignmentZeroOnOwnViews) {
  const GradEpisode ep = make_grad_episode(13);
  const LayerTokens tokens = pretrained_tokens(ep.model, ep.views);
  const std::vector<LayerTokens> b{tokens};
  const auto positions = TokenMask{}.positions(ep.model.config);
  const SourceStats own =
      make_source_stats(ep.model, view_stats(b, positions), central_moments(b, positions, 5), 5);
  for (AlignLoss v : {AlignLoss::L1, AlignLoss::L2, AlignLoss::KL, AlignLoss::CMD}) {
    TTAConfig cfg = ep.config;
    cfg.align_loss = v;
    const Adapter adapter(ep.model, &own, cfg);
    const StepLog log = adapter.evaluate(ep.views, PromptState::from_model(ep.model));
    if (v == AlignLoss::KL)
      EXPECT_LT(std::abs(log.align), 1e-10);
    else
      EXPECT_EQ(log.align, 0.0) << to_string(v);
  }
}

TEST(Adapter, EpisodicInvariance) {
  const GradEpisode ep = make_grad_episode(14);
  TTAConfig cfg = ep.config;
  cfg.n_steps = 2;
  cfg.learning_rate = 1e-2;
  Adapter chained(ep.model, &ep.stats, cfg);
  Adapter alone(ep.model, &ep.stats, cfg);
  PromptState p1 = ep.prompts, p2 = ep.prompts;
  chained.adapt(toy_image(1, 0.5), p1, 101);
  const EpisodeResult b_after_a = chained.adapt(toy_image(2, 0.5), p1, 202);
  const EpisodeResult b_alone = alone.adapt(toy_image(2, 0.5), p2, 202);
  EXPECT_TRUE(b_after_a.same_outcome(b_alone));
  EXPECT_TRUE(p1 == p2);
}

TEST(Adapter, SmallSgdStepDescends) {
  int checked = 0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const GradEpisode ep = make_grad_episode(1000 + s);
    TTAConfig cfg = ep.config;
    cfg.optimizer = OptimizerKind::SGD;
    cfg.learning_rate = 1e-6;
    cfg.align_loss = AlignLoss::L1;
    Adapter adapter(ep.model, &ep.stats, cfg);
    PromptState p = ep.prompts;
    const Image img = toy_image(s, 0.3);
    const EpisodeResult r = adapter.adapt(img, p, s);
    const std::vector<Image> views = generate_views(img, cfg.n_views, s, cfg.augment).views;
    const StepLog after = adapter.evaluate(views, p);
    EXPECT_LE(after.total, r.steps[0].total) << s;
    ++checked;
  }
  EXPECT_EQ(checked, 50);
}

TEST(Adapter, StatsFromOtherModelRejected) {
  const GradEpisode a = make_grad_episode(21);
  const GradEpisode b = make_grad_episode(22);
  EXPECT_THROW(Adapter(a.model, &b.stats, a.config), CompatibilityError);
  SourceStats low = compute_source_stats(a.model, a.views, 4, 2);
  EXPECT_THROW(Adapter(a.model, &low, a.config), ContractError);
  TTAConfig l2 = a.config;
  l2.align_loss = AlignLoss::L2;
  EXPECT_NO_THROW(Adapter(a.model, &low, l2));
}

TEST(Adapter, InvalidConfigRejected) {
  const GradEpisode ep = make_grad_episode(23);
  auto bad = [&](auto edit) {
    TTAConfig c = ep.config;
    edit(c);
    EXPECT_THROW(Adapter(ep.model, &ep.stats, c), ConfigError);
  };
  bad([](TTAConfig& c) { c.n_views = 0; });
  bad([](TTAConfig& c) { c.filter_ratio = 0.0; });
  bad([](TTAConfig& c) { c.filter_ratio = 1.5; });
  bad([](TTAConfig& c) { c.align_layers = {4}; });
  bad([](TTAConfig& c) { c.align_layers = {0}; });
  bad([](TTAConfig& c) { c.n_steps = -1; });
  bad([](TTAConfig& c) { c.beta = -1.0; });
  EXPECT_THROW(parse_align_loss("l3"), ConfigError);
  EXPECT_EQ(parse_align_loss("cmd"), AlignLoss::CMD);
}

TEST(Continuous, HugeLambdaPinsPrompts) {
  const GradEpisode ep = make_grad_episode(31);
  TTAConfig cfg = ep.config;
  cfg.mode = AdaptMode::Continuous;
  cfg.prompt_reg_lambda = 1e9;
  cfg.learning_rate = 1e-2;
  Adapter adapter(ep.model, &ep.stats, cfg);
  PromptState p = ep.prompts;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const PromptState before = p;
    adapter.adapt(toy_image(s, 0.5), p, s);
    EXPECT_LT(prompt_distance(p, before), 1e-4);
  }
}

TEST(Continuous, FirstSampleMatchesEpisodic) {
  const GradEpisode ep = make_grad_episode(32);
  TTAConfig cfg = ep.config;
  cfg.learning_rate = 1e-2;
  TTAConfig cont = cfg;
  cont.mode = AdaptMode::Continuous;
  cont.prompt_reg_lambda = 0.0;
  const std::vector<Image> stream{toy_image(5, 0.5)};
  PromptState a = ep.prompts, b = ep.prompts;
  const auto rc = continuous_adapt(stream, ep.model, a, &ep.stats, cont);
  Adapter episodic(ep.model, &ep.stats, cfg);
  const EpisodeResult re = episodic.adapt(stream[0], b, derive_seed(cfg.seed, 0));
  EXPECT_TRUE(rc.at(0).same_outcome(re));
}

TEST(Continuous, PromptsDrift) {
  const GradEpisode ep = make_grad_episode(33);
  TTAConfig cfg = ep.config;
  cfg.mode = AdaptMode::Continuous;
  cfg.learning_rate = 5e-3;
  Adapter adapter(ep.model, &ep.stats, cfg);
  PromptState p = ep.prompts;
  const PromptState init = p;
  double last = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    adapter.adapt(toy_image(s, 0.8), p, derive_seed(cfg.seed, s));
    const double d = prompt_distance(p, init);
    if (s < 5) EXPECT_GT(d, last) << s;
    last = d;
  }
  EXPECT_THROW(continuous_adapt({}, ep.model, p, &ep.stats, ep.config), ContractError);
}

TEST(Adapter, BackboneUntouched) {
  const GradEpisode ep = make_grad_episode(41);
  const io::Digest before = model_hash(ep.model);
  TTAConfig cfg = ep.config;
  cfg.learning_rate = 1e-2;
  Adapter adapter(ep.model, &ep.stats, cfg);
  PromptState p = ep.prompts;
  for (std::uint64_t s = 0; s < 10; ++s) adapter.adapt(toy_image(s), p, s);
  EXPECT_EQ(model_hash(ep.model), before);
}
