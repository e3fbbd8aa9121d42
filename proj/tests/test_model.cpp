#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "tokalign/checkpoint.hpp"
#include "tokalign/errors.hpp"
#include "tokalign/episode_check.hpp"
#include "tokalign/grad_check.hpp"
#include "tokalign/model.hpp"
#include "tokalign/pretrain.hpp"
#include "tokalign/synthetic.hpp"

using namespace tokalign;

namespace {

ModelConfig small_config() {
  ModelConfig c = toy_model_config();
  c.patch_size = 8;
  return c;
}

Image random_image(const ModelConfig& c, std::uint64_t seed) {
  SyntheticConfig s;
  s.image_size = c.image_size;
  s.n_classes = c.n_classes;
  return render_grating(s, static_cast<int>(seed % 4), seed);
}

}  // namespace

TEST(ModelConfig, ValidationErrors) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.patch_size = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.prompt_depth = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.vision_heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.n_classes = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, TokenCounts) {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  EXPECT_EQ(c.n_patches(), 4);
  EXPECT_EQ(c.vision_seq_len(), 1 + c.n_prompt_tokens + 4);
}

TEST(Vocabulary, TemplateTokens) {
  const DualEncoder m = DualEncoder::initialize(small_config(), 1);
  const std::vector<int> ids = m.template_tokens(2);
  EXPECT_EQ(static_cast<int>(ids.size()), m.config.text_seq_len());
  EXPECT_EQ(ids.front(), m.vocab.sos());
  EXPECT_EQ(ids.back(), m.vocab.eos());
  EXPECT_EQ(m.vocab.word(ids[ids.size() - 2]), m.vocab.class_names()[2]);
  EXPECT_THROW(m.template_tokens(99), LookupError);
  EXPECT_THROW(m.vocab.tokenize("a photo of a unicorn"), LookupError);
}

TEST(PatchEmbed, ZeroImageGivesBiasPlusPositions) {
  const DualEncoder m = DualEncoder::initialize(small_config(), 2);
  const Image zero(1, 16, 16);
  const Matrix tokens = patch_embed(m, zero);
  ASSERT_EQ(tokens.rows(), 4);
  for (ad::Index r = 0; r < 4; ++r)
    EXPECT_EQ(tokens.row(r), m.vision.patch_b.row(0) + m.vision.positional.row(r + 1));
}

TEST(PatchEmbed, DeterministicAcrossCalls) {
  const DualEncoder a = DualEncoder::initialize(small_config(), 3);
  const DualEncoder b = DualEncoder::initialize(small_config(), 3);
  const Image im = random_image(a.config, 5);
  EXPECT_EQ(patch_embed(a, im), patch_embed(b, im));
}

TEST(ImageEncoder, LayerTokensAndPromptSensitivity) {
  ModelConfig c = small_config();
  c.vision_layers = 4;
  c.prompt_depth = 2;
  const DualEncoder m = DualEncoder::initialize(c, 4);
  const Image im = random_image(c, 6);
  const PromptState p = PromptState::from_model(m);
  const ImageEncoding e = encode_image(m, im, p);
  ASSERT_EQ(static_cast<int>(e.layer_tokens.size()), c.vision_layers);
  for (const Matrix& t : e.layer_tokens) EXPECT_EQ(t.rows(), c.vision_seq_len());
  EXPECT_NEAR(e.feature.norm(), 1.0, 1e-12);

  const PromptState q = PromptState::random(c, 99, 0.5);
  EXPECT_GT((encode_image(m, im, q).feature - e.feature).norm(), 1e-6);
  EXPECT_EQ(encode_image(m, im, p).feature, e.feature);
}

TEST(TextEncoder, StaticAndDistinct) {
  const DualEncoder m = DualEncoder::initialize(small_config(), 7);
  const PromptState p = PromptState::from_model(m);
  const Matrix t = encode_texts(m, p);
  EXPECT_EQ(t, encode_texts(m, p));
  for (ad::Index i = 0; i < t.rows(); ++i) {
    EXPECT_NEAR(t.row(i).norm(), 1.0, 1e-12);
    EXPECT_LT((encode_text(m, static_cast<int>(i), p) - t.row(i)).cwiseAbs().maxCoeff(), 1e-12);
    for (ad::Index j = 0; j < i; ++j) EXPECT_GT((t.row(i) - t.row(j)).norm(), 1e-8);
  }
  PromptState q = p;
  q.text[0](0, 0) += 0.5;
  EXPECT_GT((encode_texts(m, q) - t).norm(), 1e-8);
}

TEST(Classify, Examples) {
  Matrix text = Matrix::Identity(3, 3);
  RowVector f(3);
  f << 0, 1, 0;
  EXPECT_GT(classify(f, text, 1000.0)(1), 0.99);
  Matrix ortho = Matrix::Zero(2, 4);
  ortho(0, 0) = 1;
  ortho(1, 1) = 1;
  RowVector g = RowVector::Zero(4);
  g(2) = 1;
  const RowVector u = classify(g, ortho, 100.0);
  EXPECT_NEAR(u(0), 0.5, 1e-15);
  EXPECT_NEAR(u(1), 0.5, 1e-15);
  const RowVector z = classify(f, text, 0.0);
  for (ad::Index i = 0; i < 3; ++i) EXPECT_NEAR(z(i), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(classify(f, text, 37.0).sum(), 1.0, 1e-12);
}

TEST(Couple, Examples) {
  Matrix p(2, 3);
  p << 1, 2, 3, 4, 5, 6;
  EXPECT_TRUE(couple(p, Matrix::Zero(3, 5)).isZero());
  EXPECT_EQ(couple(p, Matrix::Identity(3, 3)), p);
  EXPECT_THROW(couple(p, Matrix::Zero(4, 4)), ConfigError);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Matrix a(2, 3), w(3, 4), proj(2, 4);
  for (double& v : a.reshaped()) v = n(rng);
  for (double& v : w.reshaped()) v = n(rng);
  for (double& v : proj.reshaped()) v = n(rng);
  const ad::ScalarFunction f = [&](ad::Tape& t, std::span<const ad::Var> v) {
    return ad::sum(ad::mul(couple(v[0], v[1]), t.constant(proj)));
  };
  const std::vector<Matrix> params{a, w};
  EXPECT_LT(ad::grad_check(f, params).max_relative_error, 1e-4);
}

TEST(PromptState, ResetRestoresSnapshot) {
  const DualEncoder m = DualEncoder::initialize(small_config(), 8);
  PromptState p = PromptState::from_model(m);
  const PromptState original = p;
  p.text[0].array() += 1.0;
  p.coupling[1].array() *= 2.0;
  EXPECT_FALSE(p == original);
  p.reset();
  EXPECT_TRUE(p == original);
  EXPECT_EQ(p.vision()[0], couple(p.text[0], p.coupling[0]));
}

TEST(PromptGradient, NonzeroForGenericInput) {
  const GradEpisode ep = make_grad_episode(11);
  const std::vector<Matrix> params = episode_params(ep);
  const auto grads = ad::analytic_gradients(
      [&](ad::Tape& t, std::span<const ad::Var> p) { return episode_objective(ep)(t, p).front(); }, params);
  for (std::size_t i = 0; i < grads.size(); ++i) EXPECT_GT(grads[i].cwiseAbs().maxCoeff(), 0.0) << i;
}

TEST(Checkpoint, RoundTripAndHash) {
  const DualEncoder m = DualEncoder::initialize(small_config(), 9);
  const auto bytes = serialize_model(m);
  const DualEncoder back = deserialize_model(bytes);
  EXPECT_EQ(serialize_model(back), bytes);
  EXPECT_EQ(model_hash(back), model_hash(m));

  const std::string path = (std::filesystem::temp_directory_path() / "tokalign_model_test.bin").string();
  save_model(m, path);
  EXPECT_EQ(model_hash(load_model(path)), model_hash(m));
  std::filesystem::remove(path);

  DualEncoder other = m;
  other.vision.proj(0, 0) += 1e-9;
  EXPECT_NE(model_hash(other), model_hash(m));
}

TEST(Checkpoint, CorruptionIsRejected) {
  const DualEncoder m = DualEncoder::initialize(small_config(), 10);
  auto bytes = serialize_model(m);
  auto bad_magic = bytes;
  bad_magic[0] ^= 0xff;
  EXPECT_THROW(deserialize_model(bad_magic), FormatError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize_model(truncated), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_model(trailing), FormatError);
  EXPECT_THROW(load_model("/nonexistent/model.bin"), DataError);
}

TEST(Pretrain, DeterministicAndLearns) {
  ModelConfig c = small_config();
  SyntheticConfig s;
  s.n_classes = c.n_classes;
  s.image_size = c.image_size;
  s.base_frequency = 1.5;
  s.frequency_ratio = 4.0;
  s.n_train = 400;
  s.n_val = 80;
  s.n_test = 0;
  const SyntheticBundles data = gen_synthetic(s, 3);
  PretrainConfig pc;
  pc.epochs = 15;
  pc.seed = 3;
  pc.learning_rate = 3e-3;
  const DualEncoder a = pretrain_backbone(c, data.source_train.images, data.source_train.labels, pc);
  const DualEncoder b = pretrain_backbone(c, data.source_train.images, data.source_train.labels, pc);
  EXPECT_EQ(model_hash(a), model_hash(b));

  const DualEncoder untrained = DualEncoder::initialize(c, 3);
  const double chance = top1_accuracy(
      predict_probs(untrained, PromptState::from_model(untrained), data.source_val.images), data.source_val.labels);
  EXPECT_NEAR(chance, 1.0 / c.n_classes, 0.2);
  const double acc =
      top1_accuracy(predict_probs(a, PromptState::from_model(a), data.source_val.images), data.source_val.labels);
  EXPECT_GT(acc, 0.9);
}
