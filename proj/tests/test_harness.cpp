#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tokalign/ablation.hpp"
#include "tokalign/config_file.hpp"
#include "tokalign/episode_check.hpp"
#include "tokalign/errors.hpp"
#include "tokalign/eval.hpp"
#include "tokalign/pretrain.hpp"
#include "tokalign/synthetic.hpp"

using namespace tokalign;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tokalign_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

double mean_of(const Image& im) {
  return std::accumulate(im.data.begin(), im.data.end(), 0.0) / static_cast<double>(im.data.size());
}

double abs_dev(const Image& im) {
  const double m = mean_of(im);
  double s = 0.0;
  for (double x : im.data) s += std::abs(x - m);
  return s;
}

double pixel_mean(const std::vector<Image>& images) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const Image& im : images) {
    sum += std::accumulate(im.data.begin(), im.data.end(), 0.0);
    n += im.data.size();
  }
  return sum / static_cast<double>(n);
}

std::vector<double> image_means(const std::vector<Image>& images) {
  std::vector<double> out;
  for (const Image& im : images) out.push_back(mean_of(im));
  return out;
}

SyntheticConfig toy_data(int n_train, int n_val, int n_test) {
  const ModelConfig mc = toy_model_config();
  SyntheticConfig s;
  s.n_classes = mc.n_classes;
  s.image_size = mc.image_size;
  s.base_frequency = 1.5;
  s.frequency_ratio = 4.0;
  s.n_train = n_train;
  s.n_val = n_val;
  s.n_test = n_test;
  s.shift.magnitude = 0.0;
  return s;
}

// A toy encoder trained just enough to be far above chance.
struct Trained {
  DualEncoder model;
  SyntheticBundles data;
  SourceStats stats;
};

const Trained& trained() {
  static const Trained t = [] {
    ModelConfig c = toy_model_config();
    c.patch_size = 8;
    SyntheticConfig s = toy_data(400, 60, 60);
    s.shift = {ShiftKind::MeanOffset, 0.6, 0};
    SyntheticBundles data = gen_synthetic(s, 5);
    PretrainConfig pc;
    pc.epochs = 15;
    pc.seed = 5;
    pc.learning_rate = 3e-3;
    DualEncoder m = pretrain_backbone(c, data.source_train.images, data.source_train.labels, pc);
    SourceStats st = compute_source_stats(m, data.source_train.images, 16, 5);
    return Trained{std::move(m), std::move(data), std::move(st)};
  }();
  return t;
}

TTAConfig small_tta() {
  TTAConfig c;
  c.n_views = 8;
  c.filter_ratio = 0.25;
  c.learning_rate = 1e-2;
  c.align_layers = {1, 2, 3};
  c.seed = 9;
  return c;
}

}  // namespace

TEST(Synthetic, SeedDeterministic) {
  const SyntheticConfig s = toy_data(20, 10, 10);
  EXPECT_EQ(gen_synthetic(s, 4).source_train, gen_synthetic(s, 4).source_train);
  EXPECT_EQ(gen_synthetic(s, 4).test_shifted, gen_synthetic(s, 4).test_shifted);
  EXPECT_FALSE(gen_synthetic(s, 4).source_train == gen_synthetic(s, 5).source_train);
}

TEST(Synthetic, BalancedRoundRobinLabels) {
  const SyntheticBundles b = gen_synthetic(toy_data(20, 8, 8), 1);
  for (std::size_t i = 0; i < b.source_train.size(); ++i) EXPECT_EQ(b.source_train.labels[i], static_cast<int>(i % 4));
  EXPECT_EQ(b.source_train.split, "source-train");
  EXPECT_EQ(b.source_val.split, "source-val");
  EXPECT_EQ(b.test_shifted.split, "test-shifted");
}

TEST(Synthetic, NullShiftMatchesFreshSourceDraw) {
  const Image im = render_grating(toy_data(1, 1, 1), 2, 3);
  for (ShiftKind k : {ShiftKind::MeanOffset, ShiftKind::ContrastScale, ShiftKind::Blur, ShiftKind::Mixture})
    EXPECT_EQ(apply_shift(im, {k, 0.0, 1}).data, im.data) << to_string(k);

  const SyntheticBundles b = gen_synthetic(toy_data(0, 400, 400), 8);
  const std::vector<double> a = image_means(b.source_val.images);
  const std::vector<double> t = image_means(b.test_shifted.images);
  auto mean_var = [](const std::vector<double>& v) {
    double m = 0.0, s = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / static_cast<double>(v.size() - 1)};
  };
  const auto [ma, va] = mean_var(a);
  const auto [mt, vt] = mean_var(t);
  EXPECT_LT(std::abs(ma - mt), 3.0 * std::sqrt(va / a.size() + vt / t.size()));
}

TEST(Synthetic, MeanOffsetShiftsPixelMean) {
  SyntheticConfig s = toy_data(0, 400, 400);
  s.shift = {ShiftKind::MeanOffset, 0.5, 0};
  const SyntheticBundles b = gen_synthetic(s, 2);
  EXPECT_NEAR(pixel_mean(b.test_shifted.images) - pixel_mean(b.source_val.images), 0.5, 0.02);
}

TEST(Synthetic, ShiftKindsChangeImages) {
  const Image im = render_grating(toy_data(1, 1, 1), 1, 3);
  const Image contrast = apply_shift(im, {ShiftKind::ContrastScale, 1.0, 0});
  // Shifted images are rounded to f32.
  EXPECT_NEAR(mean_of(contrast), mean_of(im), 1e-6);
  EXPECT_NEAR(abs_dev(contrast), 0.5 * abs_dev(im), 1e-4);
  EXPECT_LT(abs_dev(apply_shift(im, {ShiftKind::Blur, 1.0, 0})), abs_dev(im));
  EXPECT_THROW(parse_shift_kind("rotate"), ConfigError);
  EXPECT_EQ(parse_shift_kind(to_string(ShiftKind::Mixture)), ShiftKind::Mixture);
}

TEST(Dataset, RoundTrip) {
  const fs::path dir = scratch_dir("roundtrip");
  SyntheticBundles b = gen_synthetic(toy_data(12, 4, 4), 3);
  b.source_train.extra["seed"] = "3";
  save_dataset(b.source_train, dir.string());
  EXPECT_TRUE(fs::exists(dir / "meta.txt"));
  EXPECT_EQ(fs::file_size(dir / "images.f32"), 12u * 16 * 16 * 4);
  EXPECT_EQ(fs::file_size(dir / "labels.u32"), 12u * 4);
  EXPECT_EQ(load_dataset(dir.string()), b.source_train);
}

TEST(Dataset, Rejections) {
  const fs::path dir = scratch_dir("reject");
  const SyntheticBundles b = gen_synthetic(toy_data(6, 2, 2), 3);
  save_dataset(b.source_train, dir.string());

  EXPECT_THROW(load_dataset((dir / "missing").string()), DataError);

  fs::resize_file(dir / "images.f32", 100);
  EXPECT_THROW(load_dataset(dir.string()), DataError);
  save_dataset(b.source_train, dir.string());

  {
    std::ofstream lab(dir / "labels.u32", std::ios::binary | std::ios::in | std::ios::out);
    const std::uint32_t big = 99;
    lab.write(reinterpret_cast<const char*>(&big), 4);
  }
  EXPECT_THROW(load_dataset(dir.string()), DataError);
  save_dataset(b.source_train, dir.string());

  std::string meta = slurp(dir / "meta.txt");
  meta.replace(meta.find("version=1"), 9, "version=9");
  std::ofstream(dir / "meta.txt") << meta;
  EXPECT_THROW(load_dataset(dir.string()), FormatError);

  DatasetBundle bad = b.source_train;
  bad.labels.pop_back();
  EXPECT_THROW(bad.validate(), DataError);
}

TEST(RunConfigFile, RoundTripAndErrors) {
  RunConfig c;
  c.set("beta", "12.5");
  c.set("align_layers", "1-2");
  c.set("align_loss", "kl");
  c.set("mode", "continuous");
  c.set("pretrain_augment", "false");
  c.seed = 42;
  RunConfig d;
  parse_config_text(c.to_text(), d);
  EXPECT_EQ(d.to_text(), c.to_text());
  EXPECT_EQ(d.tta.beta, 12.5);
  EXPECT_EQ(d.tta.align_layers, (std::vector<int>{1, 2}));
  EXPECT_EQ(d.tta.align_loss, AlignLoss::KL);
  EXPECT_EQ(d.get("seed"), "42");
  EXPECT_EQ(c.to_map().size(), RunConfig::keys().size());

  EXPECT_THROW(c.set("no_such_key", "1"), ConfigError);
  EXPECT_THROW(c.set("n_views", "many"), ConfigError);
  EXPECT_THROW(parse_config_text("beta=1\nbroken line\n", d), ConfigError);
  RunConfig e;
  parse_config_text("# comment\n\nbeta = 3\nbeta=4\n", e);
  EXPECT_EQ(e.tta.beta, 4.0);
}

TEST(RunConfigFile, PropagateSeeds) {
  RunConfig c;
  c.seed = 17;
  c.model.image_size = 24;
  c.propagate();
  EXPECT_EQ(c.tta.seed, 17u);
  EXPECT_EQ(c.pretrain.seed, 17u);
  EXPECT_EQ(c.data.image_size, 24);
}

TEST(LayerList, ParseAndFormat) {
  EXPECT_EQ(parse_layer_list("1-3"), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(parse_layer_list("2, 3"), (std::vector<int>{2, 3}));
  EXPECT_EQ(format_layer_list({1, 3}), "1,3");
  EXPECT_THROW(parse_layer_list("3-1"), ConfigError);
  EXPECT_THROW(parse_layer_list("a"), ConfigError);
  EXPECT_EQ(std::stod(format_double(0.1)), 0.1);
  EXPECT_EQ(std::stod(format_double(1.0 / 3.0)), 1.0 / 3.0);
}

TEST(Eval, DeterministicAcrossThreads) {
  const Trained& t = trained();
  const TTAConfig cfg = small_tta();
  const EvalReport one = run_eval(t.model, t.data.test_shifted, &t.stats, cfg, {1, 24});
  const EvalReport four = run_eval(t.model, t.data.test_shifted, &t.stats, cfg, {4, 24});
  ASSERT_EQ(one.records.size(), 24u);
  EXPECT_EQ(summary_to_json(one), summary_to_json(four));
  for (std::size_t i = 0; i < one.records.size(); ++i) {
    EXPECT_EQ(one.records[i].index, i);
    EXPECT_EQ(record_to_json(one.records[i]), record_to_json(four.records[i]));
  }
  EXPECT_GE(one.accuracy, 0.0);
  EXPECT_LE(one.accuracy, 1.0);
  EXPECT_EQ(one.method, "aligned");

  const fs::path a = scratch_dir("eval_a"), b = scratch_dir("eval_b");
  write_report(one, a.string());
  write_report(four, b.string());
  EXPECT_EQ(slurp(a / "records.jsonl"), slurp(b / "records.jsonl"));
  EXPECT_EQ(slurp(a / "summary.json"), slurp(b / "summary.json"));
  EXPECT_TRUE(fs::exists(a / "timing.json"));
}

TEST(Eval, SummaryRederivableFromRecords) {
  const Trained& t = trained();
  EvalReport r = run_eval(t.model, t.data.test_shifted, &t.stats, small_tta(), {2, 0});
  EXPECT_EQ(r.records.size(), t.data.test_shifted.size());
  const double acc = r.accuracy, ent = r.mean_entropy, al = r.mean_align;
  r.accuracy = r.mean_entropy = r.mean_align = -1.0;
  summarize(r);
  EXPECT_EQ(r.accuracy, acc);
  EXPECT_EQ(r.mean_entropy, ent);
  EXPECT_EQ(r.mean_align, al);
  EXPECT_EQ(r.accuracy, static_cast<double>(r.correct()) / static_cast<double>(r.records.size()));
}

TEST(Eval, EntropyOnlyCloseToZeroShotInDistribution) {
  const Trained& t = trained();
  TTAConfig cfg = small_tta();
  cfg.learning_rate = 5e-4;
  cfg.beta = 0.0;
  TTAConfig zs = cfg;
  zs.n_steps = 0;
  const EvalReport a = run_eval(t.model, t.data.source_val, nullptr, cfg, {4, 0});
  const EvalReport z = run_eval(t.model, t.data.source_val, nullptr, zs, {4, 0});
  EXPECT_EQ(a.method, "entropy");
  EXPECT_EQ(z.method, "zero-shot");
  EXPECT_GT(z.accuracy, 0.8);
  EXPECT_LE(std::abs(a.accuracy - z.accuracy), 0.02 + 1e-12);
}

TEST(Eval, BagCompanionsShareClass) {
  const DatasetBundle& d = trained().data.test_shifted;
  const auto c = bag_companions(d, 5, 3);
  ASSERT_EQ(c.size(), 2u);
  for (std::size_t j : c) {
    EXPECT_EQ(d.labels[j], d.labels[5]);
    EXPECT_NE(j, 5u);
  }
  EXPECT_TRUE(bag_companions(d, 5, 1).empty());
}

TEST(Ablation, ParseSweep) {
  const SweepSpec s = parse_sweep({"beta=0,1,10"});
  EXPECT_EQ(s.axis, "beta");
  EXPECT_EQ(s.values, (std::vector<std::string>{"0", "1", "10"}));
  EXPECT_EQ(parse_sweep({"align_layers=1-3;1,2"}).values, (std::vector<std::string>{"1-3", "1,2"}));
  EXPECT_EQ(parse_sweep({"n_views=4", "n_views=16"}).values, (std::vector<std::string>{"4", "16"}));
  EXPECT_THROW(parse_sweep({"beta=0", "n_views=4"}), ContractError);
  EXPECT_THROW(parse_sweep({"colour=red"}), ConfigError);

  const TTAConfig base;
  EXPECT_EQ(apply_setting(base, "align_layers", "1,2").align_layers, (std::vector<int>{1, 2}));
  const TTAConfig reg = apply_setting(base, "prompt_reg_lambda", "5");
  EXPECT_EQ(reg.mode, AdaptMode::Continuous);
  EXPECT_EQ(reg.prompt_reg_lambda, 5.0);
}

TEST(Ablation, BetaSweepReducesToEntropyOnly) {
  const Trained& t = trained();
  const TTAConfig base = small_tta();
  const SweepSpec sweep = parse_sweep({"beta=0,1,10,100,1000"});
  const auto rows = run_ablation(t.model, t.data.test_shifted, &t.stats, base, sweep, {4, 12});
  ASSERT_EQ(rows.size(), 5u);
  TTAConfig ent = base;
  ent.beta = 0.0;
  const EvalReport baseline = run_eval(t.model, t.data.test_shifted, nullptr, ent, {4, 12});
  ASSERT_EQ(rows[0].report.records.size(), baseline.records.size());
  for (std::size_t i = 0; i < baseline.records.size(); ++i) {
    EXPECT_EQ(rows[0].report.records[i].prediction, baseline.records[i].prediction);
    EXPECT_EQ(rows[0].report.records[i].probs, baseline.records[i].probs);
  }
  const std::string json = ablation_to_json(sweep, rows);
  EXPECT_NE(json.find(kAblationSchema), std::string::npos);
  EXPECT_NE(ablation_table(sweep, rows).find("1000"), std::string::npos);
}

TEST(Ablation, AlignEstimateVarianceFallsWithViews) {
  const GradEpisode ep = make_grad_episode(6);
  const Image img = render_grating(toy_data(1, 1, 1), 1, 44);
  auto variance = [&](int n_views) {
    TTAConfig cfg = ep.config;
    cfg.n_views = n_views;
    const Adapter adapter(ep.model, &ep.stats, cfg);
    std::vector<double> v;
    for (std::uint64_t s = 0; s < 40; ++s)
      v.push_back(adapter.evaluate(generate_views(img, n_views, s).views, ep.prompts).align);
    double m = 0.0, q = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    for (double x : v) q += (x - m) * (x - m);
    return q / static_cast<double>(v.size() - 1);
  };
  const double v4 = variance(4), v16 = variance(16), v64 = variance(64);
  EXPECT_GT(v4, v16);
  EXPECT_GT(v16, v64);
}
