#include "tokalign/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "tokalign/ablation.hpp"
#include "tokalign/checkpoint.hpp"
#include "tokalign/config_file.hpp"
#include "tokalign/episode_check.hpp"
#include "tokalign/errors.hpp"
#include "tokalign/eval.hpp"
#include "tokalign/random.hpp"

namespace tokalign {

namespace {

namespace fs = std::filesystem;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> sets;
  std::optional<int> threads;
};

struct Inputs {
  std::string model;
  std::string data;
  std::string val;
  std::string stats;
  std::string method;
  std::size_t index = 0;
  std::size_t limit = 0;
  std::vector<std::string> sweep;
  int episodes = 3;
};

RunConfig resolve_config(const Globals& g) {
  RunConfig rc;
  if (!g.config_path.empty()) rc = load_config_file(g.config_path);
  for (const std::string& item : g.sets) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
    rc.set(item.substr(0, eq), item.substr(eq + 1));
  }
  if (g.seed) rc.seed = *g.seed;
  if (g.threads) rc.threads = *g.threads;
  if (rc.threads < 1) throw ConfigError("threads must be at least 1");
  rc.propagate();
  return rc;
}

std::string require_out(const Globals& g, const std::string& command) {
  if (g.out_dir.empty()) throw ConfigError(command + " needs --out <dir>");
  fs::create_directories(g.out_dir);
  return g.out_dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("failed writing " + path.string());
}

void check_dataset(const DatasetBundle& d, const ModelConfig& m) {
  if (d.channels != m.image_channels || d.height != m.image_size || d.width != m.image_size)
    throw CompatibilityError("dataset images are " + std::to_string(d.channels) + "x" + std::to_string(d.height) +
                             "x" + std::to_string(d.width) + ", model expects " +
                             std::to_string(m.image_channels) + "x" + std::to_string(m.image_size) + "x" +
                             std::to_string(m.image_size));
  if (d.n_classes != m.n_classes)
    throw CompatibilityError("dataset has " + std::to_string(d.n_classes) + " classes, model has " +
                             std::to_string(m.n_classes));
}

std::string dataset_id(const DatasetBundle& d) {
  const auto it = d.extra.find("seed");
  return d.split + (it == d.extra.end() ? "" : "/seed=" + it->second);
}

// Applies --method to the adaptation config and returns whether source
// statistics are needed.
bool apply_method(const std::string& method, TTAConfig& tta) {
  if (method.empty()) return tta.n_steps > 0 && tta.beta > 0.0;
  if (method == "zero-shot") {
    tta.n_steps = 0;
    return false;
  }
  if (method == "entropy") {
    tta.beta = 0.0;
    return false;
  }
  if (method == "aligned") {
    if (!(tta.beta > 0.0)) throw ConfigError("--method aligned needs beta > 0");
    return true;
  }
  throw ConfigError("unknown method '" + method + "' (zero-shot, entropy, aligned)");
}

struct Loaded {
  DualEncoder model;
  DatasetBundle data;
  std::optional<SourceStats> stats;
};

Loaded load_inputs(const Inputs& in, RunConfig& rc, bool need_stats, const std::string& command) {
  if (need_stats && in.stats.empty())
    throw DataError(command + ": beta > 0 needs source statistics; pass --stats <file> or use --method entropy");
  Loaded l{load_model(in.model), load_dataset(in.data), std::nullopt};
  check_dataset(l.data, l.model.config);
  rc.model = l.model.config;
  if (need_stats) l.stats = load_stats(in.stats, model_hash(l.model));
  return l;
}

void print_report(std::ostream& out, const EvalReport& r) {
  out << "method " << r.method << "  samples " << r.records.size() << "  correct " << r.correct()
      << "  accuracy " << std::fixed << std::setprecision(4) << r.accuracy << "  mean_entropy " << r.mean_entropy
      << "  mean_align " << r.mean_align << "  latency_s " << r.mean_latency() << std::defaultfloat << "\n";
}

int cmd_gen_data(const Globals& g, std::ostream& out) {
  const RunConfig rc = resolve_config(g);
  const fs::path dir = require_out(g, "gen-data");
  const SyntheticBundles b = gen_synthetic(rc.data, rc.seed);
  for (const DatasetBundle* d : {&b.source_train, &b.source_val, &b.test_shifted}) {
    save_dataset(*d, (dir / d->split).string());
    out << d->split << ": " << d->size() << " samples -> " << (dir / d->split).string() << "\n";
  }
  out << "shift " << to_string(rc.data.shift.kind) << " magnitude " << format_double(rc.data.shift.magnitude) << "\n";
  return 0;
}

int cmd_pretrain(const Globals& g, const Inputs& in, std::ostream& out) {
  const RunConfig rc = resolve_config(g);
  const fs::path dir = require_out(g, "pretrain");
  const DatasetBundle train = load_dataset(in.data);
  check_dataset(train, rc.model);
  const DualEncoder model = pretrain_backbone(rc.model, train.images, train.labels, rc.pretrain,
                                              [&](int epoch, double loss) {
                                                out << "epoch " << epoch + 1 << " loss " << loss << "\n";
                                                out.flush();
                                              });
  if (!in.val.empty()) {
    const DatasetBundle val = load_dataset(in.val);
    check_dataset(val, rc.model);
    const double acc = top1_accuracy(predict_probs(model, PromptState::from_model(model), val.images), val.labels);
    out << "source-val accuracy " << acc << "\n";
  }
  save_model(model, (dir / "model.bin").string());
  write_text(dir / "config.txt", rc.to_text());
  out << "model " << io::to_hex(model_hash(model)) << " -> " << (dir / "model.bin").string() << "\n";
  return 0;
}

int cmd_compute_stats(const Globals& g, const Inputs& in, std::ostream& out) {
  const RunConfig rc = resolve_config(g);
  const fs::path dir = require_out(g, "compute-stats");
  const DualEncoder model = load_model(in.model);
  const DatasetBundle data = load_dataset(in.data);
  check_dataset(data, model.config);
  const SourceStats stats = compute_source_stats(model, data.images, rc.stats_batch_size, rc.stats_max_order,
                                                 rc.tta.token_mask, dataset_id(data));
  save_stats(stats, (dir / "stats.bin").string());
  write_text(dir / "stats.json", stats_to_json(stats));
  out << "stats over " << stats.sample_count << " images, " << stats.n_layers() << " layers, orders 1-"
      << stats.max_order << " -> " << (dir / "stats.bin").string() << "\n";
  return 0;
}

int cmd_adapt(const Globals& g, const Inputs& in, std::ostream& out) {
  RunConfig rc = resolve_config(g);
  const bool need_stats = apply_method(in.method, rc.tta);
  Loaded l = load_inputs(in, rc, need_stats, "adapt");
  if (in.index >= l.data.size())
    throw DataError("sample index " + std::to_string(in.index) + " out of range (" +
                    std::to_string(l.data.size()) + " samples)");
  Adapter adapter(l.model, l.stats ? &*l.stats : nullptr, rc.tta);
  PromptState prompts = PromptState::from_model(l.model);
  std::vector<Image> bag;
  for (std::size_t j : bag_companions(l.data, in.index, rc.tta.bag_size)) bag.push_back(l.data.images[j]);
  const EpisodeResult r = adapter.adapt(l.data.images[in.index], prompts, derive_seed(rc.seed, in.index), bag);

  out << "sample " << in.index << " label " << l.data.labels[in.index] << " method "
      << method_name(rc.tta, adapter.has_stats()) << "\n";
  for (std::size_t s = 0; s < r.steps.size(); ++s)
    out << "step " << s + 1 << " entropy " << r.steps[s].entropy << " align " << r.steps[s].align << " total "
        << r.steps[s].total << "\n";
  out << "kept views";
  for (int k : r.kept) out << " " << k;
  out << "\nprobs";
  for (ad::Index c = 0; c < r.probs.cols(); ++c) out << " " << r.probs(c);
  out << "\nprediction " << r.prediction << (r.prediction == l.data.labels[in.index] ? " (correct)" : " (wrong)")
      << "\n";
  if (!g.out_dir.empty()) {
    fs::create_directories(g.out_dir);
    SampleRecord rec{in.index, l.data.labels[in.index], r.prediction, r.probs, r.steps, r.kept, r.wall_seconds};
    write_text(fs::path(g.out_dir) / "adapt.json", record_to_json(rec) + "\n");
  }
  return 0;
}

int cmd_eval(const Globals& g, const Inputs& in, std::ostream& out) {
  RunConfig rc = resolve_config(g);
  const bool need_stats = apply_method(in.method, rc.tta);
  Loaded l = load_inputs(in, rc, need_stats, "eval");
  const EvalReport report = run_eval(l.model, l.data, l.stats ? &*l.stats : nullptr, rc.tta,
                                     {rc.threads, in.limit}, rc.to_map());
  print_report(out, report);
  if (!g.out_dir.empty()) {
    fs::create_directories(g.out_dir);
    write_report(report, g.out_dir);
  }
  return 0;
}

int cmd_ablate(const Globals& g, const Inputs& in, std::ostream& out) {
  RunConfig rc = resolve_config(g);
  const SweepSpec sweep = parse_sweep(in.sweep);
  bool need_stats = false;
  for (const std::string& v : sweep.values) {
    const TTAConfig cfg = apply_setting(rc.tta, sweep.axis, v);
    need_stats = need_stats || (cfg.n_steps > 0 && cfg.beta > 0.0);
  }
  Loaded l = load_inputs(in, rc, need_stats, "ablate");
  const std::vector<AblationRow> rows =
      run_ablation(l.model, l.data, l.stats ? &*l.stats : nullptr, rc.tta, sweep, {rc.threads, in.limit}, rc.to_map());
  out << ablation_table(sweep, rows);
  if (!g.out_dir.empty()) {
    const fs::path dir = g.out_dir;
    fs::create_directories(dir);
    for (const AblationRow& row : rows) {
      std::string name = sweep.axis + "=" + row.value;
      for (char& c : name)
        if (c == ',' || c == ';' || c == '/') c = '_';
      fs::create_directories(dir / name);
      write_report(row.report, (dir / name).string());
    }
    write_text(dir / "ablation.json", ablation_to_json(sweep, rows));
  }
  return 0;
}

int cmd_grad_check(const Globals& g, const Inputs& in, std::ostream& out) {
  const RunConfig rc = resolve_config(g);
  if (in.episodes < 1) throw ConfigError("--episodes must be at least 1");
  const EpisodeCheckReport report = run_episode_checks(in.episodes, rc.seed);
  for (const EpisodeCheckRow& row : report.rows) {
    out << "episode " << std::hex << row.seed << std::dec << " " << to_string(row.output.part);
    if (row.output.part != LossPart::Entropy) out << " " << to_string(row.output.variant);
    out << " max_rel_err " << row.result.max_block_error << " worst_coordinate " << row.result.max_relative_error
        << "\n";
  }
  const double worst = report.max_relative_error();
  out << "episodes " << report.episodes << " resampled " << report.resampled << "\n";
  out << "worst coordinate error " << report.max_coordinate_error() << "\n";
  out << "max relative error " << worst << "\n";
  return worst < 1e-4 ? 0 : 1;
}

}  // namespace

int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Test-time prompt adaptation with token-statistics alignment", "tokalign"};
  app.require_subcommand(1);
  Globals g;
  Inputs in;
  app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--config", g.config_path, "key=value run configuration file");
  app.add_option("--out", g.out_dir, "Output directory");
  app.add_option("--set", g.sets, "Override one config key (key=value); repeatable");
  app.add_option("--threads", g.threads, "Worker threads for eval");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic source and shifted test splits");
  auto* pre = app.add_subcommand("pretrain", "Train the backbone and its prompts on source data");
  pre->add_option("--data", in.data, "source-train dataset directory")->required();
  pre->add_option("--val", in.val, "source-val dataset directory");
  auto* cst = app.add_subcommand("compute-stats", "Source token statistics of a checkpoint");
  cst->add_option("--model", in.model, "Checkpoint")->required();
  cst->add_option("--data", in.data, "Dataset directory")->required();

  const auto add_eval_inputs = [&](CLI::App* sub) {
    sub->add_option("--model", in.model, "Checkpoint")->required();
    sub->add_option("--data", in.data, "Dataset directory")->required();
    sub->add_option("--stats", in.stats, "Source statistics file");
    sub->add_option("--method", in.method, "zero-shot, entropy or aligned");
  };
  auto* adp = app.add_subcommand("adapt", "Adapt on one sample and print the losses");
  add_eval_inputs(adp);
  adp->add_option("--index", in.index, "Sample index")->required();
  auto* ev = app.add_subcommand("eval", "Adapt on every sample and write reports");
  add_eval_inputs(ev);
  ev->add_option("--limit", in.limit, "Only the first N samples");
  auto* abl = app.add_subcommand("ablate", "Sweep one configuration axis");
  add_eval_inputs(abl);
  abl->add_option("--limit", in.limit, "Only the first N samples");
  abl->add_option("--sweep", in.sweep, "axis=v1,v2,...")->required();
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the adaptation gradients");
  gc->add_option("--episodes", in.episodes, "Random episodes");
  for (CLI::App* sub : {gen, pre, cst, adp, ev, abl, gc}) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(g, out);
    if (*pre) return cmd_pretrain(g, in, out);
    if (*cst) return cmd_compute_stats(g, in, out);
    if (*adp) return cmd_adapt(g, in, out);
    if (*ev) return cmd_eval(g, in, out);
    if (*abl) return cmd_ablate(g, in, out);
    if (*gc) return cmd_grad_check(g, in, out);
  } catch (const DataError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const CompatibilityError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const LookupError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli(args, std::cout, std::cerr);
}

}  // namespace tokalign
