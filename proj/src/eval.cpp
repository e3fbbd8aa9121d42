#include "tokalign/eval.hpp"

#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "tokalign/checkpoint.hpp"
#include "tokalign/errors.hpp"
#include "tokalign/random.hpp"

namespace tokalign {

using nlohmann::ordered_json;

std::size_t EvalReport::correct() const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.prediction == r.label;
  return n;
}

double EvalReport::mean_latency() const {
  if (records.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : records) s += r.wall_seconds;
  return s / static_cast<double>(records.size());
}

std::string method_name(const TTAConfig& config, bool has_stats) {
  if (config.n_steps == 0) return "zero-shot";
  if (!has_stats || config.beta == 0.0) return "entropy";
  return "aligned";
}

std::vector<std::size_t> bag_companions(const DatasetBundle& dataset, std::size_t index, int bag_size) {
  std::vector<std::size_t> out;
  const std::size_t n = dataset.size();
  for (std::size_t k = 1; k < n && static_cast<int>(out.size()) + 1 < bag_size; ++k) {
    const std::size_t j = (index + k) % n;
    if (dataset.labels[j] == dataset.labels[index]) out.push_back(j);
  }
  return out;
}

void summarize(EvalReport& report) {
  const std::size_t n = report.records.size();
  report.accuracy = n == 0 ? 0.0 : static_cast<double>(report.correct()) / static_cast<double>(n);
  double e = 0.0, a = 0.0, t = 0.0;
  for (const auto& r : report.records)
    if (!r.steps.empty()) {
      e += r.steps.front().entropy;
      a += r.steps.front().align;
      t += r.steps.front().total;
    }
  report.mean_entropy = n == 0 ? 0.0 : e / static_cast<double>(n);
  report.mean_align = n == 0 ? 0.0 : a / static_cast<double>(n);
  report.mean_total = n == 0 ? 0.0 : t / static_cast<double>(n);
}

EvalReport run_eval(const DualEncoder& model, const DatasetBundle& dataset, const SourceStats* stats,
                    const TTAConfig& config, const EvalOptions& options,
                    std::map<std::string, std::string> config_echo) {
  const auto start = std::chrono::steady_clock::now();
  if (dataset.images.empty()) throw DataError("eval: empty dataset");
  if (dataset.n_classes != model.config.n_classes)
    throw CompatibilityError("eval: dataset has " + std::to_string(dataset.n_classes) + " classes, model has " +
                             std::to_string(model.config.n_classes));
  const std::size_t n = options.limit > 0 ? std::min(options.limit, dataset.size()) : dataset.size();

  EvalReport report;
  report.method = method_name(config, stats != nullptr);
  report.seed = config.seed;
  report.config = std::move(config_echo);
  report.model_hash = io::to_hex(model_hash(model));
  report.stats_id = stats ? stats->dataset_id : "";
  report.records.resize(n);

  // Validates the configuration and the statistics hash once, up front.
  Adapter probe(model, stats, config);
  const PromptState initial = PromptState::from_model(model);

  auto run_one = [&](Adapter& adapter, PromptState& prompts, std::size_t i) {
    std::vector<Image> bag;
    if (config.bag_size > 1)
      for (std::size_t j : bag_companions(dataset, i, config.bag_size)) bag.push_back(dataset.images[j]);
    const EpisodeResult r = adapter.adapt(dataset.images[i], prompts, derive_seed(config.seed, i), bag);
    SampleRecord& rec = report.records[i];
    rec.index = i;
    rec.label = dataset.labels[i];
    rec.prediction = r.prediction;
    rec.probs = r.probs;
    rec.steps = r.steps;
    rec.kept = r.kept;
    rec.wall_seconds = r.wall_seconds;
  };

  if (config.mode == AdaptMode::Continuous || options.threads <= 1 || n == 1) {
    PromptState prompts = initial;
    for (std::size_t i = 0; i < n; ++i) run_one(probe, prompts, i);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
      try {
        Adapter adapter(model, stats, config);
        PromptState prompts = initial;
        for (std::size_t i = next++; i < n; i = next++) run_one(adapter, prompts, i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    };
    std::vector<std::thread> pool;
    const int workers = std::min<int>(options.threads, static_cast<int>(n));
    for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  summarize(report);
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string record_to_json(const SampleRecord& r) {
  ordered_json j;
  j["index"] = r.index;
  j["label"] = r.label;
  j["prediction"] = r.prediction;
  j["correct"] = r.prediction == r.label;
  j["probs"] = std::vector<double>(r.probs.data(), r.probs.data() + r.probs.size());
  ordered_json steps = ordered_json::array();
  for (const auto& s : r.steps) steps.push_back({{"entropy", s.entropy}, {"align", s.align}, {"total", s.total}});
  j["steps"] = steps;
  j["kept"] = r.kept;
  return j.dump();
}

std::string summary_to_json(const EvalReport& r) {
  ordered_json j;
  j["schema"] = kReportSchema;
  j["method"] = r.method;
  j["n_samples"] = r.records.size();
  j["correct"] = r.correct();
  j["accuracy"] = r.accuracy;
  j["mean_entropy"] = r.mean_entropy;
  j["mean_align"] = r.mean_align;
  j["mean_total"] = r.mean_total;
  j["seed"] = r.seed;
  j["model_hash"] = r.model_hash;
  j["stats_id"] = r.stats_id;
  j["config"] = r.config;
  return j.dump(2) + "\n";
}

std::string timing_to_json(const EvalReport& r) {
  ordered_json j;
  j["runtime_seconds"] = r.runtime_seconds;
  j["mean_latency_seconds"] = r.mean_latency();
  std::vector<double> per;
  for (const auto& rec : r.records) per.push_back(rec.wall_seconds);
  j["sample_seconds"] = per;
  return j.dump(2) + "\n";
}

void write_report(const EvalReport& report, const std::string& dir, const std::string& prefix) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& text) {
    io::write_file((fs::path(dir) / (prefix + name)).string(),
                   std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  };
  std::string lines;
  for (const auto& rec : report.records) lines += record_to_json(rec) + "\n";
  put("records.jsonl", lines);
  put("summary.json", summary_to_json(report));
  put("timing.json", timing_to_json(report));
}

}  // namespace tokalign
