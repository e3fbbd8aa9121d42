#pragma once

// Runs adaptation over a dataset and writes reports:
//
//   <prefix>records.jsonl   one JSON object per sample, in sample order
//   <prefix>summary.json    aggregates, config echo, schema version
//   <prefix>timing.json     wall-clock numbers, kept apart so the two files
//                           above are byte-identical across runs

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tokalign/dataset.hpp"
#include "tokalign/stats.hpp"
#include "tokalign/tta.hpp"

namespace tokalign {

inline constexpr const char* kReportSchema = "tokalign.eval/1";

struct SampleRecord {
  std::size_t index = 0;
  int label = 0;
  int prediction = 0;
  RowVector probs;
  std::vector<StepLog> steps;
  std::vector<int> kept;
  double wall_seconds = 0.0;
};

struct EvalReport {
  std::string method;
  std::vector<SampleRecord> records;
  double accuracy = 0.0;
  /// Means over samples of the losses logged at the first step (0 when
  /// nothing was adapted).
  double mean_entropy = 0.0;
  double mean_align = 0.0;
  double mean_total = 0.0;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;
  std::string model_hash;
  std::string stats_id;
  double runtime_seconds = 0.0;

  std::size_t correct() const;
  double mean_latency() const;
};

/// "zero-shot" when n_steps is 0, "entropy" without statistics or with
/// beta 0, otherwise "aligned".
std::string method_name(const TTAConfig& config, bool has_stats);

struct EvalOptions {
  int threads = 1;
  /// Evaluate only the first `limit` samples when > 0.
  std::size_t limit = 0;
};

/// Episodic mode spreads samples over `threads` workers; sample i always uses
/// seed derive_seed(config.seed, i), so results do not depend on the thread
/// count. Continuous mode runs sequentially in sample order.
EvalReport run_eval(const DualEncoder& model, const DatasetBundle& dataset, const SourceStats* stats,
                    const TTAConfig& config, const EvalOptions& options = {},
                    std::map<std::string, std::string> config_echo = {});

/// Indices of the bag companions of sample `index`: the next bag_size - 1
/// samples of the same class in cyclic dataset order.
std::vector<std::size_t> bag_companions(const DatasetBundle& dataset, std::size_t index, int bag_size);

std::string record_to_json(const SampleRecord& record);
std::string summary_to_json(const EvalReport& report);
std::string timing_to_json(const EvalReport& report);
/// Writes the three report files as <dir>/<prefix>records.jsonl etc.
void write_report(const EvalReport& report, const std::string& dir, const std::string& prefix = "");

/// Recomputes accuracy and mean losses from the records alone.
void summarize(EvalReport& report);

}  // namespace tokalign
