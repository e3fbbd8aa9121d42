#pragma once

// One-axis sweeps over the adaptation configuration. Each setting is a full
// run_eval; settings run sequentially in the order given.

#include <string>
#include <vector>

#include "tokalign/eval.hpp"

namespace tokalign {

inline constexpr const char* kAblationSchema = "tokalign.ablation/1";

struct SweepSpec {
  std::string axis;
  std::vector<std::string> values;
};

/// Supported axes: beta, n_views, n_steps, align_loss, align_layers,
/// prompt_reg_lambda (switches to continuous mode), mode, bag_size.
const std::vector<std::string>& sweep_axes();

/// Parses "axis=v1,v2,..." items; align_layers values are separated by ';'
/// (each a layer list such as 1-3 or 1,2). More than one distinct axis is a
/// ContractError, an unknown axis a ConfigError.
SweepSpec parse_sweep(const std::vector<std::string>& items);

/// `base` with the axis set to `value`.
TTAConfig apply_setting(const TTAConfig& base, const std::string& axis, const std::string& value);

struct AblationRow {
  std::string value;
  EvalReport report;
};

std::vector<AblationRow> run_ablation(const DualEncoder& model, const DatasetBundle& dataset,
                                      const SourceStats* stats, const TTAConfig& base, const SweepSpec& sweep,
                                      const EvalOptions& options = {},
                                      const std::map<std::string, std::string>& config_echo = {});

/// Machine-readable table: one row per setting with accuracy and mean losses.
std::string ablation_to_json(const SweepSpec& sweep, const std::vector<AblationRow>& rows);
/// Human-readable table for standard output.
std::string ablation_table(const SweepSpec& sweep, const std::vector<AblationRow>& rows);

}  // namespace tokalign
