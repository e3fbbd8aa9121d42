#include "tokalign/ablation.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "tokalign/config_file.hpp"
#include "tokalign/errors.hpp"

namespace tokalign {

const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes = {"beta",      "n_views",           "n_steps", "align_loss",
                                                "align_layers", "prompt_reg_lambda", "mode",    "bag_size"};
  return axes;
}

SweepSpec parse_sweep(const std::vector<std::string>& items) {
  if (items.empty()) throw ContractError("sweep: no axis given");
  SweepSpec spec;
  for (const std::string& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("sweep: expected axis=values, got '" + item + "'");
    const std::string axis = item.substr(0, eq);
    if (std::find(sweep_axes().begin(), sweep_axes().end(), axis) == sweep_axes().end())
      throw ConfigError("sweep: unsupported axis '" + axis + "'");
    if (!spec.axis.empty() && spec.axis != axis)
      throw ContractError("sweep: only one axis per ablation (got '" + spec.axis + "' and '" + axis + "')");
    spec.axis = axis;
    const char sep = axis == "align_layers" ? ';' : ',';
    std::stringstream in(item.substr(eq + 1));
    for (std::string v; std::getline(in, v, sep);)
      if (!v.empty()) spec.values.push_back(v);
  }
  if (spec.values.empty()) throw ConfigError("sweep: axis '" + spec.axis + "' has no values");
  return spec;
}

TTAConfig apply_setting(const TTAConfig& base, const std::string& axis, const std::string& value) {
  RunConfig rc;
  rc.tta = base;
  if (axis == "prompt_reg_lambda") {
    rc.set("prompt_reg_lambda", value);
    rc.tta.mode = AdaptMode::Continuous;
  } else if (std::find(sweep_axes().begin(), sweep_axes().end(), axis) != sweep_axes().end()) {
    rc.set(axis, value);
  } else {
    throw ConfigError("sweep: unsupported axis '" + axis + "'");
  }
  return rc.tta;
}

std::vector<AblationRow> run_ablation(const DualEncoder& model, const DatasetBundle& dataset,
                                      const SourceStats* stats, const TTAConfig& base, const SweepSpec& sweep,
                                      const EvalOptions& options,
                                      const std::map<std::string, std::string>& config_echo) {
  std::vector<AblationRow> rows;
  for (const std::string& value : sweep.values) {
    const TTAConfig cfg = apply_setting(base, sweep.axis, value);
    auto echo = config_echo;
    echo[sweep.axis] = value;
    rows.push_back({value, run_eval(model, dataset, stats, cfg, options, echo)});
  }
  return rows;
}

std::string ablation_to_json(const SweepSpec& sweep, const std::vector<AblationRow>& rows) {
  nlohmann::ordered_json j;
  j["schema"] = kAblationSchema;
  j["axis"] = sweep.axis;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  for (const auto& row : rows)
    table.push_back({{"value", row.value},
                     {"method", row.report.method},
                     {"n_samples", row.report.records.size()},
                     {"correct", row.report.correct()},
                     {"accuracy", row.report.accuracy},
                     {"mean_entropy", row.report.mean_entropy},
                     {"mean_align", row.report.mean_align},
                     {"mean_total", row.report.mean_total}});
  j["rows"] = table;
  return j.dump(2) + "\n";
}

std::string ablation_table(const SweepSpec& sweep, const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-10s %8s %12s %12s %10s\n", sweep.axis.c_str(), "method", "top1",
                "entropy", "align", "sec/sample");
  out << line;
  for (const auto& row : rows) {
    std::snprintf(line, sizeof line, "%-16s %-10s %8.4f %12.5g %12.5g %10.4f\n", row.value.c_str(),
                  row.report.method.c_str(), row.report.accuracy, row.report.mean_entropy, row.report.mean_align,
                  row.report.mean_latency());
    out << line;
  }
  return out.str();
}

}  // namespace tokalign
