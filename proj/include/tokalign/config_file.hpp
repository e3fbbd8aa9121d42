#pragma once

// Flat key=value run configuration shared by every CLI subcommand. Blank lines
// and lines starting with '#' are ignored; later assignments win.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tokalign/model.hpp"
#include "tokalign/pretrain.hpp"
#include "tokalign/synthetic.hpp"
#include "tokalign/tta.hpp"

namespace tokalign {

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  PretrainConfig pretrain;
  SyntheticConfig data;
  TTAConfig tta;
  int threads = 1;
  int stats_batch_size = 64;
  /// Highest central moment stored in source statistics files.
  int stats_max_order = 5;

  /// Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  /// Every key in a fixed order.
  static const std::vector<std::string>& keys();
  /// All keys as key=value lines; reparsing the text reproduces the config.
  std::string to_text() const;
  std::map<std::string, std::string> to_map() const;
  /// Pushes the global seed into the pretrain, data and tta seeds and the
  /// model image and class shape into the data config.
  void propagate();
};

/// Parses key=value text into `config`. Throws ConfigError naming the line.
void parse_config_text(const std::string& text, RunConfig& config);
RunConfig load_config_file(const std::string& path);

/// 1-based layer list: "1,2,3" or the range "1-3".
std::vector<int> parse_layer_list(const std::string& s);
std::string format_layer_list(const std::vector<int>& layers);
/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace tokalign
