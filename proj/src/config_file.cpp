#include "tokalign/config_file.hpp"

#include <charconv>
#include <sstream>

#include "tokalign/binary_io.hpp"
#include "tokalign/errors.hpp"

namespace tokalign {

namespace {

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  return out;
}

long long to_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

int to_int(const std::string& key, const std::string& v) { return static_cast<int>(to_integer(key, v)); }

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_FIELD(name, member) \
  {name, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_int(k, v); }, \
          [](const RunConfig& c) { return std::to_string(c.member); }}}
#define DOUBLE_FIELD(name, member) \
  {name, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_double(k, v); }, \
          [](const RunConfig& c) { return format_double(c.member); }}}
#define BOOL_FIELD(name, member) \
  {name, {[](RunConfig& c, const std::string& k, const std::string& v) { c.member = to_bool(k, v); }, \
          [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }}}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"seed",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); },
        [](const RunConfig& c) { return std::to_string(c.seed); }}},
      INT_FIELD("threads", threads),
      // model
      INT_FIELD("image_channels", model.image_channels),
      INT_FIELD("image_size", model.image_size),
      INT_FIELD("patch_size", model.patch_size),
      INT_FIELD("vision_width", model.vision_width),
      INT_FIELD("vision_layers", model.vision_layers),
      INT_FIELD("vision_heads", model.vision_heads),
      INT_FIELD("text_width", model.text_width),
      INT_FIELD("text_layers", model.text_layers),
      INT_FIELD("text_heads", model.text_heads),
      INT_FIELD("embed_dim", model.embed_dim),
      INT_FIELD("mlp_ratio", model.mlp_ratio),
      INT_FIELD("n_classes", model.n_classes),
      INT_FIELD("n_prompt_tokens", model.n_prompt_tokens),
      INT_FIELD("prompt_depth", model.prompt_depth),
      DOUBLE_FIELD("logit_scale", model.logit_scale),
      DOUBLE_FIELD("ln_eps", model.ln_eps),
      // pretraining
      INT_FIELD("pretrain_epochs", pretrain.epochs),
      INT_FIELD("pretrain_batch_size", pretrain.batch_size),
      DOUBLE_FIELD("pretrain_learning_rate", pretrain.learning_rate),
      DOUBLE_FIELD("pretrain_weight_decay", pretrain.weight_decay),
      BOOL_FIELD("pretrain_augment", pretrain.augment),
      // synthetic data
      INT_FIELD("n_train", data.n_train),
      INT_FIELD("n_val", data.n_val),
      INT_FIELD("n_test", data.n_test),
      DOUBLE_FIELD("amplitude", data.amplitude),
      DOUBLE_FIELD("noise", data.noise),
      DOUBLE_FIELD("base_frequency", data.base_frequency),
      DOUBLE_FIELD("frequency_ratio", data.frequency_ratio),
      {"shift_kind",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.data.shift.kind = parse_shift_kind(v); },
        [](const RunConfig& c) { return to_string(c.data.shift.kind); }}},
      DOUBLE_FIELD("shift_magnitude", data.shift.magnitude),
      // statistics
      INT_FIELD("stats_batch_size", stats_batch_size),
      INT_FIELD("stats_max_order", stats_max_order),
      BOOL_FIELD("mask_cls", tta.token_mask.cls),
      BOOL_FIELD("mask_prompts", tta.token_mask.prompts),
      BOOL_FIELD("mask_patches", tta.token_mask.patches),
      // adaptation
      DOUBLE_FIELD("beta", tta.beta),
      INT_FIELD("n_views", tta.n_views),
      DOUBLE_FIELD("filter_ratio", tta.filter_ratio),
      DOUBLE_FIELD("learning_rate", tta.learning_rate),
      INT_FIELD("n_steps", tta.n_steps),
      {"align_layers",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.tta.align_layers = parse_layer_list(v); },
        [](const RunConfig& c) { return format_layer_list(c.tta.align_layers); }}},
      {"align_loss",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.tta.align_loss = parse_align_loss(v); },
        [](const RunConfig& c) { return to_string(c.tta.align_loss); }}},
      INT_FIELD("cmd_order", tta.cmd_order),
      {"mode",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.tta.mode = parse_adapt_mode(v); },
        [](const RunConfig& c) { return to_string(c.tta.mode); }}},
      DOUBLE_FIELD("prompt_reg_lambda", tta.prompt_reg_lambda),
      {"optimizer",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.tta.optimizer = parse_optimizer(v); },
        [](const RunConfig& c) { return to_string(c.tta.optimizer); }}},
      DOUBLE_FIELD("weight_decay", tta.weight_decay),
      DOUBLE_FIELD("kl_floor", tta.kl_floor),
      BOOL_FIELD("train_coupling", tta.train_coupling),
      INT_FIELD("bag_size", tta.bag_size),
      DOUBLE_FIELD("crop_scale_min", tta.augment.scale_min),
      DOUBLE_FIELD("crop_scale_max", tta.augment.scale_max),
      DOUBLE_FIELD("crop_ratio_min", tta.augment.ratio_min),
      DOUBLE_FIELD("crop_ratio_max", tta.augment.ratio_max),
      DOUBLE_FIELD("flip_probability", tta.augment.flip_probability),
  };
  return table;
}

#undef INT_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD

const Field& find(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return f;
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<int> parse_layer_list(const std::string& s) {
  std::vector<int> out;
  const auto dash = s.find('-');
  if (dash != std::string::npos) {
    const int lo = to_int("align_layers", s.substr(0, dash));
    const int hi = to_int("align_layers", s.substr(dash + 1));
    if (hi < lo) throw ConfigError("config: empty layer range '" + s + "'");
    for (int l = lo; l <= hi; ++l) out.push_back(l);
    return out;
  }
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) out.push_back(to_int("align_layers", trim(item)));
  if (out.empty()) throw ConfigError("config: empty layer list");
  return out;
}

std::string format_layer_list(const std::vector<int>& layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) out += (i ? "," : "") + std::to_string(layers[i]);
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) { find(key).set(*this, key, value); }

std::string RunConfig::get(const std::string& key) const { return find(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> out = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.first);
    return k;
  }();
  return out;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& key : keys()) out += key + "=" + get(key) + "\n";
  return out;
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& key : keys()) out[key] = get(key);
  return out;
}

void RunConfig::propagate() {
  pretrain.seed = seed;
  data.shift.seed = seed;
  tta.seed = seed;
  data.n_classes = model.n_classes;
  data.image_size = model.image_size;
  data.channels = model.image_channels;
}

void parse_config_text(const std::string& text, RunConfig& config) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(number) + ": expected key=value, got '" + t + "'");
    try {
      config.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
}

RunConfig load_config_file(const std::string& path) {
  const auto bytes = io::read_file(path);
  RunConfig config;
  parse_config_text(std::string(bytes.begin(), bytes.end()), config);
  return config;
}

}  // namespace tokalign
