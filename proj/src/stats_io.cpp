#include <json.hpp>

#include "tokalign/errors.hpp"
#include "tokalign/stats.hpp"

// Stats file, little-endian:
//   magic "TDSTATS1" | model hash (32 bytes) | u32 n_layers | u32 width |
//   u32 max_order | per layer: mu, var, then central moments of orders
//   3..max_order, each `width` f64 | u64 sample_count | u32 id length | id.

namespace tokalign {

namespace {
constexpr std::string_view kMagic = "TDSTATS1";
}

std::vector<std::uint8_t> serialize_stats(const SourceStats& s) {
  if (s.var.size() != s.mu.size() || s.higher.size() != s.mu.size())
    throw ContractError("save_stats: inconsistent layer counts");
  io::ByteWriter w;
  w.text(kMagic);
  w.bytes(s.model_hash);
  w.u32(static_cast<std::uint32_t>(s.n_layers()));
  w.u32(static_cast<std::uint32_t>(s.width()));
  w.u32(static_cast<std::uint32_t>(s.max_order));
  auto put = [&](const RowVector& v) {
    if (v.cols() != s.width()) throw ContractError("save_stats: inconsistent widths");
    w.f64s(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
  };
  for (int l = 0; l < s.n_layers(); ++l)
    for (int k = 1; k <= s.max_order; ++k) put(s.moment(l, k));
  w.u64(s.sample_count);
  w.u32(static_cast<std::uint32_t>(s.dataset_id.size()));
  w.text(s.dataset_id);
  return w.buffer();
}

SourceStats deserialize_stats(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "stats");
  if (r.text(kMagic.size()) != kMagic) throw FormatError("stats: bad magic");
  SourceStats s;
  const auto hash = r.bytes(32);
  std::copy(hash.begin(), hash.end(), s.model_hash.begin());
  const auto n_layers = r.u32(), width = r.u32(), max_order = r.u32();
  if (width == 0 || max_order < 2 || max_order > 64 || n_layers > 4096) throw FormatError("stats: implausible header");
  if (r.remaining() < static_cast<std::size_t>(n_layers) * max_order * width * 8)
    throw FormatError("stats: truncated file");
  s.max_order = static_cast<int>(max_order);
  for (std::uint32_t l = 0; l < n_layers; ++l) {
    auto next = [&] {
      RowVector v(width);
      r.f64s(std::span<double>(v.data(), width));
      return v;
    };
    s.mu.push_back(next());
    s.var.push_back(next());
    std::vector<RowVector> hi;
    for (std::uint32_t k = 3; k <= max_order; ++k) hi.push_back(next());
    s.higher.push_back(std::move(hi));
  }
  s.sample_count = r.u64();
  s.dataset_id = r.text(r.u32());
  if (r.remaining() != 0) throw FormatError("stats: trailing bytes");
  return s;
}

void save_stats(const SourceStats& stats, const std::string& path) { io::write_file(path, serialize_stats(stats)); }

SourceStats load_stats_unchecked(const std::string& path) { return deserialize_stats(io::read_file(path)); }

SourceStats load_stats(const std::string& path, const io::Digest& expected_model_hash) {
  SourceStats s = load_stats_unchecked(path);
  if (s.model_hash != expected_model_hash)
    throw CompatibilityError("stats '" + path + "' were computed for model " + io::to_hex(s.model_hash) +
                             ", not " + io::to_hex(expected_model_hash));
  return s;
}

std::string stats_to_json(const SourceStats& s) {
  nlohmann::json j;
  j["format"] = "TDSTATS1";
  j["model_hash"] = io::to_hex(s.model_hash);
  j["dataset_id"] = s.dataset_id;
  j["sample_count"] = s.sample_count;
  j["n_layers"] = s.n_layers();
  j["width"] = s.width();
  j["max_order"] = s.max_order;
  auto vec = [](const RowVector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json layers = nlohmann::json::array();
  for (int l = 0; l < s.n_layers(); ++l) {
    nlohmann::json layer;
    layer["layer"] = l + 1;
    layer["mean"] = vec(s.mu[static_cast<std::size_t>(l)]);
    layer["variance"] = vec(s.var[static_cast<std::size_t>(l)]);
    nlohmann::json hi = nlohmann::json::object();
    for (int k = 3; k <= s.max_order; ++k) hi[std::to_string(k)] = vec(s.moment(l, k));
    layer["central_moments"] = hi;
    layers.push_back(layer);
  }
  j["layers"] = layers;
  return j.dump(2);
}

}  // namespace tokalign
