#include "tokalign/checkpoint.hpp"

#include "tokalign/errors.hpp"

namespace tokalign {

namespace {

constexpr std::string_view kMagic = "TDMODEL1";
constexpr std::uint32_t kVersion = 1;

}  // namespace

std::vector<std::uint8_t> serialize_model(const DualEncoder& model) {
  io::ByteWriter w;
  w.text(kMagic);
  w.u32(kVersion);
  const ModelConfig& c = model.config;
  for (int v : {c.image_channels, c.image_size, c.patch_size, c.vision_width, c.vision_layers, c.vision_heads,
                c.text_width, c.text_layers, c.text_heads, c.embed_dim, c.mlp_ratio, c.n_classes,
                c.n_prompt_tokens, c.prompt_depth})
    w.i32(v);
  w.f64(c.logit_scale);
  w.f64(c.ln_eps);
  std::uint32_t count = 0;
  model.visit_weights([&](const std::string&, const Matrix&) { ++count; });
  w.u32(count);
  model.visit_weights([&](const std::string& name, const Matrix& m) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.text(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    w.f64s(std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
  });
  return w.buffer();
}

DualEncoder deserialize_model(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "checkpoint");
  if (r.text(kMagic.size()) != kMagic) throw FormatError("checkpoint: bad magic");
  if (const auto v = r.u32(); v != kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(v));
  ModelConfig c;
  for (int* f : {&c.image_channels, &c.image_size, &c.patch_size, &c.vision_width, &c.vision_layers,
                 &c.vision_heads, &c.text_width, &c.text_layers, &c.text_heads, &c.embed_dim, &c.mlp_ratio,
                 &c.n_classes, &c.n_prompt_tokens, &c.prompt_depth})
    *f = r.i32();
  c.logit_scale = r.f64();
  c.ln_eps = r.f64();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  // Shapes come from a fresh initialisation; the file must match them.
  DualEncoder model = DualEncoder::initialize(c, 0);
  std::uint32_t expected = 0;
  model.visit_weights([&](const std::string&, Matrix&) { ++expected; });
  if (r.u32() != expected) throw FormatError("checkpoint: unexpected array count");
  model.visit_weights([&](const std::string& name, Matrix& m) {
    const std::string got = r.text(r.u16());
    if (got != name) throw FormatError("checkpoint: expected array '" + name + "', found '" + got + "'");
    const auto rows = r.u32(), cols = r.u32();
    if (rows != m.rows() || cols != m.cols()) throw FormatError("checkpoint: shape mismatch for '" + name + "'");
    r.f64s(std::span<double>(m.data(), static_cast<std::size_t>(m.size())));
  });
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return model;
}

void save_model(const DualEncoder& model, const std::string& path) {
  io::write_file(path, serialize_model(model));
}

DualEncoder load_model(const std::string& path) { return deserialize_model(io::read_file(path)); }

io::Digest model_hash(const DualEncoder& model) { return io::sha256(serialize_model(model)); }

}  // namespace tokalign
