#include "tokalign/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "tokalign/errors.hpp"

namespace tokalign {

namespace {

constexpr const char* kClassWords[] = {"ash",   "birch", "cedar", "elm",   "fir",  "hazel",
                                       "larch", "maple", "oak",   "pine",  "rowan", "spruce",
                                       "teak",  "walnut", "willow", "yew"};
constexpr int kMaxClasses = static_cast<int>(std::size(kClassWords));

Matrix randn(std::mt19937_64& rng, ad::Index rows, ad::Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

BlockWeights init_block(std::mt19937_64& rng, int width, int mlp_ratio) {
  const int hidden = width * mlp_ratio;
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  BlockWeights b;
  b.ln1_gamma = Matrix::Ones(1, width);
  b.ln1_beta = Matrix::Zero(1, width);
  b.attn_in_w = randn(rng, width, 3 * width, s);
  b.attn_in_b = Matrix::Zero(1, 3 * width);
  b.attn_out_w = randn(rng, width, width, s);
  b.attn_out_b = Matrix::Zero(1, width);
  b.ln2_gamma = Matrix::Ones(1, width);
  b.ln2_beta = Matrix::Zero(1, width);
  b.mlp_fc_w = randn(rng, width, hidden, s);
  b.mlp_fc_b = Matrix::Zero(1, hidden);
  b.mlp_proj_w = randn(rng, hidden, width, 1.0 / std::sqrt(static_cast<double>(hidden)));
  b.mlp_proj_b = Matrix::Zero(1, width);
  return b;
}

struct BoundBlock {
  ad::Var ln1_gamma, ln1_beta, attn_in_w, attn_in_b, attn_out_w, attn_out_b;
  ad::Var ln2_gamma, ln2_beta, mlp_fc_w, mlp_fc_b, mlp_proj_w, mlp_proj_b;
};

BoundBlock bind_block(WeightBinder& w, const BlockWeights& b) {
  return {w(b.ln1_gamma),  w(b.ln1_beta),  w(b.attn_in_w), w(b.attn_in_b),
          w(b.attn_out_w), w(b.attn_out_b), w(b.ln2_gamma), w(b.ln2_beta),
          w(b.mlp_fc_w),   w(b.mlp_fc_b),  w(b.mlp_proj_w), w(b.mlp_proj_b)};
}

ad::Var transformer_block(ad::Var x, const BoundBlock& b, ad::Index seq_len, int heads,
                          bool causal, double eps) {
  using namespace ad;
  Var h = layer_norm(x, b.ln1_gamma, b.ln1_beta, eps);
  Var qkv = add_row(matmul(h, b.attn_in_w), b.attn_in_b);
  Var att = attention(qkv, seq_len, heads, causal);
  x = x + add_row(matmul(att, b.attn_out_w), b.attn_out_b);
  h = layer_norm(x, b.ln2_gamma, b.ln2_beta, eps);
  Var m = gelu(add_row(matmul(h, b.mlp_fc_w), b.mlp_fc_b));
  return x + add_row(matmul(m, b.mlp_proj_w), b.mlp_proj_b);
}

std::vector<Matrix> init_couplings(const ModelConfig& c, std::mt19937_64& rng) {
  std::vector<Matrix> out;
  for (int l = 0; l < c.prompt_depth; ++l)
    out.push_back(randn(rng, c.text_width, c.vision_width, 1.0 / std::sqrt(static_cast<double>(c.text_width))));
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (image_channels <= 0 || image_size <= 0 || patch_size <= 0) fail("image dimensions must be positive");
  if (image_size % patch_size != 0)
    fail("image size " + std::to_string(image_size) + " is not divisible by patch size " +
         std::to_string(patch_size));
  if (vision_width <= 0 || text_width <= 0 || embed_dim <= 0) fail("widths must be positive");
  if (vision_heads <= 0 || vision_width % vision_heads != 0) fail("vision width not divisible by heads");
  if (text_heads <= 0 || text_width % text_heads != 0) fail("text width not divisible by heads");
  if (vision_layers <= 0 || text_layers <= 0) fail("layer counts must be positive");
  if (mlp_ratio <= 0) fail("mlp ratio must be positive");
  if (n_classes < 2 || n_classes > kMaxClasses)
    fail("class count must lie in [2, " + std::to_string(kMaxClasses) + "]");
  if (n_prompt_tokens < 1) fail("need at least one prompt token");
  if (prompt_depth < 1) fail("prompt depth must be >= 1");
  if (prompt_depth > vision_layers || prompt_depth > text_layers)
    fail("prompt depth " + std::to_string(prompt_depth) + " exceeds the encoder depth");
  if (!(logit_scale >= 0.0)) fail("logit scale must be non-negative");
  if (!(ln_eps > 0.0)) fail("layer-norm eps must be positive");
}

Vocabulary Vocabulary::synthetic(int n_classes) {
  if (n_classes < 1 || n_classes > kMaxClasses) throw ConfigError("vocabulary: unsupported class count");
  Vocabulary v;
  v.words_ = {"<sos>", "<eos>", "a", "photo", "of"};
  for (int c = 0; c < n_classes; ++c) {
    v.words_.emplace_back(kClassWords[c]);
    v.class_names_.emplace_back(kClassWords[c]);
  }
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.index_.emplace(v.words_[i], static_cast<int>(i));
  return v;
}

int Vocabulary::id(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  if (it == index_.end()) throw LookupError("unknown word '" + std::string(word) + "'");
  return it->second;
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::istringstream is{std::string(text)};
  std::vector<int> ids;
  for (std::string w; is >> w;) ids.push_back(id(w));
  return ids;
}

DualEncoder DualEncoder::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  DualEncoder m;
  m.config = config;
  m.vocab = Vocabulary::synthetic(config.n_classes);

  const int dv = config.vision_width;
  VisionWeights& v = m.vision;
  v.patch_w = randn(rng, config.patch_dim(), dv, 1.0 / std::sqrt(static_cast<double>(config.patch_dim())));
  v.patch_b = Matrix::Zero(1, dv);
  v.class_embedding = randn(rng, 1, dv, 1.0 / std::sqrt(static_cast<double>(dv)));
  v.positional = randn(rng, 1 + config.n_patches(), dv, 0.02);
  for (int l = 0; l < config.vision_layers; ++l) v.blocks.push_back(init_block(rng, dv, config.mlp_ratio));
  v.ln_post_gamma = Matrix::Ones(1, dv);
  v.ln_post_beta = Matrix::Zero(1, dv);
  v.proj = randn(rng, dv, config.embed_dim, 1.0 / std::sqrt(static_cast<double>(dv)));

  const int dt = config.text_width;
  TextWeights& t = m.text;
  t.token_embedding = randn(rng, m.vocab.size(), dt, 0.2);
  t.positional = randn(rng, config.text_seq_len(), dt, 0.02);
  for (int l = 0; l < config.text_layers; ++l) t.blocks.push_back(init_block(rng, dt, config.mlp_ratio));
  t.ln_final_gamma = Matrix::Ones(1, dt);
  t.ln_final_beta = Matrix::Zero(1, dt);
  t.proj = randn(rng, dt, config.embed_dim, 1.0 / std::sqrt(static_cast<double>(dt)));

  // Prompts start at token-embedding scale so layer norm sees ordinary tokens.
  for (int l = 0; l < config.prompt_depth; ++l) m.prompt_text.push_back(randn(rng, config.n_prompt_tokens, dt, 0.2));
  m.prompt_coupling = init_couplings(config, rng);
  return m;
}

std::vector<int> DualEncoder::template_tokens(int class_id) const {
  if (class_id < 0 || class_id >= config.n_classes)
    throw LookupError("unknown class id " + std::to_string(class_id));
  std::vector<int> ids{vocab.sos()};
  ids.insert(ids.end(), static_cast<std::size_t>(config.n_prompt_tokens), vocab.sos());
  const std::vector<int> words = vocab.tokenize("a photo of a " + vocab.class_names()[static_cast<std::size_t>(class_id)]);
  ids.insert(ids.end(), words.begin(), words.end());
  ids.push_back(vocab.eos());
  return ids;
}

// ---- prompts --------------------------------------------------------------

PromptState PromptState::from_model(const DualEncoder& model) {
  if (static_cast<int>(model.prompt_text.size()) != model.config.prompt_depth ||
      model.prompt_coupling.size() != model.prompt_text.size())
    throw ConfigError("model carries " + std::to_string(model.prompt_text.size()) + " prompt blocks, expected " +
                      std::to_string(model.config.prompt_depth));
  PromptState p;
  p.text = model.prompt_text;
  p.coupling = model.prompt_coupling;
  p.snapshot();
  return p;
}

PromptState PromptState::zeros(const ModelConfig& config) {
  config.validate();
  PromptState p;
  for (int l = 0; l < config.prompt_depth; ++l) {
    p.text.push_back(Matrix::Zero(config.n_prompt_tokens, config.text_width));
    p.coupling.push_back(Matrix::Zero(config.text_width, config.vision_width));
  }
  p.snapshot();
  return p;
}

PromptState PromptState::random(const ModelConfig& config, std::uint64_t seed, double text_scale) {
  config.validate();
  std::mt19937_64 rng(seed);
  PromptState p;
  for (int l = 0; l < config.prompt_depth; ++l)
    p.text.push_back(randn(rng, config.n_prompt_tokens, config.text_width, text_scale));
  p.coupling = init_couplings(config, rng);
  p.snapshot();
  return p;
}

void PromptState::reset() {
  text = init_text;
  coupling = init_coupling;
}

void PromptState::snapshot() {
  init_text = text;
  init_coupling = coupling;
}

std::vector<Matrix> PromptState::vision() const {
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < text.size(); ++l) out.push_back(tokalign::couple(text[l], coupling[l]));
  return out;
}

bool PromptState::operator==(const PromptState& o) const {
  auto eq = [](const std::vector<Matrix>& a, const std::vector<Matrix>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].rows() != b[i].rows() || a[i].cols() != b[i].cols() || a[i] != b[i]) return false;
    return true;
  };
  return eq(text, o.text) && eq(coupling, o.coupling) && eq(init_text, o.init_text) &&
         eq(init_coupling, o.init_coupling);
}

// ---- tape forward -----------------------------------------------------------

ad::Var WeightBinder::operator()(const Matrix& weight) {
  const auto it = cache_.find(&weight);
  if (it != cache_.end()) return it->second;
  ad::Var v = trainable_ ? tape_.parameter(weight) : tape_.constant(weight);
  cache_.emplace(&weight, v);
  bound_.emplace_back(&weight, v);
  return v;
}

PromptVars bind_model_prompts(WeightBinder& w, const DualEncoder& model) {
  PromptVars v;
  for (std::size_t l = 0; l < model.prompt_text.size(); ++l) {
    v.text.push_back(w(model.prompt_text[l]));
    v.coupling.push_back(w(model.prompt_coupling.at(l)));
    v.vision.push_back(couple(v.text.back(), v.coupling.back()));
  }
  return v;
}

ad::Var couple(ad::Var text_prompt, ad::Var coupling) {
  if (text_prompt.cols() != coupling.rows())
    throw ConfigError("couple: text width " + std::to_string(text_prompt.cols()) +
                      " does not match coupling rows " + std::to_string(coupling.rows()));
  return ad::matmul(text_prompt, coupling);
}

PromptVars bind_prompts(ad::Tape& tape, const PromptState& prompts, bool trainable_text,
                        bool trainable_coupling) {
  PromptVars v;
  for (std::size_t l = 0; l < prompts.text.size(); ++l) {
    v.text.push_back(trainable_text ? tape.parameter(prompts.text[l]) : tape.constant(prompts.text[l]));
    v.coupling.push_back(trainable_coupling ? tape.parameter(prompts.coupling[l])
                                            : tape.constant(prompts.coupling[l]));
    v.vision.push_back(couple(v.text.back(), v.coupling.back()));
  }
  return v;
}

VisionForward forward_images(const DualEncoder& model, WeightBinder& w, std::span<const Image> images,
                             std::span<const ad::Var> vision_prompts) {
  using namespace ad;
  const ModelConfig& c = model.config;
  if (images.empty()) throw ContractError("forward_images: no images");
  if (static_cast<int>(vision_prompts.size()) != c.prompt_depth)
    throw ConfigError("forward_images: expected " + std::to_string(c.prompt_depth) + " prompt blocks");
  const Index n = static_cast<Index>(images.size());
  const Index m = c.n_patches();
  const Index seq = c.vision_seq_len();
  const VisionWeights& vw = model.vision;

  Var pos = w(vw.positional);
  Var patches = w.tape().constant(patchify(c, images));
  Var tokens = add_row(matmul(patches, w(vw.patch_w)), w(vw.patch_b));
  tokens = add_tiled(tokens, slice_rows(pos, 1, m));
  Var cls = add(w(vw.class_embedding), slice_rows(pos, 0, 1));
  Var x = assemble_sequences(cls, vision_prompts[0], tokens, n);

  VisionForward out;
  out.seq_len = seq;
  out.n_images = n;
  for (int l = 0; l < c.vision_layers; ++l) {
    if (l > 0 && l < c.prompt_depth) x = replace_rows(x, vision_prompts[static_cast<std::size_t>(l)], seq, 1);
    x = transformer_block(x, bind_block(w, vw.blocks[static_cast<std::size_t>(l)]), seq, c.vision_heads,
                          false, c.ln_eps);
    out.layer_tokens.push_back(x);
  }
  std::vector<Index> cls_rows;
  for (Index s = 0; s < n; ++s) cls_rows.push_back(s * seq);
  Var pooled = layer_norm(gather_rows(x, cls_rows), w(vw.ln_post_gamma), w(vw.ln_post_beta), c.ln_eps);
  out.features = l2_normalize_rows(matmul(pooled, w(vw.proj)));
  return out;
}

ad::Var forward_texts(const DualEncoder& model, WeightBinder& w, std::span<const int> class_ids,
                      std::span<const ad::Var> text_prompts) {
  using namespace ad;
  const ModelConfig& c = model.config;
  if (class_ids.empty()) throw ContractError("forward_texts: no classes");
  if (static_cast<int>(text_prompts.size()) != c.prompt_depth)
    throw ConfigError("forward_texts: expected " + std::to_string(c.prompt_depth) + " prompt blocks");
  const Index seq = c.text_seq_len();
  std::vector<Index> ids;
  for (int cls : class_ids)
    for (int t : model.template_tokens(cls)) ids.push_back(t);
  const TextWeights& tw = model.text;

  Var x = gather_rows(w(tw.token_embedding), ids);
  x = replace_rows(x, text_prompts[0], seq, 1);
  x = add_tiled(x, w(tw.positional));
  for (int l = 0; l < c.text_layers; ++l) {
    if (l > 0 && l < c.prompt_depth) x = replace_rows(x, text_prompts[static_cast<std::size_t>(l)], seq, 1);
    x = transformer_block(x, bind_block(w, tw.blocks[static_cast<std::size_t>(l)]), seq, c.text_heads, true,
                          c.ln_eps);
  }
  std::vector<Index> eos_rows;
  for (std::size_t s = 0; s < class_ids.size(); ++s) eos_rows.push_back(static_cast<Index>(s) * seq + seq - 1);
  Var pooled = layer_norm(gather_rows(x, eos_rows), w(tw.ln_final_gamma), w(tw.ln_final_beta), c.ln_eps);
  return l2_normalize_rows(matmul(pooled, w(tw.proj)));
}

ad::Var classify(ad::Var image_features, ad::Var text_features, double scale) {
  if (image_features.cols() != text_features.cols())
    throw DimensionError("classify: feature widths differ");
  return ad::softmax_rows(ad::scale(ad::matmul(image_features, ad::transpose(text_features)), scale));
}

// ---- numeric ----------------------------------------------------------------

Matrix patchify(const ModelConfig& c, std::span<const Image> images) {
  const int p = c.patch_size;
  const int g = c.grid();
  Matrix out(static_cast<ad::Index>(images.size()) * c.n_patches(), c.patch_dim());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& img = images[i];
    if (img.height % p != 0 || img.width % p != 0)
      throw ConfigError("patchify: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                        " not divisible by patch size " + std::to_string(p));
    if (img.channels != c.image_channels || img.height != c.image_size || img.width != c.image_size)
      throw ConfigError("patchify: image shape does not match the model configuration");
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx) {
        const ad::Index row = static_cast<ad::Index>(i) * c.n_patches() + gy * g + gx;
        ad::Index col = 0;
        for (int ch = 0; ch < img.channels; ++ch)
          for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x) out(row, col++) = img.at(ch, gy * p + y, gx * p + x);
      }
  }
  return out;
}

Matrix patch_embed(const DualEncoder& model, const Image& image) {
  const Matrix patches = patchify(model.config, std::span<const Image>(&image, 1));
  Matrix tokens = patches * model.vision.patch_w;
  tokens.rowwise() += model.vision.patch_b.row(0);
  tokens += model.vision.positional.bottomRows(model.config.n_patches());
  return tokens;
}

ImageEncoding encode_image(const DualEncoder& model, const Image& image, const PromptState& prompts) {
  ad::Tape tape;
  WeightBinder w(tape, false);
  const PromptVars pv = bind_prompts(tape, prompts, false, false);
  const VisionForward f = forward_images(model, w, std::span<const Image>(&image, 1), pv.vision);
  ImageEncoding out;
  out.feature = f.features.value().row(0);
  for (const ad::Var& t : f.layer_tokens) out.layer_tokens.push_back(t.value());
  return out;
}

Matrix encode_texts(const DualEncoder& model, const PromptState& prompts) {
  ad::Tape tape;
  WeightBinder w(tape, false);
  const PromptVars pv = bind_prompts(tape, prompts, false, false);
  std::vector<int> ids(static_cast<std::size_t>(model.config.n_classes));
  for (int c = 0; c < model.config.n_classes; ++c) ids[static_cast<std::size_t>(c)] = c;
  return forward_texts(model, w, ids, pv.text).value();
}

RowVector encode_text(const DualEncoder& model, int class_id, const PromptState& prompts) {
  if (class_id < 0 || class_id >= model.config.n_classes)
    throw LookupError("unknown class id " + std::to_string(class_id));
  ad::Tape tape;
  WeightBinder w(tape, false);
  const PromptVars pv = bind_prompts(tape, prompts, false, false);
  const int ids[] = {class_id};
  return forward_texts(model, w, ids, pv.text).value().row(0);
}

RowVector classify(const RowVector& image_feature, const Matrix& text_features, double scale) {
  ad::Tape tape;
  return classify(tape.constant(image_feature), tape.constant(text_features), scale).value().row(0);
}

Matrix couple(const Matrix& text_prompt, const Matrix& coupling) {
  if (text_prompt.cols() != coupling.rows())
    throw ConfigError("couple: text width " + std::to_string(text_prompt.cols()) +
                      " does not match coupling rows " + std::to_string(coupling.rows()));
  return text_prompt * coupling;
}

}  // namespace tokalign
