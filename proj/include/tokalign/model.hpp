#pragma once

// Desk-scale dual encoder: a pre-LN vision transformer over image patches and
// a causal text transformer over `a photo of a <cls>` templates, with deep
// multi-modal prompts. Vision prompts are never stored; they are derived from
// the text prompts through a linear coupling on every forward pass.
//
// The checkpoint carries a source-trained prompt set (learned together with
// the backbone). It is the starting point of every test-time episode, so the
// unadapted model is exactly the pretrained network.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tokalign/autodiff.hpp"
#include "tokalign/image.hpp"

namespace tokalign {

using ad::Matrix;
using ad::RowVector;

struct ModelConfig {
  int image_channels = 1;
  int image_size = 32;
  int patch_size = 8;
  int vision_width = 64;
  int vision_layers = 6;
  int vision_heads = 4;
  int text_width = 64;
  int text_layers = 4;
  int text_heads = 4;
  int embed_dim = 64;
  int mlp_ratio = 4;
  int n_classes = 8;
  /// Prompt tokens per prompted layer, shared by both branches (V = T).
  int n_prompt_tokens = 2;
  int prompt_depth = 3;
  double logit_scale = 100.0;
  double ln_eps = 1e-5;

  /// Throws ConfigError on inconsistent values.
  void validate() const;

  int grid() const { return image_size / patch_size; }
  int n_patches() const { return grid() * grid(); }
  int patch_dim() const { return image_channels * patch_size * patch_size; }
  /// CLS + prompt slots + patches.
  int vision_seq_len() const { return 1 + n_prompt_tokens + n_patches(); }
  /// SOS + prompt slots + `a photo of a` + class word + EOS.
  int text_seq_len() const { return n_prompt_tokens + 7; }

  bool operator==(const ModelConfig&) const = default;
};

/// Closed whitespace vocabulary: specials, template words, class names.
class Vocabulary {
 public:
  static Vocabulary synthetic(int n_classes);

  int id(std::string_view word) const;
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  std::vector<int> tokenize(std::string_view text) const;
  int size() const { return static_cast<int>(words_.size()); }
  int sos() const { return 0; }
  int eos() const { return 1; }
  const std::vector<std::string>& class_names() const { return class_names_; }

 private:
  std::vector<std::string> words_;
  std::vector<std::string> class_names_;
  std::unordered_map<std::string, int> index_;
};

struct BlockWeights {
  Matrix ln1_gamma, ln1_beta;
  Matrix attn_in_w, attn_in_b;
  Matrix attn_out_w, attn_out_b;
  Matrix ln2_gamma, ln2_beta;
  Matrix mlp_fc_w, mlp_fc_b;
  Matrix mlp_proj_w, mlp_proj_b;

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "ln1.gamma", self.ln1_gamma);
    f(prefix + "ln1.beta", self.ln1_beta);
    f(prefix + "attn.in.w", self.attn_in_w);
    f(prefix + "attn.in.b", self.attn_in_b);
    f(prefix + "attn.out.w", self.attn_out_w);
    f(prefix + "attn.out.b", self.attn_out_b);
    f(prefix + "ln2.gamma", self.ln2_gamma);
    f(prefix + "ln2.beta", self.ln2_beta);
    f(prefix + "mlp.fc.w", self.mlp_fc_w);
    f(prefix + "mlp.fc.b", self.mlp_fc_b);
    f(prefix + "mlp.proj.w", self.mlp_proj_w);
    f(prefix + "mlp.proj.b", self.mlp_proj_b);
  }
};

struct VisionWeights {
  Matrix patch_w, patch_b;
  Matrix class_embedding;
  Matrix positional;  // (1 + n_patches) x width
  std::vector<BlockWeights> blocks;
  Matrix ln_post_gamma, ln_post_beta;
  Matrix proj;
};

struct TextWeights {
  Matrix token_embedding;  // vocab x width
  Matrix positional;       // text_seq_len x width
  std::vector<BlockWeights> blocks;
  Matrix ln_final_gamma, ln_final_beta;
  Matrix proj;
};

struct DualEncoder {
  ModelConfig config;
  Vocabulary vocab;
  VisionWeights vision;
  TextWeights text;
  /// Source-trained prompts: prompt_depth blocks of T x text_width and
  /// prompt_depth couplings of text_width x vision_width.
  std::vector<Matrix> prompt_text;
  std::vector<Matrix> prompt_coupling;

  /// Seeded random initialisation of every backbone weight.
  static DualEncoder initialize(const ModelConfig& config, std::uint64_t seed);

  /// Calls f(name, matrix) for every weight in a fixed order.
  template <typename F>
  void visit_weights(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit_weights(F&& f) const {
    visit_impl(*this, f);
  }

  /// Token ids of the class template with placeholder ids in the prompt slots.
  std::vector<int> template_tokens(int class_id) const;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("vision.patch.w"), self.vision.patch_w);
    f(std::string("vision.patch.b"), self.vision.patch_b);
    f(std::string("vision.class_embedding"), self.vision.class_embedding);
    f(std::string("vision.positional"), self.vision.positional);
    for (std::size_t i = 0; i < self.vision.blocks.size(); ++i)
      BlockWeights::visit(self.vision.blocks[i], "vision.block" + std::to_string(i) + ".", f);
    f(std::string("vision.ln_post.gamma"), self.vision.ln_post_gamma);
    f(std::string("vision.ln_post.beta"), self.vision.ln_post_beta);
    f(std::string("vision.proj"), self.vision.proj);
    f(std::string("text.token_embedding"), self.text.token_embedding);
    f(std::string("text.positional"), self.text.positional);
    for (std::size_t i = 0; i < self.text.blocks.size(); ++i)
      BlockWeights::visit(self.text.blocks[i], "text.block" + std::to_string(i) + ".", f);
    f(std::string("text.ln_final.gamma"), self.text.ln_final_gamma);
    f(std::string("text.ln_final.beta"), self.text.ln_final_beta);
    f(std::string("text.proj"), self.text.proj);
    for (std::size_t i = 0; i < self.prompt_text.size(); ++i)
      f("prompt.text" + std::to_string(i), self.prompt_text[i]);
    for (std::size_t i = 0; i < self.prompt_coupling.size(); ++i)
      f("prompt.coupling" + std::to_string(i), self.prompt_coupling[i]);
  }
};

/// The test-time learnable state: one text prompt block and one coupling
/// matrix per prompted layer, plus the snapshot restored by reset().
struct PromptState {
  std::vector<Matrix> text;      // prompt_depth x (T x text_width)
  std::vector<Matrix> coupling;  // prompt_depth x (text_width x vision_width)
  std::vector<Matrix> init_text;
  std::vector<Matrix> init_coupling;

  /// The checkpoint's source-trained prompts, snapshotted for reset().
  static PromptState from_model(const DualEncoder& model);
  /// All-zero prompts.
  static PromptState zeros(const ModelConfig& config);
  /// Random text prompts with the given scale, random coupling.
  static PromptState random(const ModelConfig& config, std::uint64_t seed, double text_scale);

  void reset();
  /// Makes the current values the reset target.
  void snapshot();
  std::vector<Matrix> vision() const;
  int depth() const { return static_cast<int>(text.size()); }

  bool operator==(const PromptState&) const;
};

// ---- differentiable forward --------------------------------------------

/// Places backbone weights on a tape, once per weight. Frozen binders create
/// constants; trainable binders create parameter leaves.
class WeightBinder {
 public:
  WeightBinder(ad::Tape& tape, bool trainable) : tape_(tape), trainable_(trainable) {}

  ad::Var operator()(const Matrix& weight);
  ad::Tape& tape() const { return tape_; }
  const std::vector<std::pair<const Matrix*, ad::Var>>& bound() const { return bound_; }

 private:
  ad::Tape& tape_;
  bool trainable_;
  std::unordered_map<const Matrix*, ad::Var> cache_;
  std::vector<std::pair<const Matrix*, ad::Var>> bound_;
};

struct PromptVars {
  std::vector<ad::Var> text;
  std::vector<ad::Var> coupling;
  std::vector<ad::Var> vision;
};

/// Puts prompts on the tape and derives the vision prompts from them.
PromptVars bind_prompts(ad::Tape& tape, const PromptState& prompts, bool trainable_text,
                        bool trainable_coupling);

/// The model's own prompts bound through `weights` (trainable exactly when
/// the binder is).
PromptVars bind_model_prompts(WeightBinder& weights, const DualEncoder& model);

/// Linear V-L coupling: text prompt tokens mapped to vision width.
ad::Var couple(ad::Var text_prompt, ad::Var coupling);

struct VisionForward {
  ad::Var features;                  // n_images x embed_dim, L2-normalised
  std::vector<ad::Var> layer_tokens;  // per layer, (n_images * seq_len) x width
  ad::Index seq_len = 0;
  ad::Index n_images = 0;
};

VisionForward forward_images(const DualEncoder& model, WeightBinder& weights,
                             std::span<const Image> images, std::span<const ad::Var> vision_prompts);

/// Text features for the given classes, L2-normalised rows.
ad::Var forward_texts(const DualEncoder& model, WeightBinder& weights,
                      std::span<const int> class_ids, std::span<const ad::Var> text_prompts);

/// Row-wise softmax of scale * cosine similarity.
ad::Var classify(ad::Var image_features, ad::Var text_features, double scale);

// ---- numeric conveniences ----------------------------------------------

/// Patch rows (n_images * n_patches) x patch_dim.
Matrix patchify(const ModelConfig& config, std::span<const Image> images);
/// Projected patch tokens plus positional embeddings, n_patches x width.
Matrix patch_embed(const DualEncoder& model, const Image& image);

struct ImageEncoding {
  RowVector feature;
  std::vector<Matrix> layer_tokens;
};

ImageEncoding encode_image(const DualEncoder& model, const Image& image, const PromptState& prompts);
RowVector encode_text(const DualEncoder& model, int class_id, const PromptState& prompts);
/// All class features, n_classes x embed_dim.
Matrix encode_texts(const DualEncoder& model, const PromptState& prompts);
RowVector classify(const RowVector& image_feature, const Matrix& text_features, double scale);
/// p_v = p_t * W for a single prompted layer.
Matrix couple(const Matrix& text_prompt, const Matrix& coupling);

}  // namespace tokalign
