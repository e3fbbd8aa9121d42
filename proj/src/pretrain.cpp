#include "tokalign/pretrain.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "tokalign/errors.hpp"
#include "tokalign/optim.hpp"
#include "tokalign/random.hpp"

namespace tokalign {

DualEncoder pretrain_backbone(const ModelConfig& config, std::span<const Image> images,
                              std::span<const int> labels, const PretrainConfig& train,
                              const EpochCallback& on_epoch) {
  if (images.empty()) throw DataError("pretrain: empty dataset");
  if (images.size() != labels.size()) throw DataError("pretrain: image and label counts differ");
  if (train.batch_size <= 0 || train.epochs < 0) throw ConfigError("pretrain: invalid schedule");

  DualEncoder model = DualEncoder::initialize(config, train.seed);

  std::vector<Matrix*> params;
  model.visit_weights([&](const std::string&, Matrix& m) { params.push_back(&m); });
  OptimizerConfig opt;
  opt.learning_rate = train.learning_rate;
  opt.weight_decay = train.weight_decay;
  OptimizerState state;

  std::vector<int> all_classes(static_cast<std::size_t>(config.n_classes));
  std::iota(all_classes.begin(), all_classes.end(), 0);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(train.seed ^ 0x5eedf00dULL);

  for (int epoch = 0; epoch < train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(train.batch_size));
      std::vector<Image> batch;
      std::vector<int> batch_labels;
      for (std::size_t i = start; i < end; ++i) {
        if (train.augment) {
          const std::uint64_t stream = static_cast<std::uint64_t>(epoch) * images.size() + order[i];
          batch.push_back(generate_views(images[order[i]], 2, derive_seed(train.seed, stream), train.augment_config).views[1]);
        } else {
          batch.push_back(images[order[i]]);
        }
        batch_labels.push_back(labels[order[i]]);
      }

      ad::Tape tape;
      WeightBinder binder(tape, true);
      const PromptVars pv = bind_model_prompts(binder, model);
      const ad::Var text = forward_texts(model, binder, all_classes, pv.text);
      const VisionForward vis = forward_images(model, binder, batch, pv.vision);
      const ad::Var logits =
          ad::scale(ad::matmul(vis.features, ad::transpose(text)), config.logit_scale);
      const ad::Var loss = ad::cross_entropy(logits, batch_labels);
      const ad::Gradients grads = tape.backward(loss);

      std::vector<Matrix> ordered;
      ordered.reserve(params.size());
      std::unordered_map<const Matrix*, std::size_t> ids;
      for (const auto& [ptr, var] : binder.bound()) ids.emplace(ptr, var.id());
      for (Matrix* p : params) {
        const auto it = ids.find(p);
        ordered.push_back(it == ids.end() ? Matrix::Zero(p->rows(), p->cols()) : grads.at(it->second));
      }
      optimizer_step(params, ordered, state, opt);
      loss_sum += loss.scalar();
      ++batches;
    }
    if (on_epoch) on_epoch(epoch, loss_sum / std::max(1, batches));
  }
  return model;
}

Matrix predict_probs(const DualEncoder& model, const PromptState& prompts, std::span<const Image> images,
                     int batch_size) {
  const Matrix text = encode_texts(model, prompts);
  Matrix probs(static_cast<ad::Index>(images.size()), model.config.n_classes);
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min(images.size() - start, static_cast<std::size_t>(batch_size));
    ad::Tape tape;
    WeightBinder w(tape, false);
    const PromptVars pv = bind_prompts(tape, prompts, false, false);
    const VisionForward vis = forward_images(model, w, images.subspan(start, count), pv.vision);
    const ad::Var p = classify(vis.features, tape.constant(text), model.config.logit_scale);
    probs.middleRows(static_cast<ad::Index>(start), static_cast<ad::Index>(count)) = p.value();
  }
  return probs;
}

double top1_accuracy(const Matrix& probs, std::span<const int> labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size())
    throw DimensionError("top1_accuracy: row count differs from label count");
  if (labels.empty()) return 0.0;
  int correct = 0;
  for (ad::Index r = 0; r < probs.rows(); ++r) {
    ad::Index arg = 0;
    probs.row(r).maxCoeff(&arg);
    correct += static_cast<int>(arg) == labels[static_cast<std::size_t>(r)];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace tokalign
