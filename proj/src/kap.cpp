#include "teata/kap.hpp"

#include "teata/errors.hpp"

#include <cmath>
#include <numbers>

namespace teata {

std::string to_string(InitMode mode) {
  switch (mode) {
    case InitMode::KA_T: return "KA_T";
    case InitMode::KA_V: return "KA_V";
    case InitMode::Random: return "RANDOM";
  }
  return "?";
}

InitMode parse_init_mode(const std::string& text) {
  if (text == "KA_T") return InitMode::KA_T;
  if (text == "KA_V") return InitMode::KA_V;
  if (text == "RANDOM") return InitMode::Random;
  throw ConfigError("init_mode must be KA_T, KA_V or RANDOM, got \"" + text + "\"");
}

AdaptedClassifier init_classifier(InitMode mode, const ClassifierSources& src) {
  AdaptedClassifier c;
  c.init_mode = mode;
  switch (mode) {
    case InitMode::KA_T:
      if (!src.text_table) throw MissingSource("KA_T initialization needs the text table");
      if (src.text_table->rows() == 0) throw ShapeError("KA_T: empty text table");
      c.weights = ag::Var(normalize_rows(*src.text_table), true);
      break;
    case InitMode::KA_V:
      if (!src.image_prototypes) throw MissingSource("KA_V initialization needs image prototypes");
      if (src.image_prototypes->rows() == 0) throw ShapeError("KA_V: empty prototype table");
      c.weights = ag::Var(normalize_rows(*src.image_prototypes), true);
      break;
    case InitMode::Random: {
      if (src.num_classes <= 0 || src.dim <= 0) throw ShapeError("RANDOM: classifier shape must be positive");
      Rng rng(derive_seed(src.seed, {0xc1a5}));
      c.weights = ag::Var(normalize_rows(truncated_normal(src.num_classes, src.dim, nn::kInitStd, rng)), true);
      break;
    }
  }
  return c;
}

Matrix image_prototypes(const Matrix& features, std::span<const int> labels, int num_classes) {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows()) throw ShapeError("prototypes: label count mismatch");
  Matrix sums = Matrix::Zero(num_classes, features.cols());
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) throw LabelOutOfRange("prototypes: label " + std::to_string(y));
    sums.row(y) += features.row(static_cast<Eigen::Index>(i));
    counts[static_cast<std::size_t>(y)] += 1;
  }
  for (int j = 0; j < num_classes; ++j) {
    if (counts[static_cast<std::size_t>(j)] == 0) throw EmptyIdentity("identity " + std::to_string(j) + " has no images");
    sums.row(j) /= counts[static_cast<std::size_t>(j)];
  }
  return sums;
}

Matrix image_prototypes(const ImageEncoder& encoder, ImageSource& images, const DomainDataset& dataset) {
  const auto idx = dataset.indices(Split::Train);
  if (idx.empty()) throw EmptyIdentity(dataset.name + ": no train images");
  auto batch = images.load(dataset, idx);
  const Matrix feats = encode_images_chunked(encoder, batch).features;
  std::vector<int> labels;
  labels.reserve(idx.size());
  for (auto i : idx) labels.push_back(dataset.records[i].identity);
  return image_prototypes(feats, labels, dataset.num_train_identities());
}

void SlowPacedSchedule::validate() const {
  if (!(slow_factor > 0.0)) throw ConfigError("slow_factor must be positive");
  if (!(base_lr > 0.0) || !(warmup_start_lr >= 0.0) || !(stage1_lr > 0.0))
    throw ConfigError("learning rates must be positive");
  if (warmup_epochs < 0 || decay_epoch < 0 || stage2_epochs < 0 || stage1_epochs < 0)
    throw ConfigError("epoch counts must be non-negative");
}

double stage2_learning_rate(const SlowPacedSchedule& s, int domain_index, int epoch) {
  if (domain_index < 1) throw InvalidArgument("domain_index starts at 1");
  if (epoch < 0 || epoch >= s.stage2_epochs)
    throw InvalidEpoch("epoch " + std::to_string(epoch) + " outside [0," + std::to_string(s.stage2_epochs) + ")");
  double lr;
  if (epoch < s.warmup_epochs) {
    lr = s.warmup_epochs > 1
             ? s.warmup_start_lr + (s.base_lr - s.warmup_start_lr) * epoch / static_cast<double>(s.warmup_epochs - 1)
             : s.base_lr;
  } else if (epoch < s.decay_epoch) {
    lr = s.base_lr;
  } else {
    lr = s.base_lr * s.decay_factor;
  }
  return domain_index == 1 ? lr : lr / s.slow_factor;
}

double stage1_learning_rate(const SlowPacedSchedule& s, int epoch) {
  if (epoch < 0 || epoch >= s.stage1_epochs)
    throw InvalidEpoch("epoch " + std::to_string(epoch) + " outside [0," + std::to_string(s.stage1_epochs) + ")");
  return s.stage1_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / s.stage1_epochs));
}

std::string to_string(PromptTuningScope scope) {
  switch (scope) {
    case PromptTuningScope::Both: return "both";
    case PromptTuningScope::Specific: return "specific";
    case PromptTuningScope::Shared: return "shared";
  }
  return "?";
}

PromptTuningScope parse_prompt_scope(const std::string& text) {
  if (text == "both") return PromptTuningScope::Both;
  if (text == "specific") return PromptTuningScope::Specific;
  if (text == "shared") return PromptTuningScope::Shared;
  throw ConfigError("prompt_tuning_scope must be both, specific or shared, got \"" + text + "\"");
}

PromptTuningRoute stage2_prompt_tuning_hook(const StructuredPromptStore& store, int domain_step, bool enabled,
                                            PromptTuningScope scope) {
  PromptTuningRoute route{enabled, scope, {}};
  if (!enabled) return route;
  if (scope != PromptTuningScope::Shared) route.tensors.push_back(store.specific(domain_step));
  if (scope != PromptTuningScope::Specific) route.tensors.push_back(store.shared());
  return route;
}

}  // namespace teata
