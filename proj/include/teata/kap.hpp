#pragma once

// Knowledge adaptation and projection: the adapted classifier used by the
// stage-2 identity loss, its initializers, identity prototypes, and the
// slow-paced learning-rate plan.

#include "teata/data.hpp"
#include "teata/prompts.hpp"

#include <optional>
#include <span>
#include <string>

namespace teata {

enum class InitMode { KA_T, KA_V, Random };

std::string to_string(InitMode mode);
InitMode parse_init_mode(const std::string& text);

struct AdaptedClassifier {
  ag::Var weights;  // N x d, trained as a free tensor
  InitMode init_mode = InitMode::KA_T;
  bool trainable = true;

  Eigen::Index num_classes() const { return weights.rows(); }
};

struct ClassifierSources {
  const Matrix* text_table = nullptr;        // KA_T
  const Matrix* image_prototypes = nullptr;  // KA_V
  Eigen::Index num_classes = 0;              // RANDOM
  Eigen::Index dim = 0;                      // RANDOM
  std::uint64_t seed = 0;                    // RANDOM
};

/// KA_T: normalized text rows. KA_V: normalized prototypes.
/// RANDOM: truncated normal (std 0.02), then row-normalized.
AdaptedClassifier init_classifier(InitMode mode, const ClassifierSources& sources);

/// Row j = mean of the rows of `features` labelled j.
Matrix image_prototypes(const Matrix& features, std::span<const int> labels, int num_classes);

/// Prototypes from the given (previous-step) encoder over every train image.
Matrix image_prototypes(const ImageEncoder& encoder, ImageSource& images, const DomainDataset& dataset);

struct SlowPacedSchedule {
  double slow_factor = 10.0;
  // stage 2, first domain
  double warmup_start_lr = 5e-7;
  double base_lr = 5e-6;
  int warmup_epochs = 10;
  int decay_epoch = 40;
  double decay_factor = 0.1;
  int stage2_epochs = 60;
  // stage 1
  double stage1_lr = 3.5e-4;
  int stage1_epochs = 120;

  void validate() const;
};

/// Domain 1: linear warmup warmup_start_lr -> base_lr over the first
/// warmup_epochs epochs, base_lr until decay_epoch, then base_lr * decay_factor.
/// Later domains: the same value divided by slow_factor.
double stage2_learning_rate(const SlowPacedSchedule& schedule, int domain_index, int epoch);

/// Cosine decay from stage1_lr over stage1_epochs.
double stage1_learning_rate(const SlowPacedSchedule& schedule, int epoch);

enum class PromptTuningScope { Both, Specific, Shared };

std::string to_string(PromptTuningScope scope);
PromptTuningScope parse_prompt_scope(const std::string& text);

/// Prompt tensors that receive stage-2 updates. Empty when disabled.
struct PromptTuningRoute {
  bool enabled = false;
  PromptTuningScope scope = PromptTuningScope::Both;
  std::vector<ag::Var> tensors;
};

PromptTuningRoute stage2_prompt_tuning_hook(const StructuredPromptStore& store, int domain_step, bool enabled,
                                            PromptTuningScope scope = PromptTuningScope::Both);

}  // namespace teata
