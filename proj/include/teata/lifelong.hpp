#pragma once

// Domain-stream orchestration: two-stage training per domain, the SFT and
// joint-training baselines, checkpointing and per-step evaluation.

#include "teata/checkpoint.hpp"
#include "teata/config.hpp"
#include "teata/eval.hpp"
#include "teata/kap.hpp"
#include "teata/optim.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <vector>

namespace teata {

/// Everything that is trained or carried between steps.
struct ModelState {
  ModelState(const ModelSection& model, bool with_text, std::uint64_t seed);

  ModelSection model;
  ImageEncoder image;
  std::optional<TextEncoder> text;
  std::optional<StructuredPromptStore> prompts;
  std::map<int, AdaptedClassifier> classifiers;
  std::map<int, ag::Var> pre_classifiers;

  /// Every tensor under its checkpoint name, in a fixed order.
  std::vector<std::pair<std::string, ag::Var>> named_tensors() const;
  void round_to_float();

  Checkpoint to_checkpoint(int step, Method method, const std::string& config_hash) const;
  /// Rebuilds modules from the stored dimensions and loads every tensor.
  static ModelState from_checkpoint(const Checkpoint& checkpoint);
};

/// Copies every image_encoder.* / text_encoder.* tensor of `state` from the
/// checkpoint. Throws KeyError for a missing tensor, ShapeError on a mismatch.
/// Returns the number of tensors copied.
int load_pretrained_encoders(ModelState& state, const Checkpoint& checkpoint);

struct Stage1Result {
  std::vector<double> loss_curve;  // mean L_i2t + L_t2i per epoch
  std::vector<double> lr_trace;
  double initial_loss = 0.0;  // on the first epoch's batches, before any update
  double final_loss = 0.0;    // on the same batches, after the last update
};

struct Stage2Result {
  std::vector<double> loss_curve;  // mean total per epoch
  std::map<std::string, std::vector<double>> lr_trace;  // optimizer group -> per-epoch lr
  Matrix frozen_text_table;                             // empty unless TEATA
  Matrix initial_classifier;                            // f^S before the first update
  bool prompt_hook_active = false;
};

struct StepResult {
  int step = 0;
  std::filesystem::path checkpoint;
  EvalReport report;
};

using EventLogger = std::function<void(const nlohmann::ordered_json&)>;

class LifelongTrainer {
 public:
  explicit LifelongTrainer(RunConfig config, std::shared_ptr<AccessAuditor> auditor = nullptr);

  const RunConfig& config() const { return config_; }
  ModelState& state() { return *state_; }
  const ModelState& state() const { return *state_; }
  ImageSource& images() { return images_; }
  const std::shared_ptr<AccessAuditor>& auditor() const { return auditor_; }
  void set_logger(EventLogger logger) { logger_ = std::move(logger); }

  /// Prompt distillation with both encoders frozen. Initializes this step's
  /// prompts if needed.
  Stage1Result run_stage1(const DomainDataset& dataset, int step, int epochs);

  /// Image-encoder training against the adapted classifier, the frozen text
  /// table and the triplet losses. With epochs == 0 only the initialization runs.
  Stage2Result run_stage2(const DomainDataset& dataset, int step, int epochs);

  /// Query/gallery evaluation of the current image encoder.
  EvalReport evaluate(int step, const std::vector<DomainDataset>& seen, const std::vector<DomainDataset>& unseen);

  /// Runs steps first_step..T (1-based). For resuming, restore() the state of
  /// step first_step-1 beforehand. Writes the run directory layout under run_dir.
  std::vector<StepResult> run_plan(const std::vector<DomainDataset>& domains,
                                   const std::vector<DomainDataset>& unseen, const std::filesystem::path& run_dir,
                                   int first_step = 1);

  /// Replaces the model with a checkpoint's and closes the train splits of
  /// the domains it has already consumed.
  void restore(const Checkpoint& checkpoint, const std::vector<DomainDataset>& domains);

 private:
  void log(nlohmann::ordered_json event) const;

  RunConfig config_;
  std::shared_ptr<AccessAuditor> auditor_;
  ImageSource images_;
  std::unique_ptr<ModelState> state_;
  EventLogger logger_;
};

/// Loads (or, when missing, generates) every configured domain.
std::vector<DomainDataset> load_domains(const RunConfig& config, const std::vector<DomainEntry>& entries,
                                        bool generate_missing);

void write_report_files(const std::filesystem::path& dir, const EvalReport& report);
EvalReport read_aggregate(const std::filesystem::path& dir);

}  // namespace teata
