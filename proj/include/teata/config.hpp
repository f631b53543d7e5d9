#pragma once

#include "teata/data.hpp"
#include "teata/encoders.hpp"
#include "teata/eval.hpp"
#include "teata/kap.hpp"
#include "teata/losses.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace teata {

enum class Method { TEATA, SFT, JOINT };

std::string to_string(Method m);
Method parse_method(const std::string& text);  // throws ConfigError

enum class SlowScope { All, ClassifierPrompts };

std::string to_string(SlowScope s);
SlowScope parse_slow_scope(const std::string& text);

struct DomainEntry {
  std::string name;
  ClothingState clothing_state = ClothingState::SC;
  std::filesystem::path root;  // empty: <data.root>/<name>
  std::uint64_t seed = 0;
  int num_identities = 8;
  int images_per_identity = 8;
  int num_cameras = 3;
  double noise_std = 0.05;

  bool operator==(const DomainEntry&) const = default;
};

struct DataSection {
  std::filesystem::path root = "data";
  std::vector<DomainEntry> domains;

  bool operator==(const DataSection&) const = default;
};

struct ModelSection {
  int image_height = 64;
  int image_width = 32;
  int patch_size = 4;
  int vision_width = 48;
  int image_layers = 2;
  int image_heads = 4;
  int text_layers = 2;
  int text_heads = 4;
  int mlp_ratio = 4;
  int embed_dim = 32;
  int token_dim = 32;
  int prompt_pairs = 16;
  // Checkpoint directory whose encoder tensors replace the initial weights.
  std::filesystem::path pretrained;

  ImageEncoderConfig image() const;
  TextEncoderConfig text() const;
  bool operator==(const ModelSection&) const = default;
};

struct TrainSection {
  Method method = Method::TEATA;
  std::uint64_t seed = 0;
  int batch_size = 64;
  int instances_per_identity = 4;
  double lambda1 = 1.0;
  double lambda2 = 0.25;
  double lambda3 = 1.0;
  double epsilon = 0.1;
  double triplet_margin = 0.3;
  double logit_scale = 1.0;
  double weight_decay = 1e-4;
  int stage1_epochs = 120;
  double stage1_lr = 3.5e-4;
  int stage2_epochs = 60;
  double base_lr = 5e-6;
  double warmup_start_lr = 5e-7;
  int warmup_epochs = 10;
  int decay_epoch = 40;
  double decay_factor = 0.1;
  double slow_factor = 10.0;
  SlowScope slow_scope = SlowScope::All;
  InitMode init_mode = InitMode::KA_T;
  bool prompt_tuning = false;
  PromptTuningScope prompt_tuning_scope = PromptTuningScope::Both;
  bool augment = false;
  bool eval_after_each_step = true;
  bool strict_audit = true;

  BatchSpec batch() const { return {batch_size, instances_per_identity}; }
  LossWeights weights() const { return {lambda1, lambda2, lambda3, epsilon, triplet_margin, logit_scale}; }
  SlowPacedSchedule schedule() const;
  bool operator==(const TrainSection&) const = default;
};

struct EvalSection {
  std::vector<DomainEntry> unseen;
  std::string protocol = "auto";  // auto | STANDARD | CC
  bool same_camera_junk = true;
  bool same_clothes_junk = true;  // applies to CC protocol
  std::vector<int> ranks = {1, 5, 10};
  int max_rank = 20;

  /// Protocol for a domain of the given clothing state.
  RankingProtocol protocol_for(ClothingState state) const;
  bool operator==(const EvalSection&) const = default;
};

struct RunConfig {
  DataSection data;
  ModelSection model;
  TrainSection train;
  EvalSection eval;

  /// Cross-field checks; throws ConfigError.
  void validate() const;
  std::filesystem::path domain_root(const DomainEntry& d) const;
  GeneratorParams generator(const DomainEntry& d) const;
  bool operator==(const RunConfig&) const = default;
};

/// Parses TOML text. Missing keys take defaults; unknown keys, wrong types and
/// bad enum values throw ConfigError naming the key path. Each override is
/// "dotted.key=value" with a TOML value (bare words are taken as strings).
RunConfig parse_config(std::string_view toml_text, const std::vector<std::string>& overrides = {});
RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Fully materialized TOML, every default written out.
std::string serialize_config(const RunConfig& config);
std::string config_hash(const RunConfig& config);

}  // namespace teata
