#pragma once

#include "teata/encoders.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace teata {

enum class ClothingState { SC, CC };
enum class Split { Train, Query, Gallery };

std::string to_string(ClothingState s);
std::string to_string(Split s);
ClothingState parse_clothing_state(const std::string& text);  // throws SchemaError
Split parse_split(const std::string& text);                   // throws SchemaError

struct SampleRecord {
  std::string image_path;  // relative to the dataset root (absolute for merged sets)
  int identity = 0;
  int camera = 0;
  int clothing_id = 0;
  Split split = Split::Train;
};

struct DomainDataset {
  std::string name;
  ClothingState clothing_state = ClothingState::SC;
  int num_identities = 0;
  std::vector<SampleRecord> records;
  int image_height = 0;
  int image_width = 0;
  std::filesystem::path root;

  std::vector<std::size_t> indices(Split split) const;
  /// Train labels are 0..num_train_identities()-1.
  int num_train_identities() const;
};

/// Reads meta.json + manifest.jsonl, validates every invariant, and relabels
/// identities contiguously (train identities first, in ascending original id).
DomainDataset load_domain(const std::filesystem::path& root);

/// Writes meta.json and manifest.jsonl for `dataset` under dataset.root.
void write_domain_metadata(const DomainDataset& dataset);

struct GeneratorParams {
  std::string name = "domain";
  std::uint64_t seed = 0;
  int num_identities = 8;
  int images_per_identity = 8;
  ClothingState clothing_state = ClothingState::SC;
  int num_cameras = 3;
  double noise_std = 0.05;
  int image_height = 64;
  int image_width = 32;
};

/// Renders a synthetic domain to `root` and returns the loaded dataset.
///
/// Upper half: a per-identity grid of colored blocks that never changes.
/// Lower half: a per-outfit colored pattern; SC identities wear one outfit,
/// CC identities cycle through two or three. Each camera applies a fixed
/// color tint, then Gaussian noise is added. Half of each identity's images
/// go to train; the rest split into query/gallery so that every query has a
/// gallery match on another camera (and, for CC, in another outfit).
DomainDataset generate_synthetic_domain(const GeneratorParams& params, const std::filesystem::path& root);

/// Concatenates train splits with per-domain identity offsets (Joint-Train).
/// Test splits are dropped; image paths become absolute.
DomainDataset merge_train_splits(std::span<const DomainDataset> domains, const std::string& name);

struct BatchSpec {
  int batch_size = 64;
  int instances_per_identity = 4;

  void validate() const;
  int identities_per_batch() const { return batch_size / instances_per_identity; }
};

struct Batch {
  std::vector<std::size_t> record_indices;
  std::vector<int> labels;
};

/// One epoch of identity-balanced batches: every batch holds P distinct
/// identities with K images each (drawn with replacement when an identity
/// has fewer than K). Every train image appears at least once per epoch.
/// Deterministic in (seed, epoch).
std::vector<Batch> sample_pk_batches(const DomainDataset& dataset, const BatchSpec& spec, std::uint64_t seed,
                                     int epoch);

/// Records which (domain, split) pairs were read and flags reads of train
/// splits whose step has completed.
class AccessAuditor {
 public:
  explicit AccessAuditor(bool strict = true) : strict_(strict) {}

  void record(const std::string& domain, Split split, std::size_t count);
  void close_train(const std::string& domain) { closed_.insert(domain); }
  bool is_closed(const std::string& domain) const { return closed_.count(domain) != 0; }

  std::size_t reads(const std::string& domain, Split split) const;
  /// Reads of a train split after its domain was closed.
  std::size_t violations() const { return violations_; }

 private:
  bool strict_;
  std::set<std::string> closed_;
  std::map<std::pair<std::string, Split>, std::size_t> reads_;
  std::size_t violations_ = 0;
};

/// Decodes (and caches) images, reporting every access to an optional auditor.
class ImageSource {
 public:
  explicit ImageSource(std::shared_ptr<AccessAuditor> auditor = nullptr) : auditor_(std::move(auditor)) {}

  ImageBatch load(const DomainDataset& dataset, std::span<const std::size_t> record_indices);
  const std::shared_ptr<AccessAuditor>& auditor() const { return auditor_; }

 private:
  std::shared_ptr<AccessAuditor> auditor_;
  std::map<std::string, std::vector<std::optional<RowVector>>> cache_;
};

struct AugmentConfig {
  bool enabled = false;
  double flip_probability = 0.5;
  int padding = 2;
  double erase_probability = 0.5;
};

/// Random horizontal flip, zero-pad + random crop, and random erasing, per image.
void augment(ImageBatch& batch, const AugmentConfig& config, Rng& rng);

// PNG helpers (8-bit RGB).
void write_png(const std::filesystem::path& path, int height, int width, std::span<const std::uint8_t> rgb);
std::vector<std::uint8_t> read_png(const std::filesystem::path& path, int& height, int& width);

}  // namespace teata
