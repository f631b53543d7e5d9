#pragma once

#include "teata/data.hpp"
#include "teata/encoders.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace teata {

enum class ProtocolMode { Standard, CC };

std::string to_string(ProtocolMode mode);
ProtocolMode parse_protocol(const std::string& text);  // "STANDARD" | "CC"

/// Gallery items that are junk for a query are removed from its ranking
/// before scoring. STANDARD drops same identity + same camera. CC also drops
/// same identity + same clothing, leaving only cloth-changing matches.
struct RankingProtocol {
  ProtocolMode mode = ProtocolMode::Standard;
  bool same_camera_junk = true;
  bool same_clothes_junk = false;

  static RankingProtocol standard() { return {ProtocolMode::Standard, true, false}; }
  static RankingProtocol cloth_changing() { return {ProtocolMode::CC, true, true}; }
  static RankingProtocol for_state(ClothingState s) {
    return s == ClothingState::CC ? cloth_changing() : standard();
  }
};

struct SampleMeta {
  int identity = 0;
  int camera = 0;
  int clothing_id = 0;
  Split split = Split::Train;
};

struct FeatureSet {
  Matrix features;  // unnormalized, one row per sample
  std::vector<SampleMeta> meta;
};

/// Projected image features for one split, in manifest order.
FeatureSet extract_features(const ImageEncoder& encoder, ImageSource& images, const DomainDataset& dataset,
                            Split split);

struct DomainMetrics {
  std::string domain;
  ProtocolMode protocol = ProtocolMode::Standard;
  ClothingState clothing_state = ClothingState::SC;
  bool seen = true;
  double mAP = 0.0;
  double rank1 = 0.0;
  std::vector<double> cmc;  // cmc[k-1] = match rate within top k
  int dropped_queries = 0;
  int evaluated_queries = 0;
};

/// Cosine-distance ranking with junk removal; ties broken by gallery index.
DomainMetrics rank_and_score(const FeatureSet& query, const FeatureSet& gallery, const RankingProtocol& protocol,
                             int max_rank = 20);

struct GroupAverage {
  double mAP = 0.0;
  double rank1 = 0.0;
  int count = 0;
};

struct EvalReport {
  int step = 0;
  std::vector<DomainMetrics> domains;
  std::optional<GroupAverage> seen_sc;
  std::optional<GroupAverage> seen_cc;
  std::optional<GroupAverage> unseen_sc;
  std::optional<GroupAverage> unseen_cc;

  const DomainMetrics* find(const std::string& domain) const;
};

/// Unweighted means per (seen|unseen) x (SC|CC); empty groups stay absent.
EvalReport aggregate(std::vector<DomainMetrics> domains, int step);

nlohmann::ordered_json to_json(const DomainMetrics& m);
DomainMetrics domain_metrics_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::ordered_json& j);

enum class Metric { MAP, Rank1 };

/// values[t][i] = metric on the i-th seen domain after step t (absent for i > t).
struct ForgettingMatrix {
  std::vector<std::string> domains;
  std::vector<std::vector<std::optional<double>>> values;
  std::vector<double> forgetting;  // F_i = max_t values[t][i] - values[T][i]
};

ForgettingMatrix forgetting_matrix(std::span<const EvalReport> steps, Metric metric);
nlohmann::ordered_json to_json(const ForgettingMatrix& m);

/// Writes one JSON line per sample plus one "prototype" line per
/// (domain, identity) holding the mean feature of that identity's samples.
void export_embeddings(const ImageEncoder& encoder, ImageSource& images, std::span<const DomainDataset> datasets,
                       const std::filesystem::path& out);

}  // namespace teata
