#include "teata/eval.hpp"

#include "teata/errors.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

namespace teata {

using json = nlohmann::ordered_json;

std::string to_string(ProtocolMode mode) { return mode == ProtocolMode::CC ? "CC" : "STANDARD"; }

ProtocolMode parse_protocol(const std::string& text) {
  if (text == "STANDARD") return ProtocolMode::Standard;
  if (text == "CC") return ProtocolMode::CC;
  throw SchemaError("protocol must be STANDARD or CC, got \"" + text + "\"");
}

FeatureSet extract_features(const ImageEncoder& encoder, ImageSource& images, const DomainDataset& dataset,
                            Split split) {
  const auto idx = dataset.indices(split);
  FeatureSet out;
  out.features.resize(0, encoder.config().embed_dim);
  if (idx.empty()) return out;
  constexpr std::size_t kChunk = 64;
  out.features.resize(static_cast<Eigen::Index>(idx.size()), encoder.config().embed_dim);
  for (std::size_t s = 0; s < idx.size(); s += kChunk) {
    const std::size_t n = std::min(kChunk, idx.size() - s);
    auto batch = images.load(dataset, std::span<const std::size_t>(idx.data() + s, n));
    out.features.middleRows(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(n)) =
        encode_images(encoder, batch).features;
  }
  for (auto i : idx) {
    const auto& r = dataset.records[i];
    out.meta.push_back({r.identity, r.camera, r.clothing_id, r.split});
  }
  return out;
}

DomainMetrics rank_and_score(const FeatureSet& query, const FeatureSet& gallery, const RankingProtocol& protocol,
                             int max_rank) {
  if (gallery.features.rows() == 0) throw EmptyGallery("gallery is empty");
  if (query.features.rows() != static_cast<Eigen::Index>(query.meta.size()) ||
      gallery.features.rows() != static_cast<Eigen::Index>(gallery.meta.size()))
    throw ShapeError("rank_and_score: features/metadata size mismatch");
  if (query.features.cols() != gallery.features.cols()) throw ShapeError("rank_and_score: feature width mismatch");
  if (max_rank <= 0) throw InvalidArgument("rank_and_score: max_rank must be positive");

  const Matrix q = normalize_rows(query.features);
  const Matrix g = normalize_rows(gallery.features);
  Matrix dist(q.rows(), g.rows());
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    for (Eigen::Index j = 0; j < g.rows(); ++j) dist(i, j) = 1.0 - q.row(i).dot(g.row(j));

  DomainMetrics m;
  m.protocol = protocol.mode;
  m.cmc.assign(static_cast<std::size_t>(max_rank), 0.0);
  const Eigen::Index ng = g.rows();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(ng));
  double ap_sum = 0.0;

  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const auto& qm = query.meta[static_cast<std::size_t>(i)];
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return dist(i, a) < dist(i, b); });

    int rank = 0, hits = 0, first_hit = -1;
    double precision_sum = 0.0;
    for (auto j : order) {
      const auto& gm = gallery.meta[static_cast<std::size_t>(j)];
      const bool same_id = gm.identity == qm.identity;
      const bool junk = same_id && ((protocol.same_camera_junk && gm.camera == qm.camera) ||
                                    (protocol.same_clothes_junk && gm.clothing_id == qm.clothing_id));
      if (junk) continue;
      ++rank;
      if (same_id) {
        ++hits;
        precision_sum += static_cast<double>(hits) / rank;
        if (first_hit < 0) first_hit = rank;
      }
    }
    if (hits == 0) {
      ++m.dropped_queries;
      continue;
    }
    ++m.evaluated_queries;
    ap_sum += precision_sum / hits;
    for (int k = first_hit; k <= max_rank; ++k) m.cmc[static_cast<std::size_t>(k - 1)] += 1.0;
  }
  if (m.evaluated_queries > 0) {
    m.mAP = ap_sum / m.evaluated_queries;
    for (auto& c : m.cmc) c /= m.evaluated_queries;
    m.rank1 = m.cmc[0];
  }
  return m;
}

const DomainMetrics* EvalReport::find(const std::string& domain) const {
  for (const auto& d : domains)
    if (d.domain == domain) return &d;
  return nullptr;
}

EvalReport aggregate(std::vector<DomainMetrics> domains, int step) {
  EvalReport r;
  r.step = step;
  r.domains = std::move(domains);
  auto group = [&](bool seen, ClothingState state) -> std::optional<GroupAverage> {
    GroupAverage g;
    for (const auto& d : r.domains) {
      if (d.seen != seen || d.clothing_state != state) continue;
      g.mAP += d.mAP;
      g.rank1 += d.rank1;
      ++g.count;
    }
    if (g.count == 0) return std::nullopt;
    g.mAP /= g.count;
    g.rank1 /= g.count;
    return g;
  };
  r.seen_sc = group(true, ClothingState::SC);
  r.seen_cc = group(true, ClothingState::CC);
  r.unseen_sc = group(false, ClothingState::SC);
  r.unseen_cc = group(false, ClothingState::CC);
  return r;
}

json to_json(const DomainMetrics& m) {
  json j;
  j["domain"] = m.domain;
  j["protocol"] = to_string(m.protocol);
  j["mAP"] = m.mAP;
  j["rank1"] = m.rank1;
  j["cmc"] = m.cmc;
  j["dropped_queries"] = m.dropped_queries;
  return j;
}

DomainMetrics domain_metrics_from_json(const json& j) {
  try {
    DomainMetrics m;
    m.domain = j.at("domain").get<std::string>();
    m.protocol = parse_protocol(j.at("protocol").get<std::string>());
    m.mAP = j.at("mAP").get<double>();
    m.rank1 = j.at("rank1").get<double>();
    m.cmc = j.at("cmc").get<std::vector<double>>();
    m.dropped_queries = j.at("dropped_queries").get<int>();
    if (j.contains("clothing_state")) m.clothing_state = parse_clothing_state(j.at("clothing_state").get<std::string>());
    if (j.contains("seen")) m.seen = j.at("seen").get<bool>();
    if (j.contains("evaluated_queries")) m.evaluated_queries = j.at("evaluated_queries").get<int>();
    return m;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("report: ") + e.what());
  }
}

namespace {

json group_json(const std::optional<GroupAverage>& g) {
  if (!g) return nullptr;
  json j;
  j["mAP"] = g->mAP;
  j["rank1"] = g->rank1;
  j["domains"] = g->count;
  return j;
}

}  // namespace

json to_json(const EvalReport& r) {
  json j;
  j["step"] = r.step;
  json groups;
  if (r.seen_sc) groups["seen_sc"] = group_json(r.seen_sc);
  if (r.seen_cc) groups["seen_cc"] = group_json(r.seen_cc);
  if (r.unseen_sc) groups["unseen_sc"] = group_json(r.unseen_sc);
  if (r.unseen_cc) groups["unseen_cc"] = group_json(r.unseen_cc);
  j["averages"] = groups.is_null() ? json::object() : groups;
  json domains = json::array();
  for (const auto& d : r.domains) {
    json dj = to_json(d);
    dj["clothing_state"] = to_string(d.clothing_state);
    dj["seen"] = d.seen;
    dj["evaluated_queries"] = d.evaluated_queries;
    domains.push_back(dj);
  }
  j["domains"] = domains;
  return j;
}

EvalReport eval_report_from_json(const json& j) {
  std::vector<DomainMetrics> domains;
  try {
    for (const auto& d : j.at("domains")) domains.push_back(domain_metrics_from_json(d));
    return aggregate(std::move(domains), j.at("step").get<int>());
  } catch (const json::exception& e) {
    throw SchemaError(std::string("aggregate report: ") + e.what());
  }
}

ForgettingMatrix forgetting_matrix(std::span<const EvalReport> steps, Metric metric) {
  ForgettingMatrix fm;
  for (const auto& r : steps)
    for (const auto& d : r.domains)
      if (d.seen && std::find(fm.domains.begin(), fm.domains.end(), d.domain) == fm.domains.end())
        fm.domains.push_back(d.domain);
  for (const auto& r : steps) {
    std::vector<std::optional<double>> row(fm.domains.size());
    for (std::size_t i = 0; i < fm.domains.size(); ++i)
      if (const auto* d = r.find(fm.domains[i]); d && d->seen) row[i] = metric == Metric::MAP ? d->mAP : d->rank1;
    fm.values.push_back(std::move(row));
  }
  fm.forgetting.assign(fm.domains.size(), 0.0);
  if (fm.values.empty()) return fm;
  const auto& last = fm.values.back();
  for (std::size_t i = 0; i < fm.domains.size(); ++i) {
    std::optional<double> best;
    for (const auto& row : fm.values)
      if (row[i] && (!best || *row[i] > *best)) best = row[i];
    if (best && last[i]) fm.forgetting[i] = *best - *last[i];
  }
  return fm;
}

json to_json(const ForgettingMatrix& m) {
  json j;
  j["domains"] = m.domains;
  json rows = json::array();
  for (const auto& row : m.values) {
    json r = json::array();
    for (const auto& v : row) r.push_back(v ? json(*v) : json(nullptr));
    rows.push_back(r);
  }
  j["matrix"] = rows;
  j["forgetting"] = m.forgetting;
  return j;
}

void export_embeddings(const ImageEncoder& encoder, ImageSource& images, std::span<const DomainDataset> datasets,
                       const std::filesystem::path& out) {
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream file(out, std::ios::binary);
  if (!file) throw IOError("cannot write " + out.string());
  for (const auto& ds : datasets) {
    std::vector<std::size_t> all(ds.records.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::map<int, std::pair<RowVector, int>> sums;
    for (std::size_t s = 0; s < all.size(); s += 64) {
      const std::size_t n = std::min<std::size_t>(64, all.size() - s);
      auto batch = images.load(ds, std::span<const std::size_t>(all.data() + s, n));
      const Matrix feats = encode_images(encoder, batch).features;
      for (std::size_t k = 0; k < n; ++k) {
        const auto& r = ds.records[s + k];
        const RowVector f = feats.row(static_cast<Eigen::Index>(k));
        json j;
        j["domain"] = ds.name;
        j["identity"] = r.identity;
        j["clothing_id"] = r.clothing_id;
        j["split"] = to_string(r.split);
        j["prototype"] = false;
        j["feature"] = std::vector<double>(f.data(), f.data() + f.size());
        file << j.dump() << "\n";
        auto [it, inserted] = sums.try_emplace(r.identity, RowVector::Zero(f.size()), 0);
        it->second.first += f;
        it->second.second += 1;
      }
    }
    for (const auto& [id, acc] : sums) {
      const RowVector mean = acc.first / acc.second;
      json j;
      j["domain"] = ds.name;
      j["identity"] = id;
      j["clothing_id"] = nullptr;
      j["split"] = nullptr;
      j["prototype"] = true;
      j["feature"] = std::vector<double>(mean.data(), mean.data() + mean.size());
      file << j.dump() << "\n";
    }
  }
  if (!file) throw IOError("failed writing " + out.string());
}

}  // namespace teata
