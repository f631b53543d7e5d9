#pragma once

// Exhaustive ranking reference: explicit cosine loops, selection sort on
// (distance, gallery index), junk filtering, then per-rank precision.

#include "teata/eval.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace teata::testing {

struct OracleResult {
  double mAP = 0.0;
  std::vector<double> cmc;
  int dropped = 0;
};

inline OracleResult oracle_rank(const FeatureSet& q, const FeatureSet& g, const RankingProtocol& p, int max_rank) {
  OracleResult out;
  out.cmc.assign(static_cast<std::size_t>(max_rank), 0.0);
  const auto nq = q.features.rows(), ng = g.features.rows(), d = q.features.cols();
  int kept = 0;
  double ap_total = 0.0;
  for (Eigen::Index i = 0; i < nq; ++i) {
    std::vector<double> dist(static_cast<std::size_t>(ng));
    for (Eigen::Index j = 0; j < ng; ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (Eigen::Index c = 0; c < d; ++c) {
        dot += q.features(i, c) * g.features(j, c);
        na += q.features(i, c) * q.features(i, c);
        nb += g.features(j, c) * g.features(j, c);
      }
      dist[static_cast<std::size_t>(j)] = 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
    }
    std::vector<std::size_t> order;
    std::vector<bool> used(static_cast<std::size_t>(ng), false);
    for (Eigen::Index r = 0; r < ng; ++r) {
      std::size_t best = 0;
      bool found = false;
      for (std::size_t j = 0; j < static_cast<std::size_t>(ng); ++j) {
        if (used[j]) continue;
        if (!found || dist[j] < dist[best]) {
          best = j;
          found = true;
        }
      }
      used[best] = true;
      order.push_back(best);
    }
    const auto& qm = q.meta[static_cast<std::size_t>(i)];
    std::vector<bool> relevant;
    for (auto j : order) {
      const auto& gm = g.meta[j];
      const bool same = gm.identity == qm.identity;
      const bool junk = same && ((p.same_camera_junk && gm.camera == qm.camera) ||
                                 (p.same_clothes_junk && gm.clothing_id == qm.clothing_id));
      if (!junk) relevant.push_back(same);
    }
    int total_rel = 0;
    for (bool r : relevant) total_rel += r;
    if (total_rel == 0) {
      ++out.dropped;
      continue;
    }
    ++kept;
    double ap = 0.0;
    for (std::size_t k = 0; k < relevant.size(); ++k) {
      if (!relevant[k]) continue;
      int hits_so_far = 0;
      for (std::size_t m = 0; m <= k; ++m) hits_so_far += relevant[m];
      ap += static_cast<double>(hits_so_far) / static_cast<double>(k + 1);
    }
    ap_total += ap / total_rel;
    for (int k = 1; k <= max_rank; ++k) {
      bool any = false;
      for (std::size_t m = 0; m < relevant.size() && m < static_cast<std::size_t>(k); ++m) any = any || relevant[m];
      if (any) out.cmc[static_cast<std::size_t>(k - 1)] += 1.0;
    }
  }
  if (kept > 0) {
    out.mAP = ap_total / kept;
    for (auto& c : out.cmc) c /= kept;
  }
  return out;
}

// Random retrieval instance with small identity/camera/clothing alphabets so
// that junk rules fire often. Features are quantized to provoke exact ties.
// Gaussian features; about a quarter of the gallery rows repeat an earlier
// row, some scaled by a power of two, so exact distance ties occur.
inline std::pair<FeatureSet, FeatureSet> random_instance(std::mt19937_64& rng, int nq, int ng, int d) {
  std::uniform_int_distribution<int> id(0, 5), cam(0, 2), cloth(0, 2), pow2(0, 2);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution repeat(0.25);
  auto make = [&](int n, bool ties) {
    FeatureSet s;
    s.features.resize(n, d);
    for (int i = 0; i < n; ++i) {
      if (ties && i > 0 && repeat(rng)) {
        const int src = std::uniform_int_distribution<int>(0, i - 1)(rng);
        s.features.row(i) = s.features.row(src) * static_cast<double>(1 << pow2(rng));
      } else {
        for (int c = 0; c < d; ++c) s.features(i, c) = normal(rng);
      }
      const int who = id(rng);
      s.meta.push_back({who, cam(rng), who * 3 + cloth(rng), Split::Query});
    }
    return s;
  };
  FeatureSet q = make(nq, false);
  FeatureSet g = make(ng, true);
  return {std::move(q), std::move(g)};
}

}  // namespace teata::testing
