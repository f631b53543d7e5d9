#include "rank_oracle.hpp"
#include "teata/errors.hpp"
#include "teata/eval.hpp"
#include "testing.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace teata;
using teata::testing::oracle_rank;
using teata::testing::random_instance;
using teata::testing::TempDir;

namespace {

FeatureSet make(std::vector<std::vector<double>> rows, std::vector<SampleMeta> meta) {
  FeatureSet s;
  s.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      s.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  s.meta = std::move(meta);
  return s;
}

}  // namespace

TEST(RankAndScore, HandComputedAp) {
  // gallery by distance: match, non-match, match
  const auto q = make({{1, 0}}, {{0, 0, 0}});
  const auto g = make({{1, 0.1}, {1, 0.5}, {1, 1.5}}, {{0, 1, 0}, {1, 1, 5}, {0, 2, 0}});
  const auto m = rank_and_score(q, g, RankingProtocol::standard(), 3);
  EXPECT_NEAR(m.mAP, (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(m.rank1, 1.0);
  EXPECT_EQ(m.cmc, (std::vector<double>{1, 1, 1}));
}

TEST(RankAndScore, QueryWithOnlySameCameraMatchesIsDropped) {
  const auto q = make({{1, 0}, {0, 1}}, {{0, 0, 0}, {1, 0, 3}});
  const auto g = make({{1, 0}, {0, 1}}, {{0, 0, 0}, {1, 1, 3}});
  const auto m = rank_and_score(q, g, RankingProtocol::standard());
  EXPECT_EQ(m.dropped_queries, 1);
  EXPECT_EQ(m.evaluated_queries, 1);
  EXPECT_DOUBLE_EQ(m.mAP, 1.0);
}

TEST(RankAndScore, CcProtocolDropsSameClothes) {
  const auto q = make({{1, 0}}, {{0, 0, 0}});
  const auto g = make({{1, 0}, {0.5, 0.5}, {0, 1}}, {{0, 1, 0}, {1, 1, 9}, {0, 2, 1}});
  EXPECT_DOUBLE_EQ(rank_and_score(q, g, RankingProtocol::standard()).rank1, 1.0);
  const auto cc = rank_and_score(q, g, RankingProtocol::cloth_changing());
  EXPECT_DOUBLE_EQ(cc.rank1, 0.0);
  EXPECT_NEAR(cc.mAP, 0.5, 1e-12);
  EXPECT_EQ(cc.protocol, ProtocolMode::CC);
}

TEST(RankAndScore, TiesBrokenByGalleryIndex) {
  const auto q = make({{1, 0}}, {{0, 0, 0}});
  const auto g1 = make({{2, 0}, {3, 0}}, {{1, 1, 1}, {0, 1, 0}});
  const auto g2 = make({{3, 0}, {2, 0}}, {{0, 1, 0}, {1, 1, 1}});
  EXPECT_DOUBLE_EQ(rank_and_score(q, g1, RankingProtocol::standard()).rank1, 0.0);
  EXPECT_DOUBLE_EQ(rank_and_score(q, g2, RankingProtocol::standard()).rank1, 1.0);
}

TEST(RankAndScore, EmptyGallery) {
  const auto q = make({{1, 0}}, {{0, 0, 0}});
  FeatureSet g;
  g.features.resize(0, 2);
  EXPECT_THROW(rank_and_score(q, g, RankingProtocol::standard()), EmptyGallery);
}

TEST(RankAndScore, MatchesBruteForceOracle) {
  std::mt19937_64 rng(123);
  for (int t = 0; t < 50; ++t) {
    auto [q, g] = random_instance(rng, 20, 50, 4);
    for (auto proto : {RankingProtocol::standard(), RankingProtocol::cloth_changing()}) {
      const auto m = rank_and_score(q, g, proto, 20);
      const auto o = oracle_rank(q, g, proto, 20);
      EXPECT_NEAR(m.mAP, o.mAP, 1e-9);
      EXPECT_EQ(m.dropped_queries, o.dropped);
      for (int k = 0; k < 20; ++k) EXPECT_NEAR(m.cmc[static_cast<std::size_t>(k)], o.cmc[static_cast<std::size_t>(k)], 1e-9);
    }
  }
}

TEST(RankAndScore, PropertiesScaleInvarianceJunkAndMonotoneCmc) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1, 1);
  auto [q, g] = random_instance(rng, 15, 40, 5);
  for (Eigen::Index i = 0; i < q.features.size(); ++i) q.features.data()[i] += 0.01 * u(rng);
  for (Eigen::Index i = 0; i < g.features.size(); ++i) g.features.data()[i] += 0.01 * u(rng);
  const auto base = rank_and_score(q, g, RankingProtocol::standard());
  for (std::size_t k = 1; k < base.cmc.size(); ++k) EXPECT_GE(base.cmc[k], base.cmc[k - 1]);
  EXPECT_GE(base.mAP, 0.0);
  EXPECT_LE(base.mAP, 1.0);

  FeatureSet scaled = g;
  scaled.features *= 3.7;
  const auto s = rank_and_score(q, scaled, RankingProtocol::standard());
  EXPECT_NEAR(s.mAP, base.mAP, 1e-12);
  EXPECT_EQ(s.cmc, base.cmc);

  // a gallery copy of query 0 on its own camera is junk for it
  FeatureSet g2 = g;
  g2.features.conservativeResize(g.features.rows() + 1, Eigen::NoChange);
  g2.features.row(g.features.rows()) = q.features.row(0);
  g2.meta.push_back(q.meta[0]);
  FeatureSet q0;
  q0.features = q.features.topRows(1);
  q0.meta = {q.meta[0]};
  const auto before = rank_and_score(q0, g, RankingProtocol::standard());
  const auto after = rank_and_score(q0, g2, RankingProtocol::standard());
  EXPECT_NEAR(before.mAP, after.mAP, 1e-12);
  EXPECT_EQ(before.cmc, after.cmc);
}

TEST(Aggregate, GroupMeansAndAbsentGroups) {
  std::vector<DomainMetrics> ds(3);
  ds[0].domain = "a";
  ds[0].mAP = 0.8;
  ds[0].rank1 = 0.9;
  ds[1].domain = "b";
  ds[1].mAP = 0.6;
  ds[1].rank1 = 0.5;
  ds[2].domain = "c";
  ds[2].clothing_state = ClothingState::CC;
  ds[2].seen = false;
  ds[2].mAP = 0.3;
  const auto r = aggregate(ds, 2);
  ASSERT_TRUE(r.seen_sc);
  EXPECT_NEAR(r.seen_sc->mAP, 0.7, 1e-12);
  EXPECT_NEAR(r.seen_sc->rank1, 0.7, 1e-12);
  EXPECT_FALSE(r.seen_cc);
  EXPECT_FALSE(r.unseen_sc);
  ASSERT_TRUE(r.unseen_cc);
  EXPECT_DOUBLE_EQ(r.unseen_cc->mAP, 0.3);
}

TEST(ReportJson, DomainSchemaAndRoundTrip) {
  DomainMetrics m;
  m.domain = "x";
  m.protocol = ProtocolMode::CC;
  m.mAP = 0.25;
  m.rank1 = 0.5;
  m.cmc = {0.5, 0.75};
  m.dropped_queries = 2;
  const auto j = to_json(m);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"domain", "protocol", "mAP", "rank1", "cmc", "dropped_queries"}));
  EXPECT_EQ(j["protocol"], "CC");
  const auto back = domain_metrics_from_json(j);
  EXPECT_EQ(back.cmc, m.cmc);
  EXPECT_EQ(back.dropped_queries, 2);

  const auto r = aggregate({m}, 3);
  const auto r2 = eval_report_from_json(to_json(r));
  EXPECT_EQ(r2.step, 3);
  ASSERT_EQ(r2.domains.size(), 1u);
  EXPECT_EQ(r2.domains[0].clothing_state, ClothingState::SC);
  EXPECT_DOUBLE_EQ(r2.seen_sc->mAP, 0.25);
}

TEST(Forgetting, MatrixAndDerivedForgetting) {
  auto report = [](int step, std::vector<std::pair<std::string, double>> vals) {
    std::vector<DomainMetrics> ds;
    for (auto& [n, v] : vals) {
      DomainMetrics m;
      m.domain = n;
      m.mAP = v;
      m.rank1 = v / 2;
      ds.push_back(m);
    }
    return aggregate(ds, step);
  };
  const std::vector<EvalReport> one{report(1, {{"a", 0.9}})};
  const auto f1 = forgetting_matrix(one, Metric::MAP);
  EXPECT_EQ(f1.forgetting, (std::vector<double>{0.0}));

  const std::vector<EvalReport> steps{report(1, {{"a", 0.9}}), report(2, {{"a", 0.7}, {"b", 0.8}}),
                                      report(3, {{"a", 0.75}, {"b", 0.6}, {"c", 0.5}})};
  const auto f = forgetting_matrix(steps, Metric::MAP);
  EXPECT_EQ(f.domains, (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_FALSE(f.values[0][1].has_value());
  EXPECT_DOUBLE_EQ(*f.values[1][0], 0.7);
  EXPECT_NEAR(f.forgetting[0], 0.15, 1e-12);
  EXPECT_NEAR(f.forgetting[1], 0.2, 1e-12);
  EXPECT_DOUBLE_EQ(f.forgetting[2], 0.0);
  EXPECT_NEAR(forgetting_matrix(steps, Metric::Rank1).forgetting[0], 0.075, 1e-12);
}

TEST(ExportEmbeddings, CountsAndWidth) {
  TempDir dir("export");
  GeneratorParams p;
  p.num_identities = 2;
  p.images_per_identity = 5;
  p.name = "a";
  std::vector<DomainDataset> ds{generate_synthetic_domain(p, dir / "a")};
  p.name = "b";
  p.seed = 3;
  ds.push_back(generate_synthetic_domain(p, dir / "b"));
  ImageEncoder enc(ImageEncoderConfig{}, 1);
  ImageSource src;
  export_embeddings(enc, src, ds, dir / "e.jsonl");
  std::ifstream in(dir / "e.jsonl");
  int samples = 0, protos = 0;
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["feature"].size(), 32u);
    (j["prototype"].get<bool>() ? protos : samples) += 1;
  }
  EXPECT_EQ(samples, 20);
  EXPECT_EQ(protos, 4);
}

TEST(ExtractFeatures, RowsFollowSplitAndAreDeterministic) {
  TempDir dir("extract");
  GeneratorParams p;
  p.num_identities = 3;
  p.images_per_identity = 6;
  const auto ds = generate_synthetic_domain(p, dir.path());
  ImageEncoder enc(ImageEncoderConfig{}, 2);
  ImageSource src;
  const auto a = extract_features(enc, src, ds, Split::Query);
  const auto b = extract_features(enc, src, ds, Split::Query);
  EXPECT_EQ(a.features.rows(), static_cast<Eigen::Index>(ds.indices(Split::Query).size()));
  EXPECT_EQ(a.features, b.features);
}
