#include "fixtures.hpp"
#include "teata/errors.hpp"
#include "testing.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace teata;
using teata::testing::param_hash;
using teata::testing::TempDir;
using teata::testing::toy_config;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(Lifelong, Stage1FreezesEncoders) {
  TempDir dir("ll_s1");
  const auto cfg = toy_config(dir.path(), 1);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  const auto img = param_hash(t.state(), "image_encoder");
  const auto txt = param_hash(t.state(), "text_encoder");
  const auto prm_before = t.run_stage1(domains[0], 1, 0);
  EXPECT_TRUE(prm_before.loss_curve.empty());
  const auto prm = param_hash(t.state(), "prompts");
  const auto r = t.run_stage1(domains[0], 1, 3);
  ASSERT_EQ(r.loss_curve.size(), 3u);
  EXPECT_EQ(param_hash(t.state(), "image_encoder"), img);
  EXPECT_EQ(param_hash(t.state(), "text_encoder"), txt);
  EXPECT_NE(param_hash(t.state(), "prompts"), prm);
  for (std::size_t e = 1; e < r.lr_trace.size(); ++e) EXPECT_LT(r.lr_trace[e], r.lr_trace[e - 1]);
}

TEST(Lifelong, Stage1LowersLossOnInformativeFeatures) {
  TempDir dir("ll_s1_fit");
  auto cfg = toy_config(dir.path(), 1);
  cfg.train.stage2_epochs = 8;
  cfg.train.decay_epoch = 8;
  cfg.train.stage1_lr = 3.5e-4;
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  t.run_stage1(domains[0], 1, 0);
  t.run_stage2(domains[0], 1, 8);
  const auto r = t.run_stage1(domains[0], 1, 5);
  EXPECT_LT(r.final_loss, r.initial_loss);
}

TEST(Lifelong, Stage2TrainsImageOnlyAndStartsFromTextTable) {
  TempDir dir("ll_s2");
  const auto cfg = toy_config(dir.path(), 1);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  t.run_stage1(domains[0], 1, 2);
  const auto img = param_hash(t.state(), "image_encoder");
  const auto txt = param_hash(t.state(), "text_encoder");
  const auto prm = param_hash(t.state(), "prompts");
  const auto r = t.run_stage2(domains[0], 1, 3);
  EXPECT_NE(param_hash(t.state(), "image_encoder"), img);
  EXPECT_EQ(param_hash(t.state(), "text_encoder"), txt);
  EXPECT_EQ(param_hash(t.state(), "prompts"), prm);
  EXPECT_FALSE(r.prompt_hook_active);
  ASSERT_EQ(r.frozen_text_table.rows(), 8);
  EXPECT_EQ(r.initial_classifier, normalize_rows(r.frozen_text_table));
  for (const auto& v : r.loss_curve) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(t.state().classifiers.at(1).weights.rows(), 8);
}

TEST(Lifelong, Stage2ImprovesTrainRetrieval) {
  TempDir dir("ll_fit");
  const auto cfg = toy_config(dir.path(), 1);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  ImageSource src;
  auto train_map = [&] {
    const auto f = extract_features(t.state().image, src, domains[0], Split::Train);
    return rank_and_score(f, f, RankingProtocol::standard()).mAP;
  };
  const double before = train_map();
  t.run_stage1(domains[0], 1, 3);
  t.run_stage2(domains[0], 1, 8);
  EXPECT_GT(train_map(), before);
}

TEST(Lifelong, SecondDomainLearningRateIsTenTimesSlower) {
  TempDir dir("ll_lr");
  const auto cfg = toy_config(dir.path(), 2);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  t.run_stage1(domains[0], 1, 1);
  const auto a = t.run_stage2(domains[0], 1, 3);
  t.run_stage1(domains[1], 2, 1);
  const auto b = t.run_stage2(domains[1], 2, 3);
  for (const auto& [group, trace] : a.lr_trace) {
    ASSERT_EQ(b.lr_trace.at(group).size(), trace.size());
    for (std::size_t e = 0; e < trace.size(); ++e) EXPECT_EQ(b.lr_trace.at(group)[e], trace[e] / 10.0) << group;
  }
}

TEST(Lifelong, KaVStartsFromPrototypes) {
  TempDir dir("ll_kav");
  auto cfg = toy_config(dir.path(), 1);
  cfg.train.init_mode = InitMode::KA_V;
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  t.run_stage1(domains[0], 1, 1);
  ImageSource src;
  const Matrix protos = image_prototypes(t.state().image, src, domains[0]);
  const auto r = t.run_stage2(domains[0], 1, 0);
  EXPECT_LT((r.initial_classifier - normalize_rows(protos)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Lifelong, PromptHookUpdatesPrompts) {
  TempDir dir("ll_hook");
  auto cfg = toy_config(dir.path(), 1);
  cfg.train.prompt_tuning = true;
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  t.run_stage1(domains[0], 1, 1);
  const auto prm = param_hash(t.state(), "prompts");
  const auto txt = param_hash(t.state(), "text_encoder");
  const auto r = t.run_stage2(domains[0], 1, 2);
  EXPECT_TRUE(r.prompt_hook_active);
  EXPECT_NE(param_hash(t.state(), "prompts"), prm);
  EXPECT_EQ(param_hash(t.state(), "text_encoder"), txt);
}

TEST(Lifelong, PlanWritesLayoutAndNeverRereadsTrainSplits) {
  TempDir dir("ll_plan");
  const auto cfg = toy_config(dir / "data", 2);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  auto auditor = std::make_shared<AccessAuditor>(true);
  LifelongTrainer t(cfg, auditor);
  const auto results = t.run_plan(domains, {}, dir / "run");
  ASSERT_EQ(results.size(), 2u);
  EXPECT_EQ(auditor->violations(), 0u);
  EXPECT_TRUE(fs::exists(dir / "run/config.toml"));
  EXPECT_TRUE(fs::exists(dir / "run/log.jsonl"));
  for (const char* f : {"step1/checkpoint/checkpoint.json", "step2/checkpoint/tensors.bin", "step2/reports/d1.json",
                        "step2/reports/d2.json", "step2/reports/aggregate.json"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  const auto& last = results.back().report;
  ASSERT_TRUE(last.seen_sc && last.seen_cc);
  EXPECT_EQ(last.find("d2")->protocol, ProtocolMode::CC);
  EXPECT_EQ(read_aggregate(dir / "run/step2/reports").step, 2);
  EXPECT_THROW(read_aggregate(dir / "run/step9/reports"), MissingReports);

  // after the plan both train splits are closed
  EXPECT_THROW(t.images().load(domains[0], domains[0].indices(Split::Train)), DataLeakError);
}

TEST(Lifelong, SftHasNoPromptsAndJointSeesAllIdentities) {
  TempDir dir("ll_base");
  auto cfg = toy_config(dir / "data", 2);
  cfg.train.method = Method::SFT;
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer sft(cfg);
  sft.run_plan(domains, {}, dir / "sft");
  for (const auto& [name, v] : sft.state().named_tensors()) {
    EXPECT_EQ(name.find("prompts"), std::string::npos) << name;
    EXPECT_EQ(name.find("text_encoder"), std::string::npos) << name;
  }
  EXPECT_EQ(sft.state().classifiers.size(), 2u);

  cfg.train.method = Method::JOINT;
  LifelongTrainer joint(cfg);
  const auto r = joint.run_plan(domains, {}, dir / "joint");
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(joint.state().classifiers.at(1).weights.rows(), 16);
  EXPECT_EQ(r[0].report.domains.size(), 2u);
}

TEST(Lifelong, ResumeMatchesUninterruptedRun) {
  TempDir dir("ll_resume");
  const auto cfg = toy_config(dir / "data", 2);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer full(cfg);
  const auto a = full.run_plan(domains, {}, dir / "full");

  LifelongTrainer first(cfg);
  const std::vector<DomainDataset> one(domains.begin(), domains.begin() + 1);
  first.run_plan(one, {}, dir / "part");
  LifelongTrainer resumed(cfg);
  resumed.restore(load_checkpoint(dir / "part/step1/checkpoint"), domains);
  const auto b = resumed.run_plan(domains, {}, dir / "part", 2);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(slurp(dir / "full/step2/checkpoint/tensors.bin"), slurp(dir / "part/step2/checkpoint/tensors.bin"));
  for (const auto& m : a.back().report.domains) EXPECT_NEAR(b[0].report.find(m.domain)->mAP, m.mAP, 1e-12);
}

TEST(Lifelong, CheckpointRoundTripRestoresEveryTensor) {
  TempDir dir("ll_ck");
  const auto cfg = toy_config(dir / "data", 1);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  t.run_plan(domains, {}, dir / "run");
  const auto ck = load_checkpoint(dir / "run/step1/checkpoint");
  const auto back = ModelState::from_checkpoint(ck);
  EXPECT_EQ(param_hash(back, ""), param_hash(t.state(), ""));
  auto broken = ck;
  broken.tensors.erase(broken.tensors.begin());
  EXPECT_THROW(ModelState::from_checkpoint(broken), IntegrityError);
  LifelongTrainer sft([&] {
    auto c = cfg;
    c.train.method = Method::SFT;
    return c;
  }());
  EXPECT_THROW(sft.restore(ck, domains), Error);
}

TEST(Lifelong, PretrainedEncodersAreLoaded) {
  TempDir dir("ll_pre");
  auto cfg = toy_config(dir / "data", 1);
  cfg.train.stage1_epochs = 1;
  cfg.train.stage2_epochs = 1;
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer source(cfg);
  source.run_plan(domains, {}, dir / "src");

  auto other = cfg;
  other.train.seed = 7;
  other.model.pretrained = dir / "src/step1/checkpoint";
  LifelongTrainer t(other);
  EXPECT_EQ(param_hash(t.state(), "image_encoder"), param_hash(source.state(), "image_encoder"));
  EXPECT_EQ(param_hash(t.state(), "text_encoder"), param_hash(source.state(), "text_encoder"));
  other.model.pretrained.clear();
  EXPECT_NE(param_hash(LifelongTrainer(other).state(), "image_encoder"), param_hash(source.state(), "image_encoder"));

  auto ck = load_checkpoint(dir / "src/step1/checkpoint");
  std::erase_if(ck.tensors, [](const NamedTensor& n) { return n.name.starts_with("text_encoder."); });
  LifelongTrainer fresh(other);
  EXPECT_THROW(load_pretrained_encoders(fresh.state(), ck), KeyError);
}

TEST(Lifelong, LoadDomainsChecksClothingState) {
  TempDir dir("ll_state");
  auto cfg = toy_config(dir.path(), 1);
  load_domains(cfg, cfg.data.domains, true);
  cfg.data.domains[0].clothing_state = ClothingState::CC;
  EXPECT_THROW(load_domains(cfg, cfg.data.domains, false), ProtocolError);
  cfg.data.domains[0].name = "absent";
  EXPECT_THROW(load_domains(cfg, cfg.data.domains, false), MissingFile);
}
