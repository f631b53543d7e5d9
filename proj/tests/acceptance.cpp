#include "fixtures.hpp"
#include "loss_oracles.hpp"
#include "rank_oracle.hpp"
#include "teata/errors.hpp"
#include "teata/losses.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

using namespace teata;
using namespace teata::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Outcome ranking_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> nq(1, 50), ng(1, 200), dim(2, 32);
  double worst = 0.0;
  int dropped_mismatch = 0, instances = 0;
  for (int t = 0; t < 200; ++t) {
    auto [q, g] = random_instance(rng, t < 100 ? 50 : nq(rng), t < 100 ? 200 : ng(rng), dim(rng));
    const auto proto = t % 2 == 0 ? RankingProtocol::standard() : RankingProtocol::cloth_changing();
    DomainMetrics m;
    try {
      m = rank_and_score(q, g, proto, 20);
    } catch (const Error&) {
      continue;
    }
    const auto o = oracle_rank(q, g, proto, 20);
    ++instances;
    worst = std::max(worst, std::abs(m.mAP - o.mAP));
    for (std::size_t k = 0; k < o.cmc.size(); ++k) worst = std::max(worst, std::abs(m.cmc[k] - o.cmc[k]));
    dropped_mismatch += m.dropped_queries != o.dropped;
  }
  const double secs = seconds_since(t0);
  return {instances == 200 && worst <= 1e-9 && dropped_mismatch == 0 && secs < 30.0,
          fmt("%.0f instances, max deviation %.2e, ", instances, worst) +
              fmt("%.0f dropped-count mismatches, %.1f s", dropped_mismatch, secs)};
}

Outcome loss_oracles() {
  const auto t0 = Clock::now();
  double value_err = 0.0, grad_err = 0.0;
  auto rel = [&](const Matrix& a, const Matrix& b) { grad_err = std::max(grad_err, relative_error(a, b)); };
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto in = make_instance(900 + s, 8, 5, 6);
    const double tau = 0.07 + 0.05 * static_cast<double>(s);
    const Matrix w = normalize_rows(in.txt);

    const auto c = contrastive_i2t_t2i(in.img, in.txt, in.y, tau);
    value_err = std::max({value_err, std::abs(c.i2t.value - oracle_i2t(in.img, in.txt, in.y, tau)),
                          std::abs(c.t2i.value - oracle_t2i(in.img, in.txt, in.y, tau))});
    rel(c.i2t.grad_image, numeric_grad([&](const Matrix& x) { return oracle_i2t(x, in.txt, in.y, tau); }, in.img));
    rel(c.i2t.grad_text, numeric_grad([&](const Matrix& x) { return oracle_i2t(in.img, x, in.y, tau); }, in.txt));
    rel(c.t2i.grad_image, numeric_grad([&](const Matrix& x) { return oracle_t2i(x, in.txt, in.y, tau); }, in.img));
    rel(c.t2i.grad_text, numeric_grad([&](const Matrix& x) { return oracle_t2i(in.img, x, in.y, tau); }, in.txt));

    const auto id = id_loss(in.img, w, in.y, 0.1);
    value_err = std::max(value_err, std::abs(id.value - oracle_id(in.img, w, in.y, 0.1)));
    rel(id.grad_features, numeric_grad([&](const Matrix& x) { return oracle_id(x, w, in.y, 0.1); }, in.img));
    rel(id.grad_classifier, numeric_grad([&](const Matrix& x) { return oracle_id(in.img, x, in.y, 0.1); }, w));

    const auto pr = proj_loss(in.img, in.txt, in.y, 0.1);
    value_err = std::max(value_err, std::abs(pr.value - oracle_id(in.img, in.txt, in.y, 0.1)));
    rel(pr.grad_features, numeric_grad([&](const Matrix& x) { return oracle_id(x, in.txt, in.y, 0.1); }, in.img));

    const auto tri_in = make_instance(950 + s, 12, 3, 5);
    const auto tri = triplet_loss(tri_in.img, tri_in.y, 0.3);
    value_err = std::max(value_err, std::abs(tri.value - oracle_triplet(tri_in.img, tri_in.y, 0.3)));
    rel(tri.grad_features, numeric_grad([&](const Matrix& x) { return oracle_triplet(x, tri_in.y, 0.3); }, tri_in.img));
  }
  const double secs = seconds_since(t0);
  return {value_err <= 1e-6 && grad_err <= 1e-4 && secs < 60.0,
          fmt("max value error %.2e, max gradient relative error %.2e, %.1f s", value_err, grad_err, secs)};
}

Outcome freeze_partitions(const fs::path& work) {
  const auto cfg = toy_config(work / "data", 2);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  bool ok = true;
  std::ostringstream log;
  for (int step = 1; step <= 2; ++step) {
    const auto& ds = domains[static_cast<std::size_t>(step - 1)];
    const auto img0 = param_hash(t.state(), "image_encoder");
    const auto txt0 = param_hash(t.state(), "text_encoder");
    t.run_stage1(ds, step, 3);
    const bool s1 = param_hash(t.state(), "image_encoder") == img0 && param_hash(t.state(), "text_encoder") == txt0;
    const auto img1 = param_hash(t.state(), "image_encoder");
    t.run_stage2(ds, step, 3);
    const bool s2 = param_hash(t.state(), "text_encoder") == txt0;
    const bool trained = param_hash(t.state(), "image_encoder") != img1;
    ok = ok && s1 && s2 && trained;
    log << "step " << step << ": stage 1 encoders " << (s1 ? "unchanged" : "CHANGED") << ", stage 2 text "
        << (s2 ? "unchanged" : "CHANGED") << ", image " << (trained ? "trained" : "untouched") << "; ";
  }
  return {ok, log.str()};
}

Outcome slow_learning_rate(const fs::path& work) {
  const auto cfg = toy_config(work / "data", 2);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  LifelongTrainer t(cfg);
  t.run_stage1(domains[0], 1, 1);
  const auto a = t.run_stage2(domains[0], 1, cfg.train.stage2_epochs);
  t.run_stage1(domains[1], 2, 1);
  const auto b = t.run_stage2(domains[1], 2, cfg.train.stage2_epochs);
  int compared = 0, mismatched = 0;
  for (const auto& [group, trace] : a.lr_trace)
    for (std::size_t e = 0; e < trace.size(); ++e, ++compared)
      mismatched += b.lr_trace.at(group).at(e) != trace[e] / 10.0;
  const SlowPacedSchedule full;
  for (int e = 0; e < full.stage2_epochs; ++e, ++compared)
    mismatched += stage2_learning_rate(full, 2, e) != stage2_learning_rate(full, 1, e) / 10.0;
  return {compared > 0 && mismatched == 0,
          fmt("%.0f epoch/group pairs compared, %.0f differ", compared, mismatched)};
}

Outcome classifier_init(const fs::path& work) {
  auto cfg = toy_config(work / "data", 1);
  const auto domains = load_domains(cfg, cfg.data.domains, true);

  LifelongTrainer kat(cfg);
  kat.run_stage1(domains[0], 1, 2);
  const Matrix table = kat.state().prompts->text_table(*kat.state().text, 1);
  const auto rt = kat.run_stage2(domains[0], 1, 0);
  const bool kat_ok = rt.initial_classifier == normalize_rows(table);

  cfg.train.init_mode = InitMode::KA_V;
  LifelongTrainer kav(cfg);
  kav.run_stage1(domains[0], 1, 2);
  ImageSource src;
  const auto train = extract_features(kav.state().image, src, domains[0], Split::Train);
  const int n = domains[0].num_train_identities();
  Matrix expect = Matrix::Zero(n, train.features.cols());
  std::vector<int> count(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < train.features.rows(); ++i) {
    const int y = train.meta[static_cast<std::size_t>(i)].identity;
    for (Eigen::Index c = 0; c < expect.cols(); ++c) expect(y, c) += train.features(i, c);
    ++count[static_cast<std::size_t>(y)];
  }
  for (int j = 0; j < n; ++j) {
    double norm = 0.0;
    for (Eigen::Index c = 0; c < expect.cols(); ++c) {
      expect(j, c) /= count[static_cast<std::size_t>(j)];
      norm += expect(j, c) * expect(j, c);
    }
    expect.row(j) /= std::sqrt(norm);
  }
  const auto rv = kav.run_stage2(domains[0], 1, 0);
  const double kav_err = (rv.initial_classifier - expect).cwiseAbs().maxCoeff();
  return {kat_ok && kav_err <= 1e-6, std::string("KA_T ") + (kat_ok ? "bitwise equal" : "DIFFERS") +
                                          fmt(", KA_V max deviation %.2e", kav_err)};
}

Outcome label_smoothing() {
  const auto q = smoothed_targets(10, 0.1, 3);
  bool exact = q[3] == 0.91;
  for (int j = 0; j < 10; ++j)
    if (j != 3) exact = exact && q[static_cast<std::size_t>(j)] == 0.01;
  double worst = 0.0;
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> classes(1, 500);
  std::uniform_real_distribution<double> eps(0.0, 0.999);
  for (int t = 0; t < 1000; ++t) {
    const int n = classes(rng);
    const auto v = smoothed_targets(n, eps(rng), n / 2);
    double s = 0.0;
    for (double x : v) s += x;
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return {exact && worst <= 1e-12,
          std::string("N=10 eps=0.1 ") + (exact ? "gives 0.91/0.01" : "WRONG") + fmt(", max |sum-1| %.1e", worst)};
}

struct DeskRun {
  double sc = 0.0, cc = 0.0, forgetting = 0.0;
};

DeskRun run_desk(RunConfig cfg, Method method, std::uint64_t seed, const std::vector<DomainDataset>& domains,
                 const fs::path& run_dir) {
  cfg.train.method = method;
  cfg.train.seed = seed;
  LifelongTrainer t(cfg);
  const auto results = t.run_plan(domains, {}, run_dir);
  std::vector<EvalReport> reports;
  for (const auto& r : results) reports.push_back(r.report);
  const auto& last = reports.back();
  return {last.seen_sc->mAP, last.seen_cc->mAP, forgetting_matrix(reports, Metric::MAP).forgetting[0]};
}

Outcome directional(const fs::path& work) {
  const auto t0 = Clock::now();
  auto cfg = load_config(TEATA_DESK_CONFIG, {"data.root=" + (work / "data").string()});
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  int sc_wins = 0, cc_wins = 0, forget_wins = 0;
  std::ostringstream log;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto a = run_desk(cfg, Method::TEATA, seed, domains, work / ("teata" + std::to_string(seed)));
    const auto b = run_desk(cfg, Method::SFT, seed, domains, work / ("sft" + std::to_string(seed)));
    sc_wins += a.sc > b.sc;
    cc_wins += a.cc > b.cc;
    forget_wins += a.forgetting < b.forgetting;
    log << fmt("\n    seed %.0f: TEATA SC %.4f", static_cast<double>(seed), a.sc)
        << fmt(" CC %.4f F1 %.4f |", a.cc, a.forgetting) << fmt(" SFT SC %.4f CC %.4f F1 %.4f", b.sc, b.cc, b.forgetting);
  }
  const double secs = seconds_since(t0);
  const bool pass = sc_wins >= 2 && cc_wins >= 2 && forget_wins >= 2 && secs < 1800.0;
  return {pass, fmt("TEATA ahead on SC %.0f/3, CC %.0f/3, ", sc_wins, cc_wins) +
                    fmt("lower domain-1 forgetting %.0f/3, %.0f s", forget_wins, secs) + log.str()};
}

Outcome determinism(const fs::path& work) {
  const auto cfg = toy_config(work / "data", 2);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  std::vector<StepResult> runs[2];
  for (int r = 0; r < 2; ++r) {
    LifelongTrainer t(cfg);
    runs[r] = t.run_plan(domains, {}, work / ("run" + std::to_string(r)));
  }
  double worst = 0.0;
  const auto& a = runs[0].back().report;
  const auto& b = runs[1].back().report;
  for (const auto& m : a.domains) {
    const auto* o = b.find(m.domain);
    worst = std::max({worst, std::abs(m.mAP - o->mAP), std::abs(m.rank1 - o->rank1)});
    for (std::size_t k = 0; k < m.cmc.size(); ++k) worst = std::max(worst, std::abs(m.cmc[k] - o->cmc[k]));
  }
  bool same_bytes = true;
  for (std::size_t s = 0; s < runs[0].size(); ++s)
    for (const char* f : {"tensors.bin", "checkpoint.json"})
      same_bytes = same_bytes && file_bytes(runs[0][s].checkpoint / f) == file_bytes(runs[1][s].checkpoint / f);
  return {worst <= 1e-6 && same_bytes,
          fmt("max report deviation %.2e, checkpoints ", worst) + (same_bytes ? "identical" : "DIFFER")};
}

Outcome rehearsal_free(const fs::path& work) {
  const auto cfg = toy_config(work / "data", 3);
  const auto domains = load_domains(cfg, cfg.data.domains, true);
  std::ostringstream log;
  bool ok = true;
  for (Method m : {Method::TEATA, Method::SFT}) {
    auto c = cfg;
    c.train.method = m;
    auto auditor = std::make_shared<AccessAuditor>(false);
    LifelongTrainer t(c, auditor);
    t.run_plan(domains, {}, work / to_string(m));
    std::size_t train_reads = 0;
    for (const auto& d : domains) train_reads += auditor->reads(d.name, Split::Train);
    ok = ok && auditor->violations() == 0 && train_reads > 0;
    log << to_string(m) << ": " << auditor->violations() << " reads after completion (" << train_reads
        << " train reads in total); ";
  }
  return {ok, log.str()};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto wanted = [&](int k) { return selected.empty() || selected.count(k) != 0; };

  const fs::path work = fs::temp_directory_path() / ("teata_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(work);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, ranking_oracle},
      {2, loss_oracles},
      {3, [&] { return freeze_partitions(work / "c3"); }},
      {4, [&] { return slow_learning_rate(work / "c4"); }},
      {5, [&] { return classifier_init(work / "c5"); }},
      {6, label_smoothing},
      {7, [&] { return directional(work / "c7"); }},
      {8, [&] { return determinism(work / "c8"); }},
      {9, [&] { return rehearsal_free(work / "c9"); }},
  };

  int failures = 0;
  for (const auto& [k, run] : criteria) {
    if (!wanted(k)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %d: %s  %s\n", k, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(work);
  return failures == 0 ? 0 : 1;
}
