#include "teata/config.hpp"
#include "teata/errors.hpp"
#include "teata/eval.hpp"
#include "teata/lifelong.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace teata;

namespace {

fs::path default_run_root() {
  const char* env = std::getenv("TEATA_RUN_DIR");
  return env && *env ? fs::path(env) : fs::path("runs");
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Config: return 2;
    case ErrorCategory::Data: return 3;
    case ErrorCategory::Runtime: return 4;
  }
  return 4;
}

std::vector<fs::path> step_dirs(const fs::path& run_dir) {
  static const std::regex re(R"(step(\d+))");
  std::vector<std::pair<int, fs::path>> found;
  if (fs::is_directory(run_dir))
    for (const auto& e : fs::directory_iterator(run_dir)) {
      std::smatch m;
      const std::string name = e.path().filename().string();
      if (e.is_directory() && std::regex_match(name, m, re)) found.emplace_back(std::stoi(m[1].str()), e.path());
    }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& f : found) out.push_back(f.second);
  return out;
}

void cmd_gen_data(const RunConfig& cfg) {
  std::vector<DomainEntry> all = cfg.data.domains;
  all.insert(all.end(), cfg.eval.unseen.begin(), cfg.eval.unseen.end());
  for (const auto& d : all) {
    const fs::path root = cfg.domain_root(d);
    DomainDataset ds;
    try {
      ds = generate_synthetic_domain(cfg.generator(d), root);
    } catch (const Error&) {
      std::cerr << "while generating domain " << d.name << "\n";
      throw;
    }
    std::cout << d.name << " (" << to_string(d.clothing_state) << "): " << ds.records.size() << " images, "
              << ds.num_identities << " identities -> " << root.string() << "\n";
  }
}

void cmd_train(const RunConfig& cfg, const fs::path& run_dir, const std::string& resume) {
  const auto domains = load_domains(cfg, cfg.data.domains, false);
  const auto unseen = load_domains(cfg, cfg.eval.unseen, false);
  LifelongTrainer trainer(cfg);
  trainer.set_logger([](const json& e) {
    if (e.value("event", "") == "step_start")
      std::cerr << "step " << e["step"] << ": " << e["domain"].get<std::string>() << "\n";
  });
  int first = 1;
  if (!resume.empty()) {
    const auto ck = load_checkpoint(resume);
    if (ck.config_hash != config_hash(cfg))
      std::cerr << "warning: checkpoint config hash " << ck.config_hash << " differs from " << config_hash(cfg) << "\n";
    trainer.restore(ck, domains);
    first = ck.step + 1;
  }
  const auto results = trainer.run_plan(domains, unseen, run_dir, first);
  for (const auto& r : results) {
    std::cout << "step " << r.step << " checkpoint " << r.checkpoint.string() << "\n";
    for (const auto& m : r.report.domains)
      std::printf("  %-12s %-8s mAP %.4f  R1 %.4f\n", m.domain.c_str(), to_string(m.protocol).c_str(), m.mAP, m.rank1);
  }
}

void cmd_eval(const RunConfig& base, const fs::path& checkpoint, const fs::path& out_dir, const std::string& protocol,
              bool camera_junk, bool clothes_junk) {
  RunConfig cfg = base;
  if (!protocol.empty()) cfg.eval.protocol = protocol;
  cfg.eval.same_camera_junk = camera_junk;
  cfg.eval.same_clothes_junk = clothes_junk;
  cfg.validate();
  const auto ck = load_checkpoint(checkpoint);
  const auto domains = load_domains(cfg, cfg.data.domains, false);
  const auto unseen = load_domains(cfg, cfg.eval.unseen, false);
  const std::size_t seen_count =
      ck.method == "JOINT" ? domains.size() : std::min(domains.size(), static_cast<std::size_t>(ck.step));
  std::vector<DomainDataset> seen(domains.begin(), domains.begin() + static_cast<std::ptrdiff_t>(seen_count));
  std::vector<DomainDataset> rest = unseen;
  rest.insert(rest.begin(), domains.begin() + static_cast<std::ptrdiff_t>(seen_count), domains.end());

  LifelongTrainer trainer(cfg);
  trainer.state() = ModelState::from_checkpoint(ck);
  const auto report = trainer.evaluate(ck.step, seen, rest);
  write_report_files(out_dir, report);
  for (const auto& m : report.domains)
    std::printf("%-12s %-8s %-6s mAP %.4f  R1 %.4f  dropped %d\n", m.domain.c_str(), to_string(m.protocol).c_str(),
                m.seen ? "seen" : "unseen", m.mAP, m.rank1, m.dropped_queries);
  std::cout << "reports written to " << out_dir.string() << "\n";
}

std::string fmt(std::optional<double> v) {
  if (!v) return "     -";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%6.4f", *v);
  return buf;
}

void cmd_report(const fs::path& run_dir, const fs::path& out_dir) {
  std::vector<EvalReport> steps;
  for (const auto& d : step_dirs(run_dir))
    if (fs::exists(d / "reports" / "aggregate.json")) steps.push_back(read_aggregate(d / "reports"));
  if (steps.empty()) throw MissingReports("no step*/reports/aggregate.json under " + run_dir.string());

  const auto& final = steps.back();
  const auto fm_map = forgetting_matrix(steps, Metric::MAP);
  const auto fm_r1 = forgetting_matrix(steps, Metric::Rank1);

  std::ostringstream text;
  text << "final step " << final.step << "\n";
  text << "domain        state  seen    mAP     R1\n";
  for (const auto& m : final.domains) {
    char line[128];
    std::snprintf(line, sizeof line, "%-13s %-6s %-6s %6.4f %6.4f\n", m.domain.c_str(),
                  to_string(m.clothing_state).c_str(), m.seen ? "yes" : "no", m.mAP, m.rank1);
    text << line;
  }
  auto group = [&](const char* label, const std::optional<GroupAverage>& g) {
    if (g) text << label << " mAP " << fmt(g->mAP) << "  R1 " << fmt(g->rank1) << "\n";
  };
  group("seen SC avg   ", final.seen_sc);
  group("seen CC avg   ", final.seen_cc);
  group("unseen SC avg ", final.unseen_sc);
  group("unseen CC avg ", final.unseen_cc);
  text << "\nmAP after each step (rows: step, columns: domain)\n";
  text << "step ";
  for (const auto& d : fm_map.domains) text << " " << d;
  text << "\n";
  for (std::size_t t = 0; t < fm_map.values.size(); ++t) {
    text << "  " << t + 1 << "  ";
    for (const auto& v : fm_map.values[t]) text << " " << fmt(v);
    text << "\n";
  }
  text << "forgetting";
  for (double f : fm_map.forgetting) text << " " << fmt(f);
  text << "\n";

  json j{{"final", to_json(final)}, {"forgetting_mAP", to_json(fm_map)}, {"forgetting_rank1", to_json(fm_r1)}};
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "summary.json") << j.dump(2) << "\n";
  std::ofstream(out_dir / "summary.txt") << text.str();
  std::cout << text.str();
}

void cmd_export(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& out) {
  const auto ck = load_checkpoint(checkpoint);
  auto domains = load_domains(cfg, cfg.data.domains, false);
  const auto unseen = load_domains(cfg, cfg.eval.unseen, false);
  domains.insert(domains.end(), unseen.begin(), unseen.end());
  ImageSource images(std::make_shared<AccessAuditor>(false));
  const auto state = ModelState::from_checkpoint(ck);
  export_embeddings(state.image, images, domains, out);
  std::cout << "embeddings written to " << out.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong person re-identification with hybrid clothing states"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "TOML run configuration")->required();
    cmd->add_option("--set", overrides, "override a dotted key, e.g. --set train.method=SFT");
  };

  auto* gen = app.add_subcommand("gen-data", "render the configured synthetic domains");
  add_config(gen);

  std::string run_dir, resume;
  auto* train = app.add_subcommand("train", "run the lifelong plan");
  add_config(train);
  train->add_option("--run-dir", run_dir, "output directory (default $TEATA_RUN_DIR/<method>)");
  train->add_option("--resume", resume, "checkpoint directory of a completed step");

  std::string checkpoint, out, protocol;
  bool no_camera_junk = false, no_clothes_junk = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured domains");
  add_config(eval);
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval->add_option("--out", out, "report directory")->required();
  eval->add_option("--protocol", protocol, "auto, STANDARD or CC");
  eval->add_flag("--no-camera-junk", no_camera_junk, "keep same-camera matches");
  eval->add_flag("--no-clothes-junk", no_clothes_junk, "keep same-clothes matches under CC");

  auto* report = app.add_subcommand("report", "summary table and forgetting matrices for a run");
  report->add_option("--run-dir", run_dir, "run directory")->required();
  report->add_option("--out", out, "output directory (default: the run directory)");

  auto* exp = app.add_subcommand("export-embeddings", "write per-sample and prototype embeddings as JSON lines");
  add_config(exp);
  exp->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  exp->add_option("--out", out, "output .jsonl file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (report->parsed()) {
      cmd_report(run_dir, out.empty() ? fs::path(run_dir) : fs::path(out));
      return 0;
    }
    const RunConfig cfg = load_config(config_path, overrides);
    if (gen->parsed()) {
      cmd_gen_data(cfg);
    } else if (train->parsed()) {
      std::string method = to_string(cfg.train.method);
      std::transform(method.begin(), method.end(), method.begin(), [](unsigned char c) { return std::tolower(c); });
      cmd_train(cfg, run_dir.empty() ? default_run_root() / method : fs::path(run_dir), resume);
    } else if (eval->parsed()) {
      cmd_eval(cfg, checkpoint, out, protocol, !no_camera_junk, !no_clothes_junk);
    } else if (exp->parsed()) {
      cmd_export(cfg, checkpoint, out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
