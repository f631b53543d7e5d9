#include "teata/lifelong.hpp"

#include "teata/errors.hpp"
#include "teata/losses.hpp"

#include <cmath>
#include <fstream>
#include <regex>
#include <set>

namespace teata {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

enum : std::uint64_t { kSaltImage = 1, kSaltText, kSaltPrompts, kSaltStage1, kSaltStage2, kSaltClassifier, kSaltPre,
                       kSaltAugment };

json model_to_json(const ModelSection& m, bool with_text) {
  return json{{"image_height", m.image_height}, {"image_width", m.image_width}, {"patch_size", m.patch_size},
              {"vision_width", m.vision_width}, {"image_layers", m.image_layers}, {"image_heads", m.image_heads},
              {"text_layers", m.text_layers},   {"text_heads", m.text_heads},     {"mlp_ratio", m.mlp_ratio},
              {"embed_dim", m.embed_dim},       {"token_dim", m.token_dim},       {"prompt_pairs", m.prompt_pairs},
              {"text_encoder", with_text}};
}

ModelSection model_from_json(const json& j) {
  ModelSection m;
  m.image_height = j.at("image_height").get<int>();
  m.image_width = j.at("image_width").get<int>();
  m.patch_size = j.at("patch_size").get<int>();
  m.vision_width = j.at("vision_width").get<int>();
  m.image_layers = j.at("image_layers").get<int>();
  m.image_heads = j.at("image_heads").get<int>();
  m.text_layers = j.at("text_layers").get<int>();
  m.text_heads = j.at("text_heads").get<int>();
  m.mlp_ratio = j.at("mlp_ratio").get<int>();
  m.embed_dim = j.at("embed_dim").get<int>();
  m.token_dim = j.at("token_dim").get<int>();
  m.prompt_pairs = j.at("prompt_pairs").get<int>();
  return m;
}

std::vector<int> batch_labels(const DomainDataset& ds, const Batch& b) {
  std::vector<int> out;
  out.reserve(b.record_indices.size());
  for (auto i : b.record_indices) out.push_back(ds.records[i].identity);
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

ModelState::ModelState(const ModelSection& m, bool with_text, std::uint64_t seed)
    : model(m), image(m.image(), derive_seed(seed, {kSaltImage})) {
  if (with_text) {
    text.emplace(m.text(), derive_seed(seed, {kSaltText}));
    text->freeze();
    prompts.emplace(m.prompt_pairs, m.token_dim);
  }
}

std::vector<std::pair<std::string, ag::Var>> ModelState::named_tensors() const {
  std::vector<std::pair<std::string, ag::Var>> out = image.parameters().items();
  if (text)
    for (const auto& kv : text->parameters().items()) out.push_back(kv);
  if (prompts)
    for (const auto& kv : prompts->named_tensors()) out.push_back(kv);
  for (const auto& [t, c] : classifiers) out.emplace_back("kap.step" + std::to_string(t) + ".classifier", c.weights);
  for (const auto& [t, w] : pre_classifiers) out.emplace_back("kap.step" + std::to_string(t) + ".pre_classifier", w);
  return out;
}

void ModelState::round_to_float() {
  for (auto& [name, v] : named_tensors()) {
    ag::Var var = v;
    var.mutable_value() = teata::round_to_float(var.value());
  }
}

Checkpoint ModelState::to_checkpoint(int step, Method method, const std::string& hash) const {
  Checkpoint ck;
  ck.config_hash = hash;
  ck.step = step;
  ck.method = to_string(method);
  ck.model = model_to_json(model, text.has_value());
  for (const auto& [name, v] : named_tensors()) ck.tensors.push_back({name, v.value()});
  return ck;
}

ModelState ModelState::from_checkpoint(const Checkpoint& ck) {
  ModelSection m;
  bool with_text = false;
  try {
    m = model_from_json(ck.model);
    with_text = ck.model.at("text_encoder").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint model section: ") + e.what());
  }
  ModelState s(m, with_text, 0);
  static const std::regex kap_re(R"(kap\.step(\d+)\.(classifier|pre_classifier))");
  std::set<std::string> loaded;
  for (const auto& t : ck.tensors) {
    std::smatch match;
    auto assign = [&](const nn::ParameterSet& ps) {
      ag::Var v = ps.get(t.name);
      if (v.rows() != t.value.rows() || v.cols() != t.value.cols()) throw IntegrityError(t.name + ": shape mismatch");
      v.mutable_value() = t.value;
    };
    if (s.image.parameters().contains(t.name)) {
      assign(s.image.parameters());
    } else if (s.text && s.text->parameters().contains(t.name)) {
      assign(s.text->parameters());
    } else if (s.prompts && t.name.rfind("prompts.", 0) == 0) {
      s.prompts->restore(t.name, t.value);
    } else if (std::regex_match(t.name, match, kap_re)) {
      const int step = std::stoi(match[1].str());
      if (match[2] == "classifier")
        s.classifiers[step] = AdaptedClassifier{ag::Var(t.value, true), InitMode::KA_T, true};
      else
        s.pre_classifiers[step] = ag::Var(t.value, true);
    } else {
      throw IntegrityError("unexpected tensor " + t.name);
    }
    loaded.insert(t.name);
  }
  for (const auto* ps : {&s.image.parameters(), s.text ? &s.text->parameters() : nullptr}) {
    if (!ps) continue;
    for (const auto& [name, v] : ps->items())
      if (!loaded.count(name)) throw IntegrityError("checkpoint lacks " + name);
  }
  return s;
}

LifelongTrainer::LifelongTrainer(RunConfig config, std::shared_ptr<AccessAuditor> auditor)
    : config_(std::move(config)),
      auditor_(auditor ? std::move(auditor) : std::make_shared<AccessAuditor>(config_.train.strict_audit)),
      images_(auditor_) {
  config_.validate();
  state_ = std::make_unique<ModelState>(config_.model, config_.train.method == Method::TEATA, config_.train.seed);
  if (!config_.model.pretrained.empty()) load_pretrained_encoders(*state_, load_checkpoint(config_.model.pretrained));
}

int load_pretrained_encoders(ModelState& state, const Checkpoint& checkpoint) {
  int copied = 0;
  for (auto& [name, var] : state.named_tensors()) {
    if (!name.starts_with("image_encoder.") && !name.starts_with("text_encoder.")) continue;
    const NamedTensor* src = checkpoint.find(name);
    if (!src) throw KeyError("pretrained checkpoint has no tensor " + name);
    Matrix& dst = var.mutable_value();
    if (src->value.rows() != dst.rows() || src->value.cols() != dst.cols())
      throw ShapeError("pretrained tensor " + name + " has the wrong shape");
    dst = src->value;
    ++copied;
  }
  return copied;
}

void LifelongTrainer::log(json event) const {
  if (logger_) logger_(event);
}

namespace {

double stage1_loss(const TextEncoder& text, const StructuredPromptStore& prompts, int step,
                   const std::vector<std::pair<Matrix, std::vector<int>>>& batches) {
  const Matrix table = prompts.text_table(text, step);
  std::vector<double> values;
  for (const auto& [feats, labels] : batches) {
    const auto c = contrastive_i2t_t2i(feats, table, labels, prompts.temperature());
    values.push_back(c.i2t.value + c.t2i.value);
  }
  return mean(values);
}

}  // namespace

Stage1Result LifelongTrainer::run_stage1(const DomainDataset& ds, int step, int epochs) {
  auto& st = *state_;
  if (!st.text || !st.prompts) throw InvalidArgument("stage 1 needs the text encoder and prompt store");
  const auto& tc = config_.train;
  if (!st.prompts->has_step(step))
    st.prompts->init_domain(step, ds.num_train_identities(), derive_seed(tc.seed, {kSaltPrompts}));
  st.image.freeze();
  st.text->freeze();

  Stage1Result result;
  if (epochs <= 0) return result;

  SlowPacedSchedule sched = tc.schedule();
  sched.stage1_epochs = epochs;

  const auto train_idx = ds.indices(Split::Train);
  std::vector<Eigen::Index> row_of(ds.records.size(), -1);
  for (std::size_t i = 0; i < train_idx.size(); ++i) row_of[train_idx[i]] = static_cast<Eigen::Index>(i);
  Matrix cached;
  if (!tc.augment) cached = encode_images_chunked(st.image, images_.load(ds, train_idx)).features;

  auto& prompts = *st.prompts;
  Adam opt({0.9, 0.999, 1e-8, tc.weight_decay});
  opt.add_group("prompts", {prompts.specific(step), prompts.shared(), prompts.logit_scale()});
  const std::uint64_t seed = derive_seed(tc.seed, {kSaltStage1, static_cast<std::uint64_t>(step)});
  AugmentConfig aug;
  aug.enabled = tc.augment;

  std::vector<std::pair<Matrix, std::vector<int>>> first_batches;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const double lr = stage1_learning_rate(sched, epoch);
    opt.set_lr("prompts", lr);
    result.lr_trace.push_back(lr);
    std::vector<double> losses;
    Rng aug_rng(derive_seed(seed, {kSaltAugment, static_cast<std::uint64_t>(epoch)}));
    std::vector<std::pair<Matrix, std::vector<int>>> batches;
    for (const auto& b : sample_pk_batches(ds, tc.batch(), seed, epoch)) {
      Matrix feats(static_cast<Eigen::Index>(b.record_indices.size()), st.image.config().embed_dim);
      if (tc.augment) {
        auto batch = images_.load(ds, b.record_indices);
        augment(batch, aug, aug_rng);
        feats = encode_images(st.image, batch).features;
      } else {
        for (std::size_t i = 0; i < b.record_indices.size(); ++i)
          feats.row(static_cast<Eigen::Index>(i)) = cached.row(row_of[b.record_indices[i]]);
      }
      batches.emplace_back(std::move(feats), batch_labels(ds, b));
    }
    if (epoch == 0) {
      first_batches = batches;
      result.initial_loss = stage1_loss(*st.text, prompts, step, first_batches);
    }
    for (const auto& [feats, labels] : batches) {
      ag::Var table = prompts.text_table_var(*st.text, step);
      const double tau = prompts.temperature();
      const auto c = contrastive_i2t_t2i(feats, table.value(), labels, tau);
      const double raw_tau = std::exp(-prompts.logit_scale().item());
      const bool clamped = raw_tau < StructuredPromptStore::kMinTemperature ||
                           raw_tau > StructuredPromptStore::kMaxTemperature;
      Matrix g_ls(1, 1);
      g_ls(0, 0) = clamped ? 0.0 : -tau * (c.i2t.grad_temperature + c.t2i.grad_temperature);
      const double value = c.i2t.value + c.t2i.value;
      ag::Var loss = ag::precomputed(value, {table, prompts.logit_scale()}, {c.i2t.grad_text + c.t2i.grad_text, g_ls});
      ag::backward(loss);
      opt.step();
      prompts.clamp_temperature();
      losses.push_back(value);
    }
    result.loss_curve.push_back(mean(losses));
    log({{"event", "epoch"}, {"stage", 1}, {"step", step}, {"epoch", epoch}, {"lr", lr},
         {"loss", result.loss_curve.back()}, {"temperature", prompts.temperature()}});
  }
  result.final_loss = stage1_loss(*st.text, prompts, step, first_batches);
  return result;
}

Stage2Result LifelongTrainer::run_stage2(const DomainDataset& ds, int step, int epochs) {
  auto& st = *state_;
  const auto& tc = config_.train;
  const bool teata = tc.method == Method::TEATA;
  const int n = ds.num_train_identities();
  Stage2Result result;

  if (st.text) st.text->freeze();
  st.image.freeze();

  LossWeights w = tc.weights();
  AdaptedClassifier classifier;
  ClassifierSources src;
  src.num_classes = n;
  src.dim = st.image.config().embed_dim;
  src.seed = derive_seed(tc.seed, {kSaltClassifier, static_cast<std::uint64_t>(step)});
  Matrix prototypes;
  if (teata) {
    if (!st.prompts || !st.prompts->has_step(step)) throw InvalidArgument("stage 2 needs stage-1 prompts for this step");
    result.frozen_text_table = st.prompts->text_table(*st.text, step);
    src.text_table = &result.frozen_text_table;
    if (tc.init_mode == InitMode::KA_V) {
      prototypes = image_prototypes(st.image, images_, ds);
      src.image_prototypes = &prototypes;
    }
    classifier = init_classifier(tc.init_mode, src);
  } else {
    w.lambda1 = 0.0;
    classifier = init_classifier(InitMode::Random, src);
  }
  result.initial_classifier = classifier.weights.value();
  st.classifiers[step] = classifier;

  ClassifierSources pre_src;
  pre_src.num_classes = n;
  pre_src.dim = st.image.config().width;
  pre_src.seed = derive_seed(tc.seed, {kSaltPre, static_cast<std::uint64_t>(step)});
  ag::Var pre_classifier = init_classifier(InitMode::Random, pre_src).weights;
  st.pre_classifiers[step] = pre_classifier;

  PromptTuningRoute route;
  if (teata) route = stage2_prompt_tuning_hook(*st.prompts, step, tc.prompt_tuning, tc.prompt_tuning_scope);
  result.prompt_hook_active = route.enabled;
  if (epochs <= 0) return result;

  st.image.unfreeze();
  std::vector<ag::Var> image_params;
  for (const auto& kv : st.image.parameters().items()) image_params.push_back(kv.second);
  Adam opt({0.9, 0.999, 1e-8, tc.weight_decay});
  opt.add_group("image_encoder", image_params);
  opt.add_group("pre_classifier", {pre_classifier});
  opt.add_group("classifier", {classifier.weights});
  if (route.enabled) opt.add_group("prompts", route.tensors);

  // The slow-paced plan applies to every later TEATA domain; the baselines
  // always run the first-domain plan.
  SlowPacedSchedule sched = tc.schedule();
  sched.stage2_epochs = epochs;
  auto domain_index_of = [&](const std::string& group) {
    if (!teata) return 1;
    if (tc.slow_scope == SlowScope::ClassifierPrompts && (group == "image_encoder" || group == "pre_classifier"))
      return 1;
    return step;
  };

  const std::uint64_t seed = derive_seed(tc.seed, {kSaltStage2, static_cast<std::uint64_t>(step)});
  AugmentConfig aug;
  aug.enabled = tc.augment;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (const char* g : {"image_encoder", "pre_classifier", "classifier", "prompts"}) {
      if (!opt.has_group(g)) continue;
      const double lr = stage2_learning_rate(sched, domain_index_of(g), epoch);
      opt.set_lr(g, lr);
      result.lr_trace[g].push_back(lr);
    }
    Rng aug_rng(derive_seed(seed, {kSaltAugment, static_cast<std::uint64_t>(epoch)}));
    std::vector<double> totals;
    Stage2Components sums;
    for (const auto& b : sample_pk_batches(ds, tc.batch(), seed, epoch)) {
      const auto labels = batch_labels(ds, b);
      auto batch = images_.load(ds, b.record_indices);
      augment(batch, aug, aug_rng);
      const auto out = st.image.forward(batch);
      const Matrix& f = out.features.value();
      const Matrix& pre = out.pre_features.value();

      Stage2Components c;
      std::vector<ag::Var> terms;
      std::vector<double> weights;
      const auto tri = triplet_loss(f, labels, w.triplet_margin);
      const auto tri_pre = triplet_loss(pre, labels, w.triplet_margin);
      const auto id = id_loss(f, classifier.weights.value(), labels, w.epsilon, w.logit_scale);
      const auto id_pre = id_loss(pre, pre_classifier.value(), labels, w.epsilon, w.logit_scale);
      c.tri = tri.value;
      c.tri_pre = tri_pre.value;
      c.id = id.value;
      c.id_pre = id_pre.value;
      terms.push_back(ag::precomputed(tri.value, {out.features}, {tri.grad_features}));
      weights.push_back(w.lambda3);
      terms.push_back(ag::precomputed(tri_pre.value, {out.pre_features}, {tri_pre.grad_features}));
      weights.push_back(w.lambda3);
      terms.push_back(ag::precomputed(id.value, {out.features, classifier.weights}, {id.grad_features, id.grad_classifier}));
      weights.push_back(w.lambda2);
      terms.push_back(
          ag::precomputed(id_pre.value, {out.pre_features, pre_classifier}, {id_pre.grad_features, id_pre.grad_classifier}));
      weights.push_back(w.lambda2);
      if (teata && w.lambda1 != 0.0) {
        const auto proj = proj_loss(f, result.frozen_text_table, labels, w.epsilon, w.logit_scale);
        c.proj = proj.value;
        terms.push_back(ag::precomputed(proj.value, {out.features}, {proj.grad_features}));
        weights.push_back(w.lambda1);
      }
      double hook_value = 0.0;
      if (route.enabled) {
        // Contrastive alignment against detached image features: only the
        // routed prompt tensors move.
        ag::Var table = st.prompts->text_table_var(*st.text, step);
        const auto con = contrastive_i2t_t2i(f, table.value(), labels, st.prompts->temperature());
        hook_value = con.i2t.value + con.t2i.value;
        terms.push_back(ag::precomputed(hook_value, {table}, {con.i2t.grad_text + con.t2i.grad_text}));
        weights.push_back(1.0);
      }
      const double total = stage2_total(c, w) + hook_value;
      if (!std::isfinite(total)) throw NonFiniteError("stage 2 loss is not finite at step " + std::to_string(step));
      ag::backward(ag::weighted_sum(terms, weights));
      opt.step();
      totals.push_back(total);
      sums.proj += c.proj;
      sums.id += c.id;
      sums.id_pre += c.id_pre;
      sums.tri += c.tri;
      sums.tri_pre += c.tri_pre;
    }
    result.loss_curve.push_back(mean(totals));
    const double nb = static_cast<double>(std::max<std::size_t>(totals.size(), 1));
    json lrs = json::object();
    for (const auto& [g, trace] : result.lr_trace) lrs[g] = trace.back();
    log({{"event", "epoch"}, {"stage", 2}, {"step", step}, {"epoch", epoch}, {"lr", lrs},
         {"loss", result.loss_curve.back()},
         {"components", {{"proj", sums.proj / nb}, {"id", sums.id / nb}, {"id_pre", sums.id_pre / nb},
                         {"tri", sums.tri / nb}, {"tri_pre", sums.tri_pre / nb}}}});
  }
  st.image.freeze();
  return result;
}

EvalReport LifelongTrainer::evaluate(int step, const std::vector<DomainDataset>& seen,
                                     const std::vector<DomainDataset>& unseen) {
  std::vector<DomainMetrics> metrics;
  auto run = [&](const DomainDataset& ds, bool is_seen) {
    const auto q = extract_features(state_->image, images_, ds, Split::Query);
    const auto g = extract_features(state_->image, images_, ds, Split::Gallery);
    auto m = rank_and_score(q, g, config_.eval.protocol_for(ds.clothing_state), config_.eval.max_rank);
    m.domain = ds.name;
    m.clothing_state = ds.clothing_state;
    m.seen = is_seen;
    metrics.push_back(std::move(m));
  };
  for (const auto& ds : seen) run(ds, true);
  for (const auto& ds : unseen) run(ds, false);
  return aggregate(std::move(metrics), step);
}

void LifelongTrainer::restore(const Checkpoint& ck, const std::vector<DomainDataset>& domains) {
  if (ck.method != to_string(config_.train.method))
    throw ConfigError("checkpoint method " + ck.method + " does not match train.method " +
                      to_string(config_.train.method));
  state_ = std::make_unique<ModelState>(ModelState::from_checkpoint(ck));
  if (config_.train.method == Method::JOINT) return;
  for (int t = 0; t < ck.step && t < static_cast<int>(domains.size()); ++t) auditor_->close_train(domains[t].name);
}

std::vector<StepResult> LifelongTrainer::run_plan(const std::vector<DomainDataset>& domains,
                                                  const std::vector<DomainDataset>& unseen, const fs::path& run_dir,
                                                  int first_step) {
  if (domains.empty()) throw InvalidArgument("plan needs at least one domain");
  const auto& tc = config_.train;
  fs::create_directories(run_dir);
  {
    std::ofstream out(run_dir / "config.toml");
    out << serialize_config(config_);
    if (!out) throw IOError("cannot write " + (run_dir / "config.toml").string());
  }
  auto log_file = std::make_shared<std::ofstream>(run_dir / "log.jsonl", first_step > 1 ? std::ios::app : std::ios::trunc);
  auto previous = logger_;
  set_logger([log_file, previous](const json& e) {
    *log_file << e.dump() << "\n";
    log_file->flush();
    if (previous) previous(e);
  });
  const std::string hash = config_hash(config_);

  std::vector<DomainDataset> stream;
  if (tc.method == Method::JOINT)
    stream.push_back(merge_train_splits(domains, "joint"));
  else
    stream = domains;

  std::vector<StepResult> results;
  for (int t = first_step; t <= static_cast<int>(stream.size()); ++t) {
    const auto& ds = stream[static_cast<std::size_t>(t - 1)];
    log({{"event", "step_start"}, {"step", t}, {"domain", ds.name}, {"method", to_string(tc.method)}});
    if (tc.method == Method::TEATA) run_stage1(ds, t, tc.stage1_epochs);
    run_stage2(ds, t, tc.stage2_epochs);
    if (tc.method != Method::JOINT) auditor_->close_train(ds.name);

    // Carried state is float32-exact so a resumed run matches an uninterrupted one.
    state_->round_to_float();
    const fs::path step_dir = run_dir / ("step" + std::to_string(t));
    StepResult r;
    r.step = t;
    r.checkpoint = step_dir / "checkpoint";
    save_checkpoint(r.checkpoint, state_->to_checkpoint(t, tc.method, hash));
    if (tc.eval_after_each_step || t == static_cast<int>(stream.size())) {
      std::vector<DomainDataset> seen;
      if (tc.method == Method::JOINT)
        seen = domains;
      else
        seen.assign(domains.begin(), domains.begin() + t);
      r.report = evaluate(t, seen, unseen);
      write_report_files(step_dir / "reports", r.report);
      log({{"event", "eval"}, {"step", t}, {"report", to_json(r.report)}});
    }
    results.push_back(std::move(r));
  }
  logger_ = previous;
  return results;
}

std::vector<DomainDataset> load_domains(const RunConfig& config, const std::vector<DomainEntry>& entries,
                                        bool generate_missing) {
  std::vector<DomainDataset> out;
  for (const auto& e : entries) {
    const fs::path root = config.domain_root(e);
    DomainDataset ds;
    if (generate_missing && !fs::exists(root / "meta.json"))
      ds = generate_synthetic_domain(config.generator(e), root);
    else
      ds = load_domain(root);
    if (ds.clothing_state != e.clothing_state)
      throw ProtocolError("domain " + e.name + ": meta.json says " + to_string(ds.clothing_state) +
                          ", config says " + to_string(e.clothing_state));
    ds.name = e.name;
    out.push_back(std::move(ds));
  }
  return out;
}

void write_report_files(const fs::path& dir, const EvalReport& report) {
  fs::create_directories(dir);
  for (const auto& m : report.domains) {
    std::ofstream out(dir / (m.domain + ".json"));
    out << to_json(m).dump(2) << "\n";
    if (!out) throw IOError("cannot write report for " + m.domain);
  }
  std::ofstream out(dir / "aggregate.json");
  out << to_json(report).dump(2) << "\n";
  if (!out) throw IOError("cannot write " + (dir / "aggregate.json").string());
}

EvalReport read_aggregate(const fs::path& dir) {
  const fs::path p = dir / "aggregate.json";
  if (!fs::exists(p)) throw MissingReports(p.string());
  std::ifstream in(p);
  try {
    return eval_report_from_json(json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(p.string() + ": " + e.what());
  }
}

}  // namespace teata
