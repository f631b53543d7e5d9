#include "teata/config.hpp"

#include "teata/errors.hpp"
#include "teata/tensor.hpp"

#include <toml.hpp>

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace teata {

namespace fs = std::filesystem;

std::string to_string(Method m) {
  switch (m) {
    case Method::TEATA: return "TEATA";
    case Method::SFT: return "SFT";
    case Method::JOINT: return "JOINT";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "TEATA") return Method::TEATA;
  if (text == "SFT") return Method::SFT;
  if (text == "JOINT") return Method::JOINT;
  throw ConfigError("method must be TEATA, SFT or JOINT, got \"" + text + "\"");
}

std::string to_string(SlowScope s) { return s == SlowScope::All ? "all" : "classifier_prompts"; }

SlowScope parse_slow_scope(const std::string& text) {
  if (text == "all") return SlowScope::All;
  if (text == "classifier_prompts") return SlowScope::ClassifierPrompts;
  throw ConfigError("slow_scope must be all or classifier_prompts, got \"" + text + "\"");
}

ImageEncoderConfig ModelSection::image() const {
  return {image_height, image_width, patch_size, vision_width, image_layers, image_heads, mlp_ratio, embed_dim};
}

TextEncoderConfig ModelSection::text() const {
  return {token_dim, text_layers, text_heads, mlp_ratio, embed_dim, prompt_pairs};
}

SlowPacedSchedule TrainSection::schedule() const {
  SlowPacedSchedule s;
  s.slow_factor = slow_factor;
  s.warmup_start_lr = warmup_start_lr;
  s.base_lr = base_lr;
  s.warmup_epochs = warmup_epochs;
  s.decay_epoch = decay_epoch;
  s.decay_factor = decay_factor;
  s.stage2_epochs = stage2_epochs;
  s.stage1_lr = stage1_lr;
  s.stage1_epochs = stage1_epochs;
  return s;
}

RankingProtocol EvalSection::protocol_for(ClothingState state) const {
  RankingProtocol p;
  if (protocol == "auto")
    p = RankingProtocol::for_state(state);
  else
    p.mode = parse_protocol(protocol);
  p.same_camera_junk = same_camera_junk;
  p.same_clothes_junk = p.mode == ProtocolMode::CC && same_clothes_junk;
  return p;
}

fs::path RunConfig::domain_root(const DomainEntry& d) const { return d.root.empty() ? data.root / d.name : d.root; }

GeneratorParams RunConfig::generator(const DomainEntry& d) const {
  GeneratorParams g;
  g.name = d.name;
  g.seed = d.seed;
  g.num_identities = d.num_identities;
  g.images_per_identity = d.images_per_identity;
  g.clothing_state = d.clothing_state;
  g.num_cameras = d.num_cameras;
  g.noise_std = d.noise_std;
  g.image_height = model.image_height;
  g.image_width = model.image_width;
  return g;
}

void RunConfig::validate() const {
  try {
    model.image().validate();
    model.text().validate();
    train.batch().validate();
    train.weights().validate();
    train.schedule().validate();
  } catch (const Error& e) {
    throw ConfigError(e.message());
  }
  if (train.weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
  if (eval.max_rank < 1) throw ConfigError("eval.max_rank must be positive");
  for (int k : eval.ranks)
    if (k < 1 || k > eval.max_rank) throw ConfigError("eval.ranks entries must lie in [1, max_rank]");
  std::set<std::string> names;
  for (const auto* list : {&data.domains, &eval.unseen})
    for (const auto& d : *list) {
      if (d.name.empty()) throw ConfigError("domain name must be non-empty");
      if (!names.insert(d.name).second) throw ConfigError("duplicate domain name " + d.name);
    }
  if (eval.protocol != "auto" && eval.protocol != "STANDARD" && eval.protocol != "CC")
    throw ConfigError("eval.protocol must be auto, STANDARD or CC");
}

namespace {

// Reads keys out of one TOML table and remembers which were consumed so that
// leftovers can be reported as unknown.
class Reader {
 public:
  Reader(const toml::table* table, std::string path) : table_(table), path_(std::move(path)) {}

  std::string key_path(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

  const toml::node* take(std::string_view key) {
    seen_.insert(std::string(key));
    return table_ ? table_->get(key) : nullptr;
  }

  void get(std::string_view key, int& out) {
    if (auto* n = take(key)) {
      auto v = n->value_exact<std::int64_t>();
      if (!v) throw ConfigError(key_path(key) + ": expected an integer");
      out = static_cast<int>(*v);
    }
  }
  void get(std::string_view key, std::uint64_t& out) {
    if (auto* n = take(key)) {
      auto v = n->value_exact<std::int64_t>();
      if (!v || *v < 0) throw ConfigError(key_path(key) + ": expected a non-negative integer");
      out = static_cast<std::uint64_t>(*v);
    }
  }
  void get(std::string_view key, double& out) {
    if (auto* n = take(key)) {
      if (auto v = n->value_exact<double>())
        out = *v;
      else if (auto i = n->value_exact<std::int64_t>())
        out = static_cast<double>(*i);
      else
        throw ConfigError(key_path(key) + ": expected a number");
    }
  }
  void get(std::string_view key, bool& out) {
    if (auto* n = take(key)) {
      auto v = n->value_exact<bool>();
      if (!v) throw ConfigError(key_path(key) + ": expected a boolean");
      out = *v;
    }
  }
  void get(std::string_view key, std::string& out) {
    if (auto* n = take(key)) {
      auto v = n->value_exact<std::string>();
      if (!v) throw ConfigError(key_path(key) + ": expected a string");
      out = *v;
    }
  }
  void get(std::string_view key, fs::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }
  void get(std::string_view key, std::vector<int>& out) {
    if (auto* n = take(key)) {
      auto* arr = n->as_array();
      if (!arr) throw ConfigError(key_path(key) + ": expected an array of integers");
      out.clear();
      for (const auto& e : *arr) {
        auto v = e.value_exact<std::int64_t>();
        if (!v) throw ConfigError(key_path(key) + ": expected an array of integers");
        out.push_back(static_cast<int>(*v));
      }
    }
  }
  template <class E, class Parse>
  void get_enum(std::string_view key, E& out, Parse parse) {
    if (auto* n = take(key)) {
      auto v = n->value_exact<std::string>();
      if (!v) throw ConfigError(key_path(key) + ": expected a string");
      try {
        out = parse(*v);
      } catch (const Error& e) {
        throw ConfigError(key_path(key) + ": " + e.message());
      }
    }
  }

  const toml::table* subtable(std::string_view key) {
    auto* n = take(key);
    if (!n) return nullptr;
    auto* t = n->as_table();
    if (!t) throw ConfigError(key_path(key) + ": expected a table");
    return t;
  }

  const toml::array* array_of_tables(std::string_view key) {
    auto* n = take(key);
    if (!n) return nullptr;
    auto* a = n->as_array();
    if (!a || (!a->empty() && !a->is_array_of_tables()))
      throw ConfigError(key_path(key) + ": expected an array of tables");
    return a;
  }

  void finish() const {
    if (!table_) return;
    for (const auto& [k, v] : *table_)
      if (!seen_.count(std::string(k.str()))) throw ConfigError(key_path(k.str()) + ": unknown key");
  }

 private:
  const toml::table* table_;
  std::string path_;
  std::set<std::string> seen_;
};

DomainEntry read_domain(const toml::table& t, const std::string& path) {
  Reader r(&t, path);
  DomainEntry d;
  if (!t.contains("name")) throw ConfigError(path + ".name: required");
  if (!t.contains("clothing_state")) throw ConfigError(path + ".clothing_state: required");
  r.get("name", d.name);
  r.get_enum("clothing_state", d.clothing_state, parse_clothing_state);
  r.get("root", d.root);
  r.get("seed", d.seed);
  r.get("num_identities", d.num_identities);
  r.get("images_per_identity", d.images_per_identity);
  r.get("num_cameras", d.num_cameras);
  r.get("noise_std", d.noise_std);
  r.finish();
  return d;
}

std::vector<DomainEntry> read_domains(Reader& parent, std::string_view key) {
  std::vector<DomainEntry> out;
  if (auto* arr = parent.array_of_tables(key))
    for (std::size_t i = 0; i < arr->size(); ++i)
      out.push_back(read_domain(*(*arr)[i].as_table(), parent.key_path(key) + "[" + std::to_string(i) + "]"));
  return out;
}

RunConfig from_table(const toml::table& root) {
  RunConfig c;
  Reader top(&root, "");

  Reader data(top.subtable("data"), "data");
  data.get("root", c.data.root);
  c.data.domains = read_domains(data, "domains");
  data.finish();

  Reader model(top.subtable("model"), "model");
  auto& m = c.model;
  model.get("image_height", m.image_height);
  model.get("image_width", m.image_width);
  model.get("patch_size", m.patch_size);
  model.get("vision_width", m.vision_width);
  model.get("image_layers", m.image_layers);
  model.get("image_heads", m.image_heads);
  model.get("text_layers", m.text_layers);
  model.get("text_heads", m.text_heads);
  model.get("mlp_ratio", m.mlp_ratio);
  model.get("embed_dim", m.embed_dim);
  model.get("token_dim", m.token_dim);
  model.get("prompt_pairs", m.prompt_pairs);
  model.get("pretrained", m.pretrained);
  model.finish();

  Reader train(top.subtable("train"), "train");
  auto& t = c.train;
  train.get_enum("method", t.method, parse_method);
  train.get("seed", t.seed);
  train.get("batch_size", t.batch_size);
  train.get("instances_per_identity", t.instances_per_identity);
  train.get("lambda1", t.lambda1);
  train.get("lambda2", t.lambda2);
  train.get("lambda3", t.lambda3);
  train.get("epsilon", t.epsilon);
  train.get("triplet_margin", t.triplet_margin);
  train.get("logit_scale", t.logit_scale);
  train.get("weight_decay", t.weight_decay);
  train.get("stage1_epochs", t.stage1_epochs);
  train.get("stage1_lr", t.stage1_lr);
  train.get("stage2_epochs", t.stage2_epochs);
  train.get("base_lr", t.base_lr);
  train.get("warmup_start_lr", t.warmup_start_lr);
  train.get("warmup_epochs", t.warmup_epochs);
  train.get("decay_epoch", t.decay_epoch);
  train.get("decay_factor", t.decay_factor);
  train.get("slow_factor", t.slow_factor);
  train.get_enum("slow_scope", t.slow_scope, parse_slow_scope);
  train.get_enum("init_mode", t.init_mode, parse_init_mode);
  train.get("prompt_tuning", t.prompt_tuning);
  train.get_enum("prompt_tuning_scope", t.prompt_tuning_scope, parse_prompt_scope);
  train.get("augment", t.augment);
  train.get("eval_after_each_step", t.eval_after_each_step);
  train.get("strict_audit", t.strict_audit);
  train.finish();

  Reader eval(top.subtable("eval"), "eval");
  auto& e = c.eval;
  e.unseen = read_domains(eval, "unseen");
  eval.get("protocol", e.protocol);
  if (e.protocol != "auto") {
    try {
      parse_protocol(e.protocol);
    } catch (const Error& err) {
      throw ConfigError("eval.protocol: " + err.message());
    }
  }
  eval.get("same_camera_junk", e.same_camera_junk);
  eval.get("same_clothes_junk", e.same_clothes_junk);
  eval.get("ranks", e.ranks);
  eval.get("max_rank", e.max_rank);
  eval.finish();

  top.finish();
  c.validate();
  return c;
}

void apply_override(toml::table& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);

  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) {
    if (p.empty()) throw ConfigError("override key has an empty segment: " + key);
    parts.push_back(p);
  }

  toml::table parsed;
  try {
    parsed = toml::parse("v = " + text);
  } catch (const toml::parse_error&) {
    parsed.insert_or_assign("v", text);
  }
  const toml::node& value = *parsed.get("v");

  toml::node* cur = &root;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    const auto& p = parts[i];
    if (auto* t = cur->as_table()) {
      if (!t->contains(p)) t->insert_or_assign(p, toml::table{});
      cur = t->get(p);
    } else if (auto* a = cur->as_array()) {
      std::size_t idx = 0;
      auto [ptr, ec] = std::from_chars(p.data(), p.data() + p.size(), idx);
      if (ec != std::errc{} || ptr != p.data() + p.size() || idx >= a->size())
        throw ConfigError(key + ": bad array index " + p);
      cur = a->get(idx);
    } else {
      throw ConfigError(key + ": " + p + " is not a table");
    }
  }
  auto* t = cur->as_table();
  if (!t) throw ConfigError(key + ": parent is not a table");
  t->insert_or_assign(parts.back(), value);
}

toml::table domain_table(const DomainEntry& d) {
  return toml::table{{"name", d.name},
                     {"clothing_state", to_string(d.clothing_state)},
                     {"root", d.root.string()},
                     {"seed", static_cast<std::int64_t>(d.seed)},
                     {"num_identities", d.num_identities},
                     {"images_per_identity", d.images_per_identity},
                     {"num_cameras", d.num_cameras},
                     {"noise_std", d.noise_std}};
}

toml::array domain_array(const std::vector<DomainEntry>& ds) {
  toml::array a;
  for (const auto& d : ds) a.push_back(domain_table(d));
  return a;
}

}  // namespace

RunConfig parse_config(std::string_view text, const std::vector<std::string>& overrides) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "TOML parse error: " << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(msg.str());
  }
  for (const auto& o : overrides) apply_override(root, o);
  return from_table(root);
}

RunConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), overrides);
}

std::string serialize_config(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& e = c.eval;
  toml::array ranks;
  for (int k : e.ranks) ranks.push_back(k);
  toml::table root{
      {"data", toml::table{{"root", c.data.root.string()}, {"domains", domain_array(c.data.domains)}}},
      {"model", toml::table{{"image_height", m.image_height},
                            {"image_width", m.image_width},
                            {"patch_size", m.patch_size},
                            {"vision_width", m.vision_width},
                            {"image_layers", m.image_layers},
                            {"image_heads", m.image_heads},
                            {"text_layers", m.text_layers},
                            {"text_heads", m.text_heads},
                            {"mlp_ratio", m.mlp_ratio},
                            {"embed_dim", m.embed_dim},
                            {"token_dim", m.token_dim},
                            {"prompt_pairs", m.prompt_pairs},
                            {"pretrained", m.pretrained.string()}}},
      {"train", toml::table{{"method", to_string(t.method)},
                            {"seed", static_cast<std::int64_t>(t.seed)},
                            {"batch_size", t.batch_size},
                            {"instances_per_identity", t.instances_per_identity},
                            {"lambda1", t.lambda1},
                            {"lambda2", t.lambda2},
                            {"lambda3", t.lambda3},
                            {"epsilon", t.epsilon},
                            {"triplet_margin", t.triplet_margin},
                            {"logit_scale", t.logit_scale},
                            {"weight_decay", t.weight_decay},
                            {"stage1_epochs", t.stage1_epochs},
                            {"stage1_lr", t.stage1_lr},
                            {"stage2_epochs", t.stage2_epochs},
                            {"base_lr", t.base_lr},
                            {"warmup_start_lr", t.warmup_start_lr},
                            {"warmup_epochs", t.warmup_epochs},
                            {"decay_epoch", t.decay_epoch},
                            {"decay_factor", t.decay_factor},
                            {"slow_factor", t.slow_factor},
                            {"slow_scope", to_string(t.slow_scope)},
                            {"init_mode", to_string(t.init_mode)},
                            {"prompt_tuning", t.prompt_tuning},
                            {"prompt_tuning_scope", to_string(t.prompt_tuning_scope)},
                            {"augment", t.augment},
                            {"eval_after_each_step", t.eval_after_each_step},
                            {"strict_audit", t.strict_audit}}},
      {"eval", toml::table{{"unseen", domain_array(e.unseen)},
                           {"protocol", e.protocol},
                           {"same_camera_junk", e.same_camera_junk},
                           {"same_clothes_junk", e.same_clothes_junk},
                           {"ranks", ranks},
                           {"max_rank", e.max_rank}}},
  };
  std::ostringstream out;
  out << root << "\n";
  return out.str();
}

std::string config_hash(const RunConfig& c) { return hex64(fnv1a(serialize_config(c))); }

}  // namespace teata
