#include "teata/prompts.hpp"

#include "teata/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <regex>

namespace teata {

StructuredPromptStore::StructuredPromptStore(int pairs, int token_dim) : pairs_(pairs), token_dim_(token_dim) {
  if (pairs <= 0 || token_dim <= 0) throw InvalidArgument("prompt store: pairs and token_dim must be positive");
}

void StructuredPromptStore::init_domain(int domain_step, int num_identities, std::uint64_t seed) {
  if (has_step(domain_step))
    throw AlreadyInitialized("prompts for step " + std::to_string(domain_step) + " already exist");
  if (num_identities <= 0) throw InvalidArgument("prompt store: num_identities must be positive");
  if (!shared_.defined()) {
    Rng rng(derive_seed(seed, {0x5a, 0}));
    shared_ = ag::Var(truncated_normal(pairs_, token_dim_, nn::kInitStd, rng), true);
    logit_scale_ = ag::Var(Matrix::Constant(1, 1, std::log(1.0 / kInitTemperature)), true);
  }
  Rng rng(derive_seed(seed, {0x5b, static_cast<std::uint64_t>(domain_step)}));
  specific_[domain_step] =
      ag::Var(truncated_normal(static_cast<Eigen::Index>(num_identities) * pairs_, token_dim_, nn::kInitStd, rng), true);
}

int StructuredPromptStore::num_identities(int domain_step) const {
  check_step(domain_step);
  return static_cast<int>(specific_.at(domain_step).rows() / pairs_);
}

std::vector<int> StructuredPromptStore::steps() const {
  std::vector<int> out;
  for (const auto& kv : specific_) out.push_back(kv.first);
  return out;
}

const ag::Var& StructuredPromptStore::shared() const {
  if (!shared_.defined()) throw KeyError("shared prompt tokens not initialized");
  return shared_;
}

const ag::Var& StructuredPromptStore::specific(int domain_step) const {
  check_step(domain_step);
  return specific_.at(domain_step);
}

const ag::Var& StructuredPromptStore::logit_scale() const {
  if (!logit_scale_.defined()) throw KeyError("temperature not initialized");
  return logit_scale_;
}

double StructuredPromptStore::temperature() const {
  const double t = std::exp(-logit_scale().item());
  return std::clamp(t, kMinTemperature, kMaxTemperature);
}

void StructuredPromptStore::clamp_temperature() {
  auto& v = logit_scale_.mutable_value()(0, 0);
  v = std::clamp(v, std::log(1.0 / kMaxTemperature), std::log(1.0 / kMinTemperature));
}

void StructuredPromptStore::check_step(int domain_step) const {
  if (!has_step(domain_step)) throw KeyError("no prompts for step " + std::to_string(domain_step));
}

ag::Var StructuredPromptStore::slots(int domain_step, std::span<const Eigen::Index> identities) const {
  const int n = num_identities(domain_step);
  for (auto id : identities)
    if (id < 0 || id >= n)
      throw KeyError("identity " + std::to_string(id) + " not in step " + std::to_string(domain_step));
  return ag::interleave_pairs(specific(domain_step), shared(), identities);
}

PromptSequence StructuredPromptStore::compose(int domain_step, int identity) const {
  const Eigen::Index id = identity;
  ag::NoGradGuard guard;
  PromptSequence seq;
  seq.token_ids = prompt_template(pairs_);
  seq.slots = slots(domain_step, std::span<const Eigen::Index>(&id, 1)).value();
  return seq;
}

ag::Var StructuredPromptStore::text_table_var(const TextEncoder& encoder, int domain_step) const {
  if (encoder.config().prompt_pairs != pairs_ || encoder.config().token_dim != token_dim_)
    throw ShapeError("text encoder does not match prompt store dimensions");
  const int n = num_identities(domain_step);
  std::vector<Eigen::Index> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), Eigen::Index{0});
  return encoder.encode(slots(domain_step, ids), n);
}

Matrix StructuredPromptStore::text_table(const TextEncoder& encoder, int domain_step) const {
  ag::NoGradGuard guard;
  return text_table_var(encoder, domain_step).value();
}

std::vector<std::pair<std::string, ag::Var>> StructuredPromptStore::named_tensors() const {
  std::vector<std::pair<std::string, ag::Var>> out;
  if (shared_.defined()) {
    out.emplace_back("prompts.shared", shared_);
    out.emplace_back("prompts.logit_scale", logit_scale_);
  }
  for (const auto& [step, x] : specific_) out.emplace_back("prompts.step" + std::to_string(step) + ".specific", x);
  return out;
}

void StructuredPromptStore::restore(const std::string& name, const Matrix& value) {
  static const std::regex specific_re(R"(prompts\.step(\d+)\.specific)");
  std::smatch m;
  if (name == "prompts.shared") {
    if (value.rows() != pairs_ || value.cols() != token_dim_) throw ShapeError("prompts.shared shape mismatch");
    shared_ = ag::Var(value, true);
  } else if (name == "prompts.logit_scale") {
    if (value.rows() != 1 || value.cols() != 1) throw ShapeError("prompts.logit_scale shape mismatch");
    logit_scale_ = ag::Var(value, true);
  } else if (std::regex_match(name, m, specific_re)) {
    if (value.cols() != token_dim_ || value.rows() % pairs_ != 0) throw ShapeError(name + " shape mismatch");
    specific_[std::stoi(m[1].str())] = ag::Var(value, true);
  } else {
    throw KeyError("not a prompt tensor: " + name);
  }
}

}  // namespace teata
