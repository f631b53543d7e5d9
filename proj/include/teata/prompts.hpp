#pragma once

#include "teata/encoders.hpp"

#include <cstdint>
#include <map>
#include <span>

namespace teata {

/// Learnable structured prompt tokens.
///
/// One shared block Y (M x d_tok) lives for the whole run. Each domain step
/// owns a block of identity-specific tokens X stored as (N*M) x d_tok, where
/// rows [j*M, (j+1)*M) belong to identity j. The contrastive temperature is
/// kept here too, as a log-scale scalar that persists alongside Y.
class StructuredPromptStore {
 public:
  StructuredPromptStore(int pairs, int token_dim);

  /// Allocates X for `domain_step`; allocates Y and the temperature on first use.
  void init_domain(int domain_step, int num_identities, std::uint64_t seed);

  bool has_step(int domain_step) const { return specific_.count(domain_step) != 0; }
  bool has_shared() const { return shared_.defined(); }
  int pairs() const { return pairs_; }
  int token_dim() const { return token_dim_; }
  int num_identities(int domain_step) const;
  std::vector<int> steps() const;

  const ag::Var& shared() const;
  const ag::Var& specific(int domain_step) const;
  const ag::Var& logit_scale() const;

  /// Effective temperature exp(-logit_scale), clamped to [kMinTemperature, kMaxTemperature].
  double temperature() const;
  /// Clamps the stored log-scale so the effective temperature stays in range.
  void clamp_temperature();

  /// Slot rows for the listed identities, interleaved X1 Y1 ... XM YM (differentiable).
  ag::Var slots(int domain_step, std::span<const Eigen::Index> identities) const;

  PromptSequence compose(int domain_step, int identity) const;

  /// T^(t): row j = text embedding of identity j's prompt. Differentiable in X, Y.
  ag::Var text_table_var(const TextEncoder& encoder, int domain_step) const;
  Matrix text_table(const TextEncoder& encoder, int domain_step) const;

  /// Named tensors for checkpointing (prompts.shared, prompts.logit_scale, prompts.step{t}.specific).
  std::vector<std::pair<std::string, ag::Var>> named_tensors() const;
  /// Restores a tensor by checkpoint name, allocating it if needed.
  void restore(const std::string& name, const Matrix& value);

  static constexpr double kMinTemperature = 0.01;
  static constexpr double kMaxTemperature = 1.0;
  static constexpr double kInitTemperature = 0.07;

 private:
  void check_step(int domain_step) const;

  int pairs_;
  int token_dim_;
  ag::Var shared_;
  ag::Var logit_scale_;
  std::map<int, ag::Var> specific_;
};

}  // namespace teata
