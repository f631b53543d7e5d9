#pragma once

#include "teata/autograd.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace teata::nn {

using ag::Var;

/// Ordered, named collection of leaf parameters. Modules keep handles to the
/// same nodes, so loading values through the set updates the modules too.
class ParameterSet {
 public:
  Var add(std::string name, Matrix init);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }

  /// Sets requires_grad on every member.
  void set_trainable(bool trainable);
  bool trainable() const { return trainable_; }
  void zero_grad();

  /// Bitwise hash over names and values, used by freeze audits.
  std::uint64_t hash() const;

 private:
  std::vector<std::pair<std::string, Var>> items_;
  bool trainable_ = true;
};

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out, undefined when bias-free

  static Linear create(ParameterSet& params, const std::string& name, Eigen::Index in, Eigen::Index out, bool bias,
                       Rng& rng);
  Var operator()(const Var& x) const { return ag::linear(x, weight, bias.defined() ? &bias : nullptr); }
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm create(ParameterSet& params, const std::string& name, Eigen::Index width);
  Var operator()(const Var& x) const { return ag::layer_norm(x, gamma, beta); }
};

/// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
struct TransformerBlock {
  LayerNorm ln1;
  Linear qkv;
  Linear attn_out;
  LayerNorm ln2;
  Linear fc;
  Linear fc_out;
  Eigen::Index heads = 1;

  static TransformerBlock create(ParameterSet& params, const std::string& name, Eigen::Index width,
                                 Eigen::Index heads, Eigen::Index mlp_ratio, Rng& rng);
  Var operator()(const Var& x, Eigen::Index batch, Eigen::Index seq, bool causal) const;
};

/// Weight init used across the project: truncated normal with std 0.02.
inline constexpr double kInitStd = 0.02;

}  // namespace teata::nn
