#include "teata/nn.hpp"

#include "teata/errors.hpp"

namespace teata::nn {

Var ParameterSet::add(std::string name, Matrix init) {
  if (contains(name)) throw InvalidArgument("duplicate parameter " + name);
  Var v(std::move(init), trainable_);
  items_.emplace_back(std::move(name), v);
  return v;
}

const Var& ParameterSet::get(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return v;
  throw KeyError("unknown parameter " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& item : items_)
    if (item.first == name) return true;
  return false;
}

void ParameterSet::set_trainable(bool trainable) {
  trainable_ = trainable;
  for (auto& item : items_) {
    item.second.set_requires_grad(trainable);
    if (!trainable) item.second.zero_grad();
  }
}

void ParameterSet::zero_grad() {
  for (auto& item : items_) item.second.zero_grad();
}

std::uint64_t ParameterSet::hash() const {
  std::uint64_t h = fnv1a(std::string_view("params"));
  for (const auto& [name, v] : items_) {
    h = fnv1a(std::as_bytes(std::span<const char>(name.data(), name.size())), h);
    h = hash_matrix(v.value(), h);
  }
  return h;
}

Linear Linear::create(ParameterSet& params, const std::string& name, Eigen::Index in, Eigen::Index out, bool bias,
                      Rng& rng) {
  Linear l;
  l.weight = params.add(name + ".weight", truncated_normal(in, out, kInitStd, rng));
  if (bias) l.bias = params.add(name + ".bias", Matrix::Zero(1, out));
  return l;
}

LayerNorm LayerNorm::create(ParameterSet& params, const std::string& name, Eigen::Index width) {
  LayerNorm ln;
  ln.gamma = params.add(name + ".gamma", Matrix::Ones(1, width));
  ln.beta = params.add(name + ".beta", Matrix::Zero(1, width));
  return ln;
}

TransformerBlock TransformerBlock::create(ParameterSet& params, const std::string& name, Eigen::Index width,
                                          Eigen::Index heads, Eigen::Index mlp_ratio, Rng& rng) {
  if (heads <= 0 || width % heads != 0) throw InvalidArgument(name + ": width must be divisible by heads");
  TransformerBlock b;
  b.heads = heads;
  b.ln1 = LayerNorm::create(params, name + ".ln1", width);
  b.qkv = Linear::create(params, name + ".qkv", width, 3 * width, true, rng);
  b.attn_out = Linear::create(params, name + ".attn_out", width, width, true, rng);
  b.ln2 = LayerNorm::create(params, name + ".ln2", width);
  b.fc = Linear::create(params, name + ".fc", width, mlp_ratio * width, true, rng);
  b.fc_out = Linear::create(params, name + ".fc_out", mlp_ratio * width, width, true, rng);
  return b;
}

Var TransformerBlock::operator()(const Var& x, Eigen::Index batch, Eigen::Index seq, bool causal) const {
  Var h = ag::attention(qkv(ln1(x)), batch, seq, heads, causal);
  Var y = ag::add(x, attn_out(h));
  Var m = fc_out(ag::quick_gelu(fc(ln2(y))));
  return ag::add(y, m);
}

}  // namespace teata::nn
