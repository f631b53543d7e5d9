#include "teata/optim.hpp"

#include "teata/errors.hpp"

#include <cmath>

namespace teata {

void Adam::add_group(std::string name, std::vector<ag::Var> params, double lr) {
  if (has_group(name)) throw InvalidArgument("Adam: duplicate group " + name);
  Group g{std::move(name), lr, {}};
  for (auto& p : params) {
    if (!p.defined()) throw InvalidArgument("Adam: undefined parameter in group " + g.name);
    g.slots.push_back({p, Matrix::Zero(p.rows(), p.cols()), Matrix::Zero(p.rows(), p.cols()), 0});
  }
  groups_.push_back(std::move(g));
}

void Adam::step() {
  const auto& c = config_;
  for (auto& g : groups_) {
    const double glr = g.lr;
    for (auto& s : g.slots) {
      if (!s.param.has_grad()) continue;
      const Matrix& grad = s.param.node()->grad;
      ++s.steps;
      s.m = c.beta1 * s.m + (1.0 - c.beta1) * grad;
      s.v = c.beta2 * s.v + (1.0 - c.beta2) * grad.cwiseProduct(grad);
      const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.steps));
      const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.steps));
      Matrix& p = s.param.mutable_value();
      p *= 1.0 - glr * c.weight_decay;
      p.array() -= glr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + c.eps);
      s.param.zero_grad();
    }
  }
}

void Adam::zero_grad() {
  for (auto& g : groups_)
    for (auto& s : g.slots) s.param.zero_grad();
}

void Adam::set_lr(const std::string& group, double lr) {
  for (auto& g : groups_)
    if (g.name == group) {
      g.lr = lr;
      return;
    }
  throw KeyError("no optimizer group " + group);
}

double Adam::lr(const std::string& group) const {
  for (const auto& g : groups_)
    if (g.name == group) return g.lr;
  throw KeyError("no optimizer group " + group);
}

bool Adam::has_group(const std::string& group) const {
  for (const auto& g : groups_)
    if (g.name == group) return true;
  return false;
}

}  // namespace teata
