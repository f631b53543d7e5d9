#pragma once

#include "teata/autograd.hpp"

#include <string>
#include <vector>

namespace teata {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled: p -= lr * weight_decay * p
};

/// Adam with decoupled weight decay over named parameter groups, each with
/// its own learning rate.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void add_group(std::string name, std::vector<ag::Var> params, double lr = 0.0);
  void set_lr(const std::string& group, double lr);
  double lr(const std::string& group) const;
  bool has_group(const std::string& group) const;

  /// Updates every parameter that has a gradient, then clears gradients.
  void step();
  void zero_grad();

  const AdamConfig& config() const { return config_; }

 private:
  struct Slot {
    ag::Var param;
    Matrix m;
    Matrix v;
    long steps = 0;
  };
  struct Group {
    std::string name;
    double lr = 0.0;
    std::vector<Slot> slots;
  };

  AdamConfig config_;
  std::vector<Group> groups_;
};

}  // namespace teata
