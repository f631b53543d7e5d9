#pragma once

#include "teata/config.hpp"
#include "teata/lifelong.hpp"

#include <cstdint>
#include <cstring>
#include <string>

namespace teata::testing {

// FNV-1a over the raw bytes of every tensor whose name starts with prefix.
inline std::uint64_t param_hash(const ModelState& state, const std::string& prefix) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, var] : state.named_tensors()) {
    if (name.rfind(prefix, 0) != 0) continue;
    for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    const Matrix& m = var.value();
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i)
      h = (h ^ bytes[i]) * 1099511628211ull;
  }
  return h;
}

// Small, fast run configuration over SC/CC alternating domains.
inline RunConfig toy_config(const std::filesystem::path& data_root, int num_domains, int identities = 8,
                            int per_identity = 8) {
  RunConfig c;
  c.data.root = data_root;
  for (int i = 0; i < num_domains; ++i) {
    DomainEntry d;
    d.name = "d" + std::to_string(i + 1);
    d.clothing_state = i % 2 == 0 ? ClothingState::SC : ClothingState::CC;
    d.seed = 100 + static_cast<std::uint64_t>(i);
    d.num_identities = identities;
    d.images_per_identity = per_identity;
    c.data.domains.push_back(d);
  }
  c.train.batch_size = 16;
  c.train.instances_per_identity = 4;
  c.train.stage1_epochs = 3;
  c.train.stage1_lr = 1e-2;
  c.train.stage2_epochs = 3;
  c.train.base_lr = 1e-3;
  c.train.warmup_start_lr = 1e-4;
  c.train.warmup_epochs = 1;
  c.train.decay_epoch = 2;
  return c;
}

}  // namespace teata::testing
