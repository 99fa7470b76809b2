#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rl4seg/autodiff.hpp"
#include "rl4seg/tensor.hpp"

namespace rl4seg {

struct AdamConfig {
  real lr = real(1e-3);
  real beta1 = real(0.9);
  real beta2 = real(0.999);
  real eps = real(1e-8);
};

// Ordered collection of named differentiable parameters plus per-parameter
// Adam moment buffers. Iteration order is insertion order everywhere, which
// keeps updates and checkpoints deterministic.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    ad::Var var;
    Tensor m, v;
    int64_t step = 0;
  };

  ad::Var add(const std::string& name, Tensor init);
  const ad::Var& get(const std::string& name) const;
  bool has(const std::string& name) const;

  size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  void zero_grads();

  // Snapshot of current parameter values (no optimizer state).
  std::map<std::string, Tensor> values() const;
  void load_values(const std::map<std::string, Tensor>& values);

  // Deep copy; cloned Vars are fresh leaves.
  ParamSet clone() const;

  uint64_t checksum() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

// One Adam update from explicit per-name gradients. Parameters whose gradient
// contains a non-finite entry are skipped and counted (the step counter for
// them does not advance).
int adam_step(ParamSet& params, const std::map<std::string, Tensor>& grads, const AdamConfig& cfg);

// Convenience: consume the gradients accumulated on the ParamSet's own Vars.
int adam_step_from_grads(ParamSet& params, const AdamConfig& cfg, real grad_scale = real(1));

// Checkpoint file: magic "RL4S", version, parameter records (name, dtype,
// dims, values), optimizer-state records in the same layout, then an optional
// embedded config snapshot.
void save_checkpoint(const ParamSet& params, const std::string& path,
                     const std::string& config_snapshot = "");
ParamSet load_checkpoint(const std::string& path, std::string* config_snapshot = nullptr);

}  // namespace rl4seg
