#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "okd/data.hpp"
#include "okd/ffm.hpp"
#include "okd/losses.hpp"

namespace okd {

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool nesterov = true;
};

/// SGD with (Nesterov) momentum and decoupled-by-flag weight decay:
///   d = g + wd * p        (wd only where the parameter's decay flag is set)
///   v = mu * v + d
///   p = p - lr * (d + mu * v)   [nesterov]   or   p = p - lr * v
/// Weight decay applies to conv/linear weights only; batchnorm scales and
/// biases are registered with decay = false.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<NamedParam> params, SgdConfig config);

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  const SgdConfig& config() const { return cfg_; }

  void zero_grad();
  /// One update over all registered parameters; throws naming the parameter
  /// if any gradient is missing.
  void step();

  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<NamedArray> momentum_arrays() const;
  void load_momentum(const std::vector<NamedArray>& arrays);

 private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<double>> momentum_;
  SgdConfig cfg_;
};

/// Step decay schedule: lr(epoch) = base * decay^(#milestones <= epoch).
struct Schedule {
  double base_lr = 0.1;
  std::vector<std::size_t> milestones;
  double decay = 0.1;
  std::size_t total_epochs = 60;

  void validate() const;  // milestones strictly increasing and < total
};

double lr_at(const Schedule& schedule, std::size_t epoch);

/// Thrown when a loss component turns non-finite; carries the component name.
class NanLossError : public Error {
 public:
  NanLossError(const std::string& component, const std::string& msg)
      : Error(msg), component_(component) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

struct TrainOptions {
  std::size_t batch_size = 128;
  bool augment = false;
  std::size_t augment_pad = 4;
};

/// One pass over the training split: per batch, forward all branches, get
/// the fusion weights, build the ensemble target, assemble the composite
/// loss, run one backward sweep and one optimizer step over every trainable
/// parameter (trunk, branches and attention module together). Returns the
/// epoch mean of each loss component.
LossBreakdown train_epoch(MultiBranchNet& net, AttentionMechanism& attention,
                          const Dataset& train, SgdOptimizer& optimizer,
                          const Coefficients& coeffs, Rng& data_rng,
                          const TrainOptions& options);

// --- checkpointing ----------------------------------------------------------
//
// File layout: 8 magic bytes "OKDCKPT1", u32 format version, the named-array
// container (parameters, batchnorm buffers and momentum, prefixed "param.",
// "buffer." and "momentum."), then a u64-length key=value text block with
// epoch, lr, seeds, the data-rng state and free-form extra payload.

struct CheckpointMeta {
  std::size_t epoch = 0;  // epochs completed
  double lr = 0.0;
  std::uint64_t seed_init = 0;
  std::uint64_t seed_shuffle = 0;
  std::array<std::uint64_t, 4> data_rng_state{};
  std::string config_hash;
  std::string extra;  // single-line payload (e.g. net config as JSON)
};

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<NamedArray> arrays;
};

void save_checkpoint(const std::string& path, MultiBranchNet& net,
                     AttentionMechanism* attention, const SgdOptimizer* optimizer,
                     const CheckpointMeta& meta);

/// Parses and validates the whole file before returning; a malformed file
/// throws without touching any live state.
Checkpoint read_checkpoint(const std::string& path);

void restore_training_state(const Checkpoint& checkpoint, MultiBranchNet& net,
                            AttentionMechanism* attention,
                            SgdOptimizer* optimizer, Rng* data_rng);

/// Deployment checkpoint holding only the trunk and the group leader branch.
void save_leader_checkpoint(const std::string& path, MultiBranchNet& net,
                            const CheckpointMeta& meta);
StudentNet load_leader_checkpoint(const std::string& path,
                                  const NetConfig& config);

}  // namespace okd
