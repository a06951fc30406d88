#pragma once

#include <memory>
#include <string>
#include <vector>

#include "okd/branch_net.hpp"

namespace okd {

enum class AttentionKind { FeatureFusion, Gate, SelfAttention, Uniform };

std::string attention_kind_name(AttentionKind kind);
AttentionKind attention_kind_from_name(const std::string& name);

/// Produces per-sample importance weights over the m-1 auxiliary branches.
/// Every mechanism returns a [B, m-1] tensor whose rows lie on the unit
/// simplex (entries >= 0, summing to 1).
class AttentionMechanism {
 public:
  virtual ~AttentionMechanism() = default;
  virtual AttentionKind kind() const = 0;
  virtual Tensor weights(const BranchOutput& out, Mode mode) = 0;
  virtual std::vector<NamedParam> named_parameters() { return {}; }
  virtual std::vector<NamedBuffer> named_buffers() { return {}; }
};

/// Weighted ensemble teacher: t_e[b] = sum_i weights[b,i] * logits_i[b].
/// The branch logits enter detached, so the branches are never trained to
/// move their own teacher; the weights stay differentiable, which is what
/// trains the fusion module through the first-level distillation loss.
Tensor ensemble_target(const Tensor& weights,
                       const std::vector<Tensor>& logits);

/// Fuses the concatenated last-block feature maps of the auxiliary branches
/// through a small convolutional center block (1x1 fuse conv -> BN -> ReLU
/// -> 3x3 conv -> BN -> ReLU -> global avg pool -> linear) and normalizes
/// the resulting scores with a softmax.
class FeatureFusionModule : public AttentionMechanism {
 public:
  FeatureFusionModule(std::size_t aux_branches, std::size_t feature_channels,
                      Rng& rng);
  AttentionKind kind() const override { return AttentionKind::FeatureFusion; }
  Tensor weights(const BranchOutput& out, Mode mode) override;
  std::vector<NamedParam> named_parameters() override;
  std::vector<NamedBuffer> named_buffers() override;

 private:
  std::size_t aux_;
  Conv2d conv1_;  // 1x1, fuses (m-1)*ch -> ch
  BatchNorm2d bn1_;
  Conv2d conv2_;  // 3x3
  BatchNorm2d bn2_;
  Linear fc_;  // ch -> m-1 scores
};

/// Gate-style baseline: scores come from the shared trunk's mid-level
/// feature map (global average pooled, one linear layer). Mirrors gating on
/// backbone block-2 features; deliberately minimal for ablation use.
class GateAttention : public AttentionMechanism {
 public:
  GateAttention(std::size_t aux_branches, std::size_t trunk_channels, Rng& rng);
  AttentionKind kind() const override { return AttentionKind::Gate; }
  Tensor weights(const BranchOutput& out, Mode mode) override;
  std::vector<NamedParam> named_parameters() override;

 private:
  std::size_t aux_;
  Linear fc_;
};

/// Dot-product self-attention baseline over pooled per-branch features with
/// two linear transformations (query/key); row-softmaxed scores averaged
/// over rows give one weight per branch.
class SelfAttention : public AttentionMechanism {
 public:
  SelfAttention(std::size_t aux_branches, std::size_t feature_channels,
                Rng& rng);
  AttentionKind kind() const override { return AttentionKind::SelfAttention; }
  Tensor weights(const BranchOutput& out, Mode mode) override;
  /// Row-normalized [B, m-1, m-1] attention before the per-branch reduction.
  Tensor attention_matrix(const BranchOutput& out);
  std::vector<NamedParam> named_parameters() override;

 private:
  std::size_t aux_;
  Linear query_;
  Linear key_;
};

/// Plain averaging: constant weights 1/(m-1).
class UniformAttention : public AttentionMechanism {
 public:
  explicit UniformAttention(std::size_t aux_branches) : aux_(aux_branches) {}
  AttentionKind kind() const override { return AttentionKind::Uniform; }
  Tensor weights(const BranchOutput& out, Mode mode) override;

 private:
  std::size_t aux_;
};

std::unique_ptr<AttentionMechanism> make_attention(AttentionKind kind,
                                                   const MultiBranchNet& net,
                                                   Rng& rng);

}  // namespace okd
