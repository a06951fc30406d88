#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "okd/nn.hpp"

namespace okd {

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool decay = true;  // participates in weight decay
};

struct NamedBuffer {
  std::string name;
  std::vector<double>* data = nullptr;
};

struct BlockSpec {
  std::size_t channels = 16;
  bool pool = true;
};

/// Topology description: a shared low-level trunk followed by `branches`
/// identical-architecture branches (branch index branches-1 is the group
/// leader), each ending in global-average-pool + linear classifier.
struct NetConfig {
  std::size_t num_classes = 10;
  std::size_t branches = 4;  // m, auxiliaries plus one group leader
  std::vector<BlockSpec> trunk;
  std::vector<BlockSpec> branch;
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;

  void validate() const;  // throws listing the violated constraint
};

/// conv-BN-ReLU x2 with an optional trailing 2x2 max pool.
struct Block {
  Conv2d conv1;
  BatchNorm2d bn1;
  Conv2d conv2;
  BatchNorm2d bn2;
  bool pool = true;

  Tensor forward(const Tensor& x, Mode mode);
};

struct Branch {
  std::vector<Block> blocks;
  Linear classifier;
};

/// One forward pass over all branches. logits[i] are the pre-softmax class
/// scores of branch i; features[i] (auxiliary branches only) is the spatial
/// output of branch i's last block, before global average pooling.
struct BranchOutput {
  std::vector<Tensor> logits;    // m tensors [B, C]; index m-1 = group leader
  std::vector<Tensor> features;  // m-1 tensors [B, ch, h, w]
  Tensor trunk_mid;              // shared trunk output, input to every branch
};

class MultiBranchNet {
 public:
  static MultiBranchNet build(const NetConfig& config, std::uint64_t seed);
  static MultiBranchNet build(const NetConfig& config, Rng& rng);

  /// Runs the trunk once and every branch on the shared trunk output.
  BranchOutput forward(const Tensor& batch, Mode mode);

  /// Classifier weight matrices W_1..W_m, shape (features, classes) each.
  std::vector<Tensor> classifier_weights() const;

  std::vector<NamedParam> named_parameters();
  std::vector<NamedBuffer> named_buffers();

  const NetConfig& config() const { return cfg_; }
  std::size_t branch_param_count(std::size_t branch_index) const;
  std::size_t trunk_out_channels() const;
  std::size_t branch_out_channels() const;
  std::size_t branch_feature_height() const { return feat_h_; }
  std::size_t branch_feature_width() const { return feat_w_; }

  std::vector<Block>& trunk() { return trunk_; }
  std::vector<Branch>& branches() { return branches_; }

 private:
  NetConfig cfg_;
  std::vector<Block> trunk_;
  std::vector<Branch> branches_;
  std::size_t feat_h_ = 0, feat_w_ = 0;  // spatial dims of the branch output
};

/// Deployment model: the shared trunk plus the group leader branch only.
/// forward() executes the exact op sequence the full net uses for the
/// leader, so restored leader logits match the full model bitwise.
struct StudentNet {
  std::vector<Block> trunk;
  Branch branch;

  static StudentNet build(const NetConfig& config);  // zero-seed placeholder params
  Tensor forward(const Tensor& batch, Mode mode);
  std::vector<NamedParam> named_parameters();
  std::vector<NamedBuffer> named_buffers();
};

}  // namespace okd
