#include "okd/branch_net.hpp"

namespace okd {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

Block make_block(std::size_t in_ch, const BlockSpec& spec, Rng& rng) {
  if (spec.channels == 0) fail("net build: block with zero channels");
  Block b;
  b.conv1 = make_conv(in_ch, spec.channels, 3, 1, 1, rng);
  b.bn1 = make_batchnorm(spec.channels);
  b.conv2 = make_conv(spec.channels, spec.channels, 3, 1, 1, rng);
  b.bn2 = make_batchnorm(spec.channels);
  b.pool = spec.pool;
  return b;
}

Branch make_branch(std::size_t in_ch, const NetConfig& cfg, Rng& rng) {
  Branch br;
  std::size_t ch = in_ch;
  for (const BlockSpec& spec : cfg.branch) {
    br.blocks.push_back(make_block(ch, spec, rng));
    ch = spec.channels;
  }
  br.classifier = make_linear(ch, cfg.num_classes, rng);
  return br;
}

void block_params(const std::string& prefix, Block& b,
                  std::vector<NamedParam>& out) {
  out.push_back({prefix + ".conv1.weight", b.conv1.weight, true});
  out.push_back({prefix + ".bn1.gamma", b.bn1.gamma, false});
  out.push_back({prefix + ".bn1.beta", b.bn1.beta, false});
  out.push_back({prefix + ".conv2.weight", b.conv2.weight, true});
  out.push_back({prefix + ".bn2.gamma", b.bn2.gamma, false});
  out.push_back({prefix + ".bn2.beta", b.bn2.beta, false});
}

void block_buffers(const std::string& prefix, Block& b,
                   std::vector<NamedBuffer>& out) {
  out.push_back({prefix + ".bn1.running_mean", &b.bn1.running_mean});
  out.push_back({prefix + ".bn1.running_var", &b.bn1.running_var});
  out.push_back({prefix + ".bn2.running_mean", &b.bn2.running_mean});
  out.push_back({prefix + ".bn2.running_var", &b.bn2.running_var});
}

void branch_params(const std::string& prefix, Branch& br,
                   std::vector<NamedParam>& out) {
  for (std::size_t i = 0; i < br.blocks.size(); ++i) {
    block_params(prefix + ".block." + std::to_string(i), br.blocks[i], out);
  }
  out.push_back({prefix + ".classifier.weight", br.classifier.weight, true});
  out.push_back({prefix + ".classifier.bias", br.classifier.bias, false});
}

void branch_buffers(const std::string& prefix, Branch& br,
                    std::vector<NamedBuffer>& out) {
  for (std::size_t i = 0; i < br.blocks.size(); ++i) {
    block_buffers(prefix + ".block." + std::to_string(i), br.blocks[i], out);
  }
}

}  // namespace

void NetConfig::validate() const {
  if (branches < 2) {
    fail("net config: need at least 2 branches (auxiliaries + group leader), got " +
         std::to_string(branches));
  }
  if (num_classes < 2) {
    fail("net config: need at least 2 classes, got " +
         std::to_string(num_classes));
  }
  if (branch.empty()) fail("net config: branch block list must not be empty");
  if (in_channels == 0 || height == 0 || width == 0) {
    fail("net config: invalid input shape");
  }
  std::size_t h = height, w = width;
  auto apply = [&](const BlockSpec& spec, const char* where) {
    if (spec.channels == 0) {
      fail(std::string("net config: zero-channel block in ") + where);
    }
    if (spec.pool) {
      if (h % 2 != 0 || w % 2 != 0 || h < 2 || w < 2) {
        fail(std::string("net config: cannot 2x2-pool odd spatial extent ") +
             std::to_string(h) + "x" + std::to_string(w) + " in " + where);
      }
      h /= 2;
      w /= 2;
    }
  };
  for (const BlockSpec& spec : trunk) apply(spec, "trunk");
  for (const BlockSpec& spec : branch) apply(spec, "branch");
}

Tensor Block::forward(const Tensor& x, Mode mode) {
  Tensor h = relu(bn1.forward(conv1.forward(x), mode));
  h = relu(bn2.forward(conv2.forward(h), mode));
  if (pool) h = maxpool2(h);
  return h;
}

MultiBranchNet MultiBranchNet::build(const NetConfig& config,
                                     std::uint64_t seed) {
  Rng rng(seed);
  return build(config, rng);
}

MultiBranchNet MultiBranchNet::build(const NetConfig& config, Rng& rng) {
  config.validate();
  MultiBranchNet net;
  net.cfg_ = config;
  std::size_t ch = config.in_channels;
  std::size_t h = config.height, w = config.width;
  for (const BlockSpec& spec : config.trunk) {
    net.trunk_.push_back(make_block(ch, spec, rng));
    ch = spec.channels;
    if (spec.pool) {
      h /= 2;
      w /= 2;
    }
  }
  const std::size_t trunk_ch = ch;
  for (std::size_t b = 0; b < config.branches; ++b) {
    net.branches_.push_back(make_branch(trunk_ch, config, rng));
  }
  for (const BlockSpec& spec : config.branch) {
    if (spec.pool) {
      h /= 2;
      w /= 2;
    }
  }
  net.feat_h_ = h;
  net.feat_w_ = w;
  return net;
}

BranchOutput MultiBranchNet::forward(const Tensor& batch, Mode mode) {
  const Shape& s = batch.shape();
  if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.height ||
      s[3] != cfg_.width) {
    fail("net forward: batch " + shape_str(s) + " does not match input shape [" +
         std::to_string(cfg_.in_channels) + ", " + std::to_string(cfg_.height) +
         ", " + std::to_string(cfg_.width) + "]");
  }
  BranchOutput out;
  Tensor h = batch;
  for (Block& blk : trunk_) h = blk.forward(h, mode);
  out.trunk_mid = h;
  const std::size_t m = branches_.size();
  out.logits.reserve(m);
  out.features.reserve(m - 1);
  for (std::size_t b = 0; b < m; ++b) {
    Tensor f = h;
    for (Block& blk : branches_[b].blocks) f = blk.forward(f, mode);
    Tensor pooled = global_avg_pool(f);
    out.logits.push_back(branches_[b].classifier.forward(pooled));
    if (b + 1 < m) out.features.push_back(f);
  }
  return out;
}

std::vector<Tensor> MultiBranchNet::classifier_weights() const {
  std::vector<Tensor> ws;
  ws.reserve(branches_.size());
  for (const Branch& br : branches_) ws.push_back(br.classifier.weight);
  return ws;
}

std::vector<NamedParam> MultiBranchNet::named_parameters() {
  std::vector<NamedParam> out;
  for (std::size_t i = 0; i < trunk_.size(); ++i) {
    block_params("trunk." + std::to_string(i), trunk_[i], out);
  }
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    branch_params("branch." + std::to_string(b), branches_[b], out);
  }
  return out;
}

std::vector<NamedBuffer> MultiBranchNet::named_buffers() {
  std::vector<NamedBuffer> out;
  for (std::size_t i = 0; i < trunk_.size(); ++i) {
    block_buffers("trunk." + std::to_string(i), trunk_[i], out);
  }
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    branch_buffers("branch." + std::to_string(b), branches_[b], out);
  }
  return out;
}

std::size_t MultiBranchNet::branch_param_count(std::size_t branch_index) const {
  if (branch_index >= branches_.size()) {
    fail("branch_param_count: branch index out of range");
  }
  std::size_t n = 0;
  auto& self = const_cast<MultiBranchNet&>(*this);
  std::vector<NamedParam> ps;
  branch_params("branch", self.branches_[branch_index], ps);
  for (const NamedParam& p : ps) n += p.tensor.size();
  return n;
}

std::size_t MultiBranchNet::trunk_out_channels() const {
  return cfg_.trunk.empty() ? cfg_.in_channels : cfg_.trunk.back().channels;
}

std::size_t MultiBranchNet::branch_out_channels() const {
  return cfg_.branch.back().channels;
}

StudentNet StudentNet::build(const NetConfig& config) {
  config.validate();
  Rng rng(0);  // placeholder values, expected to be overwritten by a restore
  StudentNet s;
  std::size_t ch = config.in_channels;
  for (const BlockSpec& spec : config.trunk) {
    s.trunk.push_back(make_block(ch, spec, rng));
    ch = spec.channels;
  }
  s.branch = make_branch(ch, config, rng);
  return s;
}

Tensor StudentNet::forward(const Tensor& batch, Mode mode) {
  Tensor h = batch;
  for (Block& blk : trunk) h = blk.forward(h, mode);
  for (Block& blk : branch.blocks) h = blk.forward(h, mode);
  return branch.classifier.forward(global_avg_pool(h));
}

std::vector<NamedParam> StudentNet::named_parameters() {
  std::vector<NamedParam> out;
  for (std::size_t i = 0; i < trunk.size(); ++i) {
    block_params("trunk." + std::to_string(i), trunk[i], out);
  }
  branch_params("leader", branch, out);
  return out;
}

std::vector<NamedBuffer> StudentNet::named_buffers() {
  std::vector<NamedBuffer> out;
  for (std::size_t i = 0; i < trunk.size(); ++i) {
    block_buffers("trunk." + std::to_string(i), trunk[i], out);
  }
  branch_buffers("leader", branch, out);
  return out;
}

}  // namespace okd
