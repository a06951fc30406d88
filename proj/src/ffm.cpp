#include "okd/ffm.hpp"

#include <cmath>

namespace okd {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

void check_features(const std::vector<Tensor>& features, std::size_t aux) {
  if (features.size() != aux) {
    fail("attention: expected " + std::to_string(aux) +
         " auxiliary feature maps, got " + std::to_string(features.size()));
  }
  for (std::size_t i = 1; i < features.size(); ++i) {
    if (features[i].shape() != features[0].shape()) {
      fail("attention: feature shape mismatch between branches: " +
           shape_str(features[0].shape()) + " vs " +
           shape_str(features[i].shape()));
    }
  }
}

}  // namespace

std::string attention_kind_name(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::FeatureFusion: return "ffm";
    case AttentionKind::Gate: return "gate";
    case AttentionKind::SelfAttention: return "self_attention";
    case AttentionKind::Uniform: return "uniform";
  }
  fail("attention_kind_name: unknown kind");
}

AttentionKind attention_kind_from_name(const std::string& name) {
  if (name == "ffm") return AttentionKind::FeatureFusion;
  if (name == "gate") return AttentionKind::Gate;
  if (name == "self_attention") return AttentionKind::SelfAttention;
  if (name == "uniform") return AttentionKind::Uniform;
  fail("unknown attention mechanism '" + name +
       "'; expected ffm, gate, self_attention or uniform");
}

Tensor ensemble_target(const Tensor& weights,
                       const std::vector<Tensor>& logits) {
  if (!weights.defined() || weights.rank() != 2) {
    fail("ensemble_target: weights must be [B, m-1]");
  }
  const std::size_t n = weights.shape()[1];
  if (n != logits.size()) {
    fail("ensemble_target: weight width " + std::to_string(n) +
         " does not match " + std::to_string(logits.size()) +
         " logits tensors");
  }
  if (n == 0) fail("ensemble_target: empty logits list");
  for (const Tensor& t : logits) {
    if (t.rank() != 2 || t.shape()[0] != weights.shape()[0] ||
        t.shape() != logits[0].shape()) {
      fail("ensemble_target: logits shape mismatch, " + shape_str(t.shape()) +
           " with weights " + shape_str(weights.shape()));
    }
  }
  Tensor acc;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor wi = slice(weights, 1, i, 1);  // [B, 1]
    Tensor term = mul(wi, logits[i].detach());
    acc = i == 0 ? term : add(acc, term);
  }
  return acc;
}

// ---------------------------------------------------------------------------
// FeatureFusionModule

FeatureFusionModule::FeatureFusionModule(std::size_t aux_branches,
                                         std::size_t feature_channels,
                                         Rng& rng)
    : aux_(aux_branches) {
  if (aux_ == 0) fail("ffm: need at least one auxiliary branch");
  conv1_ = make_conv(aux_ * feature_channels, feature_channels, 1, 1, 0, rng);
  bn1_ = make_batchnorm(feature_channels);
  conv2_ = make_conv(feature_channels, feature_channels, 3, 1, 1, rng);
  bn2_ = make_batchnorm(feature_channels);
  fc_ = make_linear(feature_channels, aux_, rng);
}

Tensor FeatureFusionModule::weights(const BranchOutput& out, Mode mode) {
  check_features(out.features, aux_);
  Tensor h = concat(out.features, 1);
  h = relu(bn1_.forward(conv1_.forward(h), mode));
  h = relu(bn2_.forward(conv2_.forward(h), mode));
  Tensor scores = fc_.forward(global_avg_pool(h));
  return softmax_T(scores, 1.0);
}

std::vector<NamedParam> FeatureFusionModule::named_parameters() {
  return {
      {"ffm.conv1.weight", conv1_.weight, true},
      {"ffm.bn1.gamma", bn1_.gamma, false},
      {"ffm.bn1.beta", bn1_.beta, false},
      {"ffm.conv2.weight", conv2_.weight, true},
      {"ffm.bn2.gamma", bn2_.gamma, false},
      {"ffm.bn2.beta", bn2_.beta, false},
      {"ffm.fc.weight", fc_.weight, true},
      {"ffm.fc.bias", fc_.bias, false},
  };
}

std::vector<NamedBuffer> FeatureFusionModule::named_buffers() {
  return {
      {"ffm.bn1.running_mean", &bn1_.running_mean},
      {"ffm.bn1.running_var", &bn1_.running_var},
      {"ffm.bn2.running_mean", &bn2_.running_mean},
      {"ffm.bn2.running_var", &bn2_.running_var},
  };
}

// ---------------------------------------------------------------------------
// GateAttention

GateAttention::GateAttention(std::size_t aux_branches,
                             std::size_t trunk_channels, Rng& rng)
    : aux_(aux_branches) {
  fc_ = make_linear(trunk_channels, aux_, rng);
}

Tensor GateAttention::weights(const BranchOutput& out, Mode) {
  if (!out.trunk_mid.defined() || out.trunk_mid.rank() != 4) {
    fail("gate attention: missing trunk feature map");
  }
  Tensor pooled = global_avg_pool(out.trunk_mid);
  return softmax_T(fc_.forward(pooled), 1.0);
}

std::vector<NamedParam> GateAttention::named_parameters() {
  return {
      {"gate.fc.weight", fc_.weight, true},
      {"gate.fc.bias", fc_.bias, false},
  };
}

// ---------------------------------------------------------------------------
// SelfAttention

SelfAttention::SelfAttention(std::size_t aux_branches,
                             std::size_t feature_channels, Rng& rng)
    : aux_(aux_branches) {
  query_ = make_linear(feature_channels, feature_channels, rng);
  key_ = make_linear(feature_channels, feature_channels, rng);
}

Tensor SelfAttention::attention_matrix(const BranchOutput& out) {
  check_features(out.features, aux_);
  const std::size_t batch = out.features[0].shape()[0];
  const double scale = 1.0 / std::sqrt(double(query_.weight.shape()[1]));
  std::vector<Tensor> queries, keys;
  for (const Tensor& f : out.features) {
    Tensor pooled = global_avg_pool(f);
    queries.push_back(query_.forward(pooled));
    keys.push_back(key_.forward(pooled));
  }
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < aux_; ++i) {
    std::vector<Tensor> scores;
    for (std::size_t j = 0; j < aux_; ++j) {
      Tensor s = sum(mul(queries[i], keys[j]), {1}, true);  // [B, 1]
      scores.push_back(mul_scalar(s, scale));
    }
    Tensor row = softmax_T(concat(scores, 1), 1.0);  // [B, m-1]
    rows.push_back(reshape(row, {batch, 1, aux_}));
  }
  return concat(rows, 1);  // [B, m-1, m-1]
}

Tensor SelfAttention::weights(const BranchOutput& out, Mode) {
  Tensor attn = attention_matrix(out);
  // Average the m-1 row distributions into one weight per branch; a mean of
  // simplex rows stays on the simplex.
  return mean(attn, {1}, false);
}

std::vector<NamedParam> SelfAttention::named_parameters() {
  return {
      {"attn.query.weight", query_.weight, true},
      {"attn.query.bias", query_.bias, false},
      {"attn.key.weight", key_.weight, true},
      {"attn.key.bias", key_.bias, false},
  };
}

// ---------------------------------------------------------------------------

Tensor UniformAttention::weights(const BranchOutput& out, Mode) {
  if (out.logits.empty()) fail("uniform attention: empty branch output");
  const std::size_t batch = out.logits[0].shape()[0];
  return Tensor::full({batch, aux_}, 1.0 / double(aux_));
}

std::unique_ptr<AttentionMechanism> make_attention(AttentionKind kind,
                                                   const MultiBranchNet& net,
                                                   Rng& rng) {
  const std::size_t aux = net.config().branches - 1;
  // With a single auxiliary branch the simplex constraint forces its weight
  // to 1, so every mechanism degenerates to the uniform one.
  if (aux == 1) return std::make_unique<UniformAttention>(aux);
  switch (kind) {
    case AttentionKind::FeatureFusion:
      return std::make_unique<FeatureFusionModule>(
          aux, net.branch_out_channels(), rng);
    case AttentionKind::Gate:
      return std::make_unique<GateAttention>(aux, net.trunk_out_channels(), rng);
    case AttentionKind::SelfAttention:
      return std::make_unique<SelfAttention>(aux, net.branch_out_channels(), rng);
    case AttentionKind::Uniform:
      return std::make_unique<UniformAttention>(aux);
  }
  fail("make_attention: unknown kind");
}

}  // namespace okd
