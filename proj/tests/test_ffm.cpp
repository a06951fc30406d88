#include <cmath>

#include "doctest.h"
#include "okd/ffm.hpp"

using namespace okd;

namespace {

// BranchOutput stand-in without a full network: aux feature maps + logits.
BranchOutput fake_output(std::size_t batch, std::size_t aux, std::size_t ch,
                         std::size_t hw, std::size_t classes, Rng& rng) {
  BranchOutput out;
  for (std::size_t i = 0; i < aux; ++i) {
    out.features.push_back(Tensor::randn({batch, ch, hw, hw}, rng, 1.0, true));
    out.logits.push_back(Tensor::randn({batch, classes}, rng, 1.0, true));
  }
  out.logits.push_back(Tensor::randn({batch, classes}, rng, 1.0, true));
  out.trunk_mid = Tensor::randn({batch, ch, hw * 2, hw * 2}, rng, 1.0, true);
  return out;
}

void check_simplex(const Tensor& w, double tol = 1e-9) {
  const std::size_t batch = w.shape()[0], n = w.shape()[1];
  const auto& v = w.values();
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(v[b * n + i] >= 0.0);
      s += v[b * n + i];
    }
    CHECK(std::fabs(s - 1.0) <= tol);
  }
}

}  // namespace

TEST_CASE("ffm: zero-initialized score layer gives exactly uniform weights") {
  Rng rng(1);
  FeatureFusionModule ffm(3, 4, rng);
  for (NamedParam& p : ffm.named_parameters()) {
    if (p.name == "ffm.fc.weight" || p.name == "ffm.fc.bias") {
      std::fill(p.tensor.values_mut().begin(), p.tensor.values_mut().end(),
                0.0);
    }
  }
  BranchOutput out = fake_output(2, 3, 4, 4, 5, rng);
  Tensor w = ffm.weights(out, Mode::Eval);
  CHECK(w.shape() == Shape{2, 3});
  for (double v : w.values()) CHECK(v == 1.0 / 3.0);
}

TEST_CASE("ffm: weights live on the simplex and differentiate into params") {
  Rng rng(2);
  FeatureFusionModule ffm(3, 4, rng);
  for (int trial = 0; trial < 100; ++trial) {
    BranchOutput out = fake_output(4, 3, 4, 4, 5, rng);
    Tensor w = ffm.weights(out, Mode::Eval);
    CHECK(w.shape() == Shape{4, 3});
    check_simplex(w);
  }

  // gradient reaches the fusion parameters through the weights
  BranchOutput out = fake_output(4, 3, 4, 4, 5, rng);
  Tensor w = ffm.weights(out, Mode::Train);
  backward(sum(mul(w, w)));
  bool any_nonzero = false;
  for (NamedParam& p : ffm.named_parameters()) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) any_nonzero = any_nonzero || g != 0.0;
  }
  CHECK(any_nonzero);
}

TEST_CASE("ffm: mismatched feature shapes are rejected") {
  Rng rng(3);
  FeatureFusionModule ffm(2, 4, rng);
  BranchOutput out = fake_output(2, 2, 4, 4, 5, rng);
  out.features[1] = Tensor::randn({2, 4, 2, 2}, rng);
  CHECK_THROWS_WITH_AS(ffm.weights(out, Mode::Eval),
                       doctest::Contains("mismatch"), Error);
}

TEST_CASE("ensemble_target oracles") {
  // uniform weights reduce to the arithmetic mean
  Tensor w = Tensor::full({1, 2}, 0.5);
  Tensor t1 = Tensor::from({1, 2}, {1, 3});
  Tensor t2 = Tensor::from({1, 2}, {3, 5});
  CHECK(ensemble_target(w, {t1, t2}).values() == std::vector<double>{2, 4});

  // one-hot weights select a single branch
  Tensor hot = Tensor::from({1, 2}, {0, 1});
  CHECK(ensemble_target(hot, {t1, t2}).values() == t2.values());

  // hand dot product on scalar-class logits
  Tensor w3 = Tensor::from({1, 3}, {0.2, 0.3, 0.5});
  Tensor a = Tensor::from({1, 1}, {1});
  Tensor b = Tensor::from({1, 1}, {2});
  Tensor c = Tensor::from({1, 1}, {3});
  CHECK(ensemble_target(w3, {a, b, c}).item() == doctest::Approx(2.3));

  CHECK_THROWS_WITH_AS(ensemble_target(w3, {a, b}),
                       doctest::Contains("does not match"), Error);
}

TEST_CASE("ensemble_target: linear in the logits") {
  Rng rng(4);
  Tensor w = softmax_T(Tensor::randn({3, 4}, rng), 1.0);
  std::vector<Tensor> ts, ts2;
  for (int i = 0; i < 4; ++i) {
    ts.push_back(Tensor::randn({3, 5}, rng));
    ts2.push_back(mul_scalar(ts.back(), 2.0));
  }
  auto once = ensemble_target(w, ts).values();
  auto twice = ensemble_target(w, ts2).values();
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(twice[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-12));
  }
}

TEST_CASE("ensemble_target: branch logits enter detached, weights stay live") {
  Rng rng(5);
  Tensor scores = Tensor::randn({2, 3}, rng, 1.0, true);
  Tensor w = softmax_T(scores, 1.0);
  std::vector<Tensor> ts;
  for (int i = 0; i < 3; ++i) ts.push_back(Tensor::randn({2, 4}, rng, 1.0, true));
  Tensor te = ensemble_target(w, ts);
  backward(sum(mul(te, te)));
  for (const Tensor& t : ts) CHECK(!t.has_grad());  // detached path
  CHECK(scores.has_grad());
  bool nonzero = false;
  for (double g : scores.grad()) nonzero = nonzero || g != 0.0;
  CHECK(nonzero);
}

TEST_CASE("gate baseline") {
  Rng rng(6);
  GateAttention gate(3, 4, rng);
  BranchOutput out = fake_output(2, 3, 4, 2, 5, rng);  // trunk_mid [2,4,4,4]

  for (NamedParam& p : gate.named_parameters()) {
    std::fill(p.tensor.values_mut().begin(), p.tensor.values_mut().end(), 0.0);
  }
  Tensor w = gate.weights(out, Mode::Eval);
  for (double v : w.values()) CHECK(v == 1.0 / 3.0);

  Rng rng2(7);
  GateAttention gate2(3, 4, rng2);
  Tensor w1 = gate2.weights(out, Mode::Eval);
  Tensor w2 = gate2.weights(out, Mode::Eval);
  check_simplex(w1);
  CHECK(w1.values() == w2.values());  // deterministic
}

TEST_CASE("self-attention baseline") {
  Rng rng(8);
  SelfAttention attn(3, 4, rng);
  BranchOutput out = fake_output(2, 3, 4, 4, 5, rng);
  Tensor w = attn.weights(out, Mode::Eval);
  CHECK(w.shape() == Shape{2, 3});
  check_simplex(w);

  // identical branch features -> constant scores -> uniform attention rows
  BranchOutput same = fake_output(2, 3, 4, 4, 5, rng);
  same.features[1] = Tensor::from(same.features[0].shape(),
                                  same.features[0].values());
  same.features[2] = Tensor::from(same.features[0].shape(),
                                  same.features[0].values());
  Tensor wu = attn.weights(same, Mode::Eval);
  for (double v : wu.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
  Tensor rows = attn.attention_matrix(same);
  CHECK(rows.shape() == Shape{2, 3, 3});
  for (double v : rows.values()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("self-attention: closed form for two 1-d branches") {
  Rng rng(9);
  SelfAttention attn(2, 1, rng);
  const double wq = 0.7, wk = -1.3, a = 0.9, b = -0.4;
  for (NamedParam& p : attn.named_parameters()) {
    auto& v = p.tensor.values_mut();
    if (p.name == "attn.query.weight") v = {wq};
    if (p.name == "attn.key.weight") v = {wk};
    if (p.name == "attn.query.bias" || p.name == "attn.key.bias") v = {0.0};
  }
  BranchOutput out;
  out.features.push_back(Tensor::from({1, 1, 1, 1}, {a}));
  out.features.push_back(Tensor::from({1, 1, 1, 1}, {b}));
  out.logits.resize(3);

  const double q1 = a * wq, q2 = b * wq, k1 = a * wk, k2 = b * wk;
  auto row = [&](double qi) {
    const double s1 = std::exp(qi * k1), s2 = std::exp(qi * k2);
    return std::pair<double, double>{s1 / (s1 + s2), s2 / (s1 + s2)};
  };
  auto [a11, a12] = row(q1);
  auto [a21, a22] = row(q2);
  const double w1 = 0.5 * (a11 + a21), w2 = 0.5 * (a12 + a22);

  Tensor w = attn.weights(out, Mode::Eval);
  CHECK(w.values()[0] == doctest::Approx(w1).epsilon(1e-12));
  CHECK(w.values()[1] == doctest::Approx(w2).epsilon(1e-12));
}

TEST_CASE("uniform mechanism and the kind round trip") {
  UniformAttention uni(3);
  BranchOutput out;
  out.logits.push_back(Tensor::zeros({5, 2}));
  Tensor w = uni.weights(out, Mode::Train);
  CHECK(w.shape() == Shape{5, 3});
  for (double v : w.values()) CHECK(v == 1.0 / 3.0);
  CHECK(!w.requires_grad());

  for (AttentionKind k :
       {AttentionKind::FeatureFusion, AttentionKind::Gate,
        AttentionKind::SelfAttention, AttentionKind::Uniform}) {
    CHECK(attention_kind_from_name(attention_kind_name(k)) == k);
  }
  CHECK_THROWS_AS(attention_kind_from_name("bogus"), Error);
}
