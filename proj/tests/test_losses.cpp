#include <cmath>

#include "doctest.h"
#include "okd/ffm.hpp"
#include "okd/losses.hpp"
#include "okd/nn.hpp"

using namespace okd;

namespace {

Tensor random_simplex(std::size_t batch, std::size_t classes, Rng& rng) {
  std::vector<double> v(batch * classes);
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      v[b * classes + c] = 0.05 + rng.uniform();
      s += v[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) v[b * classes + c] /= s;
  }
  return Tensor::from({batch, classes}, std::move(v));
}

BranchOutput fake_branches(std::size_t m, std::size_t batch,
                           std::size_t classes, Rng& rng) {
  BranchOutput out;
  for (std::size_t i = 0; i < m; ++i) {
    out.logits.push_back(Tensor::randn({batch, classes}, rng, 1.0, true));
  }
  return out;
}

}  // namespace

TEST_CASE("cross entropy oracles") {
  // one-hot on the true class
  Tensor hot = Tensor::from({2, 3}, {1, 0, 0, 0, 0, 1});
  CHECK(cross_entropy(hot, {0, 2}).item() == 0.0);

  // uniform over 10 classes -> ln 10
  Tensor uni = Tensor::full({4, 10}, 0.1);
  CHECK(cross_entropy(uni, {3, 9, 0, 5}).item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-12));

  Tensor half = Tensor::from({1, 2}, {0.5, 0.5});
  CHECK(cross_entropy(half, {0}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  CHECK_THROWS_WITH_AS(cross_entropy(half, {2}),
                       doctest::Contains("out of range"), Error);
  CHECK_THROWS_WITH_AS(cross_entropy(half, {-1}),
                       doctest::Contains("out of range"), Error);
}

TEST_CASE("cross entropy differentiates through softmax") {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor logits = Tensor::randn({3, 4}, rng, 1.0, true);
    std::vector<int> y = {int(rng.uniform_int(4)), int(rng.uniform_int(4)),
                          int(rng.uniform_int(4))};
    auto f = [&] { return cross_entropy(softmax_T(logits, 1.0), y); };
    CHECK(grad_check(f, logits, 1e-4) <= 1e-4);
  }
}

TEST_CASE("kl divergence oracles") {
  Rng rng(11);
  Tensor p = random_simplex(3, 5, rng);
  CHECK(kl_divergence(p, p).item() == 0.0);

  // teacher with a hard zero: 0 log 0 contributes nothing
  Tensor t = Tensor::from({1, 2}, {1, 0});
  Tensor q = Tensor::from({1, 2}, {0.5, 0.5});
  CHECK(kl_divergence(t, q).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor t2 = Tensor::from({1, 2}, {0.5, 0.5});
  Tensor q2 = Tensor::from({1, 2}, {0.9, 0.1});
  const double expected = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  CHECK(kl_divergence(t2, q2).item() ==
        doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(0.510826).epsilon(1e-6));

  Tensor bad = Tensor::from({1, 2}, {0.7, 0.4});
  CHECK_THROWS_WITH_AS(kl_divergence(bad, q2), doctest::Contains("row"), Error);
  CHECK_THROWS_WITH_AS(kl_divergence(t2, bad), doctest::Contains("row"), Error);
}

TEST_CASE("kl divergence non-negativity on random simplex pairs") {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor t = random_simplex(2, 6, rng);
    Tensor q = random_simplex(2, 6, rng);
    const double v = kl_divergence(t, q).item();
    CHECK(v >= -1e-12);
    double max_gap = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      max_gap = std::max(max_gap,
                         std::fabs(t.values()[i] - q.values()[i]));
    }
    if (max_gap > 1e-6) CHECK(v > 0.0);
    CHECK(kl_divergence(t, t).item() <= 1e-15);
  }
}

TEST_CASE("kl divergence gradients (both sides, through softmax)") {
  Rng rng(13);
  Tensor a = Tensor::randn({2, 4}, rng, 1.0, true);
  Tensor b = Tensor::randn({2, 4}, rng, 1.0, true);
  auto f = [&] {
    return kl_divergence(softmax_T(a, 3.0), softmax_T(b, 3.0));
  };
  CHECK(grad_check(f, a, 1e-4) <= 1e-4);
  CHECK(grad_check(f, b, 1e-4) <= 1e-4);
}

TEST_CASE("cd loss oracles") {
  // orthogonal single-column classifiers
  Tensor w1 = Tensor::from({2, 1}, {1, 0});
  Tensor w2 = Tensor::from({2, 1}, {0, 1});
  CHECK(cd_loss({w1, w2}).item() == 0.0);

  // identical identity classifiers: |I| sums to 2
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  CHECK(cd_loss({eye, eye}).item() == 2.0);

  // hand matrix product: W1^T W2 = [[1,3],[2,4]] -> L1 sum 10
  Tensor wa = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(cd_loss({wa, eye}).item() == 10.0);

  // single matrix: no pairs
  CHECK(cd_loss({wa}).item() == 0.0);

  CHECK_THROWS_WITH_AS(cd_loss({wa, Tensor::zeros({3, 2})}),
                       doctest::Contains("mismatch"), Error);
}

TEST_CASE("cd loss: pair count includes the leader per index bounds") {
  Rng rng(14);
  std::vector<Tensor> ws;
  for (int i = 0; i < 4; ++i) ws.push_back(Tensor::randn({3, 2}, rng));
  double pair_sum = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) {
      pair_sum += cd_loss({ws[i], ws[j]}).item();
    }
  }
  CHECK(cd_loss(ws).item() == doctest::Approx(pair_sum).epsilon(1e-12));
}

TEST_CASE("cd loss symmetry and homogeneity") {
  Rng rng(15);
  std::vector<Tensor> ws;
  for (int i = 0; i < 3; ++i) ws.push_back(Tensor::randn({4, 3}, rng));
  const double base = cd_loss(ws).item();

  // simultaneous column permutation of all W_i leaves the value unchanged
  auto permute_cols = [](const Tensor& w, const std::vector<std::size_t>& perm) {
    const std::size_t rows = w.shape()[0], cols = w.shape()[1];
    std::vector<double> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        out[r * cols + c] = w.values()[r * cols + perm[c]];
      }
    }
    return Tensor::from({rows, cols}, std::move(out));
  };
  const std::vector<std::size_t> perm = {2, 0, 1};
  std::vector<Tensor> permuted;
  for (const Tensor& w : ws) permuted.push_back(permute_cols(w, perm));
  CHECK(cd_loss(permuted).item() == doctest::Approx(base).epsilon(1e-12));

  // scaling one matrix by 2 doubles every pair contribution it enters
  const double pair01 = cd_loss({ws[0], ws[1]}).item();
  CHECK(cd_loss({mul_scalar(ws[0], 2.0).detach(), ws[1]}).item() ==
        doctest::Approx(2.0 * pair01).epsilon(1e-12));
}

TEST_CASE("cd loss gradient away from zero crossings") {
  Rng rng(16);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor> ws;
    for (int i = 0; i < 3; ++i) {
      ws.push_back(Tensor::randn({4, 3}, rng, 1.0, true));
    }
    // reject draws with near-zero cross-product entries (non-smooth loci)
    bool safe = true;
    for (std::size_t i = 0; i < ws.size() && safe; ++i) {
      for (std::size_t j = i + 1; j < ws.size() && safe; ++j) {
        auto prod = matmul(transpose(ws[i]), ws[j]).values();
        for (double v : prod) safe = safe && std::fabs(v) > 1e-2;
      }
    }
    if (!safe) continue;
    auto f = [&] { return cd_loss(ws); };
    CHECK(grad_check(f, ws[0], 1e-4) <= 1e-4);
    CHECK(grad_check(f, ws[2], 1e-4) <= 1e-4);
  }
}

TEST_CASE("first level loss oracles") {
  // all branch logits equal to the target: zero loss
  Tensor te = Tensor::from({1, 2}, {1, 0});
  Tensor same = Tensor::from({1, 2}, {1, 0});
  CHECK(first_level_loss(te, {same, same}, 3.0).item() == 0.0);

  // one auxiliary branch: reduces to a single KL term
  Tensor t1 = Tensor::from({1, 2}, {0, 1});
  const double single = first_level_loss(te, {t1}, 1.0).item();
  CHECK(single ==
        kl_divergence(softmax_T(te, 1.0), softmax_T(t1, 1.0)).item());

  // two branches, closed-form sum of KLs
  Tensor t2 = Tensor::from({1, 2}, {2, 1});  // softmax-equal to te
  const double s1 = 1.0 / (1.0 + std::exp(-1.0));  // p(class 0) of [1,0]
  const double q1 = 1.0 - s1;                      // p(class 0) of [0,1]
  const double kl_hand =
      s1 * std::log(s1 / q1) + (1.0 - s1) * std::log((1.0 - s1) / (1.0 - q1));
  const double both = first_level_loss(te, {t1, t2}, 1.0).item();
  CHECK(both == doctest::Approx(kl_hand).epsilon(1e-12));
}

TEST_CASE("second level loss oracles") {
  Tensor gl = Tensor::from({1, 2}, {1, 1});
  Tensor a1 = Tensor::from({1, 2}, {2, 0});
  Tensor a2 = Tensor::from({1, 2}, {0, 2});
  // t_avg = [1,1] equals the leader: zero loss
  CHECK(second_level_loss({a1, a2}, gl, 3.0).item() == 0.0);

  // single auxiliary: t_avg is that branch
  Tensor lead = Tensor::from({1, 2}, {0.5, -0.5});
  CHECK(second_level_loss({a1}, lead, 2.0).item() ==
        kl_divergence(softmax_T(a1, 2.0), softmax_T(lead, 2.0)).item());

  // the average is a pure teacher: no gradient into the auxiliaries
  Rng rng(17);
  Tensor b1 = Tensor::randn({2, 3}, rng, 1.0, true);
  Tensor b2 = Tensor::randn({2, 3}, rng, 1.0, true);
  Tensor lead2 = Tensor::randn({2, 3}, rng, 1.0, true);
  backward(second_level_loss({b1, b2}, lead2, 3.0));
  CHECK(!b1.has_grad());
  CHECK(!b2.has_grad());
  CHECK(lead2.has_grad());
}

TEST_CASE("total loss: zero coefficients reduce to the cross-entropy sum") {
  Rng rng(20);
  BranchOutput out = fake_branches(3, 4, 5, rng);
  std::vector<int> labels = {0, 1, 2, 3};
  std::vector<Tensor> ws;
  for (int i = 0; i < 3; ++i) ws.push_back(Tensor::randn({6, 5}, rng, 1.0, true));

  Coefficients zero;
  zero.alpha = zero.beta = zero.gamma = 0.0;
  Tensor te = ensemble_target(Tensor::full({4, 2}, 0.5),
                              {out.logits[0], out.logits[1]});
  LossBreakdown bd = total_loss(out, labels, te, ws, zero);
  CHECK(bd.total == bd.ce_sum);  // bitwise
  CHECK(bd.assemble() == bd.total);
}

TEST_CASE("total loss: paper coefficients and the T^2 factors") {
  Rng rng(21);
  BranchOutput out = fake_branches(4, 2, 6, rng);
  std::vector<int> labels = {1, 4};
  std::vector<Tensor> ws;
  for (int i = 0; i < 4; ++i) ws.push_back(Tensor::randn({3, 6}, rng, 1.0, true));
  Tensor te = ensemble_target(
      Tensor::full({2, 3}, 1.0 / 3),
      {out.logits[0], out.logits[1], out.logits[2]});

  Coefficients paper;  // alpha 1, beta 2, gamma 5e-8, T 3
  LossBreakdown bd = total_loss(out, labels, te, ws, paper);
  CHECK(bd.assemble() == bd.total);  // bitwise reassembly
  CHECK(bd.total ==
        doctest::Approx(bd.ce_sum + 9.0 * bd.kl1 + 18.0 * bd.kl2 +
                        5e-8 * bd.cd)
            .epsilon(1e-15));
  CHECK(bd.ce_sum >= 0.0);
  CHECK(bd.kl1 >= 0.0);
  CHECK(bd.kl2 >= 0.0);
  CHECK(bd.cd >= 0.0);

  Coefficients bad = paper;
  bad.alpha = -1.0;
  CHECK_THROWS_WITH_AS(total_loss(out, labels, te, ws, bad),
                       doctest::Contains("non-negative"), Error);
}

TEST_CASE("total loss: identical branches zero both distillation terms") {
  Rng rng(22);
  Tensor shared = Tensor::randn({3, 4}, rng, 1.0, true);
  BranchOutput out;
  for (int i = 0; i < 3; ++i) {
    out.logits.push_back(Tensor::from({3, 4}, shared.values(), true));
  }
  std::vector<int> labels = {0, 1, 2};
  std::vector<Tensor> ws;
  for (int i = 0; i < 3; ++i) ws.push_back(Tensor::randn({5, 4}, rng, 1.0, true));
  // uniform weights over identical logits reproduce each branch's logits
  Tensor te = ensemble_target(Tensor::full({3, 2}, 0.5),
                              {out.logits[0], out.logits[1]});
  Coefficients c;  // paper defaults
  LossBreakdown bd = total_loss(out, labels, te, ws, c);
  CHECK(bd.kl1 == 0.0);
  CHECK(bd.kl2 == 0.0);
  CHECK(bd.total == doctest::Approx(bd.ce_sum + c.gamma * bd.cd).epsilon(1e-15));
}

TEST_CASE("total loss: reassembly is bitwise on random instances") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    BranchOutput out = fake_branches(3, 2, 4, rng);
    std::vector<int> labels = {int(rng.uniform_int(4)), int(rng.uniform_int(4))};
    std::vector<Tensor> ws;
    for (int i = 0; i < 3; ++i) ws.push_back(Tensor::randn({4, 4}, rng));
    Coefficients c;
    c.alpha = rng.uniform() * 2;
    c.beta = rng.uniform() * 3;
    c.gamma = rng.uniform() * 1e-3;
    c.temperature = 0.5 + 3 * rng.uniform();
    Tensor te = ensemble_target(
        softmax_T(Tensor::randn({2, 2}, rng), 1.0),
        {out.logits[0], out.logits[1]});
    LossBreakdown bd = total_loss(out, labels, te, ws, c);
    CHECK(bd.assemble() == bd.total);
  }
}

TEST_CASE("total loss honors the leader flags") {
  Rng rng(24);
  BranchOutput out = fake_branches(3, 2, 4, rng);
  std::vector<int> labels = {0, 1};
  std::vector<Tensor> ws;
  for (int i = 0; i < 3; ++i) ws.push_back(Tensor::randn({4, 4}, rng));
  Tensor te = ensemble_target(Tensor::full({2, 2}, 0.5),
                              {out.logits[0], out.logits[1]});

  Coefficients with_leader;
  Coefficients without_leader;
  without_leader.cd_include_leader = false;
  const double cd_all = total_loss(out, labels, te, ws, with_leader).cd;
  const double cd_aux = total_loss(out, labels, te, ws, without_leader).cd;
  CHECK(cd_aux == cd_loss({ws[0], ws[1]}).item());
  CHECK(cd_all == cd_loss(ws).item());
  CHECK(cd_all != cd_aux);

  Coefficients avg_leader;
  avg_leader.tavg_include_leader = true;
  const double kl2_with = total_loss(out, labels, te, ws, avg_leader).kl2;
  const double kl2_without = total_loss(out, labels, te, ws, with_leader).kl2;
  CHECK(kl2_with != kl2_without);

  Coefficients ens_ce;
  ens_ce.ensemble_ce = true;
  CHECK(total_loss(out, labels, te, ws, ens_ce).ce_sum >
        total_loss(out, labels, te, ws, with_leader).ce_sum);
}
