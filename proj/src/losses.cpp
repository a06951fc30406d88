#include "okd/losses.hpp"

#include <cmath>

namespace okd {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

constexpr double kProbFloor = 1e-12;

void check_prob_matrix(const char* op, const Tensor& p) {
  if (!p.defined() || p.rank() != 2) {
    fail(std::string(op) + ": expected probabilities of shape [B, C]");
  }
}

void check_row_sums(const char* op, const Tensor& p) {
  const std::size_t batch = p.shape()[0], classes = p.shape()[1];
  const auto& v = p.values();
  for (std::size_t b = 0; b < batch; ++b) {
    double s = 0.0;
    for (std::size_t c = 0; c < classes; ++c) s += v[b * classes + c];
    if (std::fabs(s - 1.0) > 1e-6) {
      fail(std::string(op) + ": row " + std::to_string(b) + " sums to " +
           std::to_string(s) + ", violating the unit-sum requirement");
    }
  }
}

}  // namespace

Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels) {
  check_prob_matrix("cross_entropy", probs);
  const std::size_t batch = probs.shape()[0], classes = probs.shape()[1];
  if (labels.size() != batch) {
    fail("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
         std::to_string(batch) + " rows");
  }
  std::vector<double> onehot(batch * classes, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || std::size_t(labels[b]) >= classes) {
      fail("cross_entropy: label " + std::to_string(labels[b]) +
           " out of range [0, " + std::to_string(classes) + ") at row " +
           std::to_string(b));
    }
    onehot[b * classes + std::size_t(labels[b])] = 1.0;
  }
  Tensor mask = Tensor::from({batch, classes}, std::move(onehot));
  Tensor picked = sum(mul(probs, mask), {1}, false);  // [B]
  return neg(mean(log(clamp_min(picked, kProbFloor))));
}

Tensor kl_divergence(const Tensor& t, const Tensor& q) {
  check_prob_matrix("kl_divergence", t);
  check_prob_matrix("kl_divergence", q);
  if (t.shape() != q.shape()) {
    fail("kl_divergence: shape mismatch " + shape_str(t.shape()) + " vs " +
         shape_str(q.shape()));
  }
  check_row_sums("kl_divergence", t);
  check_row_sums("kl_divergence", q);
  // t_j == 0 contributes exactly zero: the clamp keeps the log finite and
  // the multiplication by t_j kills the term.
  Tensor log_ratio =
      sub(log(clamp_min(t, kProbFloor)), log(clamp_min(q, kProbFloor)));
  return mean(sum(mul(t, log_ratio), {1}, false));
}

Tensor cd_loss(const std::vector<Tensor>& classifier_weights) {
  if (classifier_weights.size() < 2) return Tensor::scalar(0.0);
  const Shape& s0 = classifier_weights[0].shape();
  for (const Tensor& w : classifier_weights) {
    if (w.rank() != 2 || w.shape() != s0) {
      fail("cd_loss: classifier weight shape mismatch: " + shape_str(s0) +
           " vs " + shape_str(w.shape()));
    }
  }
  Tensor acc;
  bool first = true;
  for (std::size_t i = 0; i + 1 < classifier_weights.size(); ++i) {
    for (std::size_t j = i + 1; j < classifier_weights.size(); ++j) {
      Tensor pair = sum(
          abs(matmul(transpose(classifier_weights[i]), classifier_weights[j])));
      acc = first ? pair : add(acc, pair);
      first = false;
    }
  }
  return acc;
}

Tensor first_level_loss(const Tensor& ensemble_logits,
                        const std::vector<Tensor>& aux_logits,
                        double temperature) {
  if (aux_logits.empty()) fail("first_level_loss: no auxiliary branches");
  Tensor teacher = softmax_T(ensemble_logits, temperature);
  Tensor acc;
  for (std::size_t i = 0; i < aux_logits.size(); ++i) {
    Tensor term = kl_divergence(teacher, softmax_T(aux_logits[i], temperature));
    acc = i == 0 ? term : add(acc, term);
  }
  return acc;
}

Tensor second_level_loss(const std::vector<Tensor>& aux_logits,
                         const Tensor& leader_logits, double temperature,
                         bool include_leader_in_avg) {
  if (aux_logits.empty()) fail("second_level_loss: no auxiliary branches");
  Tensor sum_t = aux_logits[0].detach();
  std::size_t count = 1;
  for (std::size_t i = 1; i < aux_logits.size(); ++i) {
    sum_t = add(sum_t, aux_logits[i].detach());
    ++count;
  }
  if (include_leader_in_avg) {
    sum_t = add(sum_t, leader_logits.detach());
    ++count;
  }
  Tensor t_avg = mul_scalar(sum_t, 1.0 / double(count));  // pure teacher
  return kl_divergence(softmax_T(t_avg, temperature),
                       softmax_T(leader_logits, temperature));
}

std::optional<std::string> LossBreakdown::first_non_finite() const {
  if (!std::isfinite(ce_sum)) return "ce_sum";
  if (!std::isfinite(kl1)) return "kl1";
  if (!std::isfinite(kl2)) return "kl2";
  if (!std::isfinite(cd)) return "cd";
  if (!std::isfinite(total)) return "total";
  return std::nullopt;
}

LossBreakdown total_loss(const BranchOutput& out,
                         const std::vector<int>& labels,
                         const Tensor& ensemble_logits,
                         const std::vector<Tensor>& classifier_weights,
                         const Coefficients& coeffs) {
  if (out.logits.size() < 2) {
    fail("total_loss: need at least 2 branches, got " +
         std::to_string(out.logits.size()));
  }
  if (coeffs.alpha < 0 || coeffs.beta < 0 || coeffs.gamma < 0) {
    fail("total_loss: balance coefficients must be non-negative");
  }
  if (!(coeffs.temperature > 0)) {
    fail("total_loss: temperature must be positive");
  }
  const std::size_t m = out.logits.size();
  std::vector<Tensor> aux(out.logits.begin(), out.logits.end() - 1);
  const Tensor& leader = out.logits.back();

  Tensor ce_acc = cross_entropy(softmax_T(out.logits[0], 1.0), labels);
  for (std::size_t i = 1; i < m; ++i) {
    ce_acc = add(ce_acc, cross_entropy(softmax_T(out.logits[i], 1.0), labels));
  }
  if (coeffs.ensemble_ce) {
    // Folded into the cross-entropy sum so the breakdown identity holds.
    ce_acc = add(ce_acc, cross_entropy(softmax_T(ensemble_logits, 1.0), labels));
  }

  Tensor kl1 = first_level_loss(ensemble_logits, aux, coeffs.temperature);
  Tensor kl2 = second_level_loss(aux, leader, coeffs.temperature,
                                 coeffs.tavg_include_leader);

  std::vector<Tensor> cd_ws = classifier_weights;
  if (!coeffs.cd_include_leader && !cd_ws.empty()) cd_ws.pop_back();
  Tensor cd = cd_loss(cd_ws);

  const double ka = coeffs.alpha * coeffs.temperature * coeffs.temperature;
  const double kb = coeffs.beta * coeffs.temperature * coeffs.temperature;
  Tensor total = add(ce_acc, mul_scalar(kl1, ka));
  total = add(total, mul_scalar(kl2, kb));
  total = add(total, mul_scalar(cd, coeffs.gamma));

  LossBreakdown bd;
  bd.ce_sum = ce_acc.item();
  bd.kl1 = kl1.item();
  bd.kl2 = kl2.item();
  bd.cd = cd.item();
  bd.total = total.item();
  bd.alpha = coeffs.alpha;
  bd.beta = coeffs.beta;
  bd.gamma = coeffs.gamma;
  bd.temperature = coeffs.temperature;
  bd.total_tensor = total;
  return bd;
}

}  // namespace okd
