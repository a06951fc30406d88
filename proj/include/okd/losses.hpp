#pragma once

#include <optional>
#include <string>
#include <vector>

#include "okd/branch_net.hpp"

namespace okd {

/// Balance coefficients and temperature of the composite objective
///   total = sum_i ce_i + alpha*T^2*kl1 + beta*T^2*kl2 + gamma*cd
struct Coefficients {
  double alpha = 1.0;
  double beta = 2.0;
  double gamma = 5e-8;
  double temperature = 3.0;
  /// Include leader-auxiliary pairs in the diversification loss.
  bool cd_include_leader = true;
  /// Include the leader's own logits in the second-level teacher average.
  bool tavg_include_leader = false;
  /// Optional cross-entropy on the softened ensemble target (off by default).
  bool ensemble_ce = false;
};

/// Mean over the batch of -log q[b, y_b]; probabilities are clamped below at
/// 1e-12 before the log.
Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels);

/// Mean over the batch of sum_j t_j * log(t_j / q_j); rows of both arguments
/// must sum to 1 within 1e-6. Entries with t_j == 0 contribute zero.
Tensor kl_divergence(const Tensor& t, const Tensor& q);

/// Classifier diversification: sum over ordered pairs i < j of the entrywise
/// L1 norm of W_i^T W_j. Zero exactly when all classifier columns are
/// mutually orthogonal across every pair. Lists with fewer than two matrices
/// yield a constant zero.
Tensor cd_loss(const std::vector<Tensor>& classifier_weights);

/// First-level distillation: sum over auxiliary branches of
/// KL(softmax_T(t_e), softmax_T(t_i)). The teacher is differentiable with
/// respect to the fusion weights only (branch logits are detached inside the
/// ensemble target).
Tensor first_level_loss(const Tensor& ensemble_logits,
                        const std::vector<Tensor>& aux_logits,
                        double temperature);

/// Second-level distillation: KL(softmax_T(t_avg), softmax_T(t_leader))
/// where t_avg is the fully detached mean of the auxiliary branch logits
/// (optionally including the leader's own logits).
Tensor second_level_loss(const std::vector<Tensor>& aux_logits,
                         const Tensor& leader_logits, double temperature,
                         bool include_leader_in_avg = false);

/// The four components of the composite objective plus the coefficients they
/// were combined with. total always equals assemble() bitwise.
struct LossBreakdown {
  double ce_sum = 0.0;
  double kl1 = 0.0;
  double kl2 = 0.0;
  double cd = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  double temperature = 1.0;
  Tensor total_tensor;  // graph root; undefined on aggregated records

  /// Recombines the stored components in the exact arithmetic order used to
  /// build the graph total.
  double assemble() const {
    const double ka = alpha * temperature * temperature;
    const double kb = beta * temperature * temperature;
    double acc = ce_sum;
    acc = acc + kl1 * ka;
    acc = acc + kl2 * kb;
    acc = acc + cd * gamma;
    return acc;
  }

  /// Name of the first non-finite component, if any.
  std::optional<std::string> first_non_finite() const;
};

/// Assembles the full objective for one batch. Cross-entropy uses T=1
/// probabilities for all branches (leader included); the distillation terms
/// use the configured temperature and carry the T^2 factor.
LossBreakdown total_loss(const BranchOutput& out,
                         const std::vector<int>& labels,
                         const Tensor& ensemble_logits,
                         const std::vector<Tensor>& classifier_weights,
                         const Coefficients& coeffs);

}  // namespace okd
