#pragma once

#include <vector>

#include "okd/branch_net.hpp"
#include "okd/data.hpp"

namespace okd {

/// Per-evaluation summary. top-5 figures are reported only when the dataset
/// has more than five classes (NaN otherwise); interrater is NaN when the
/// agreement statistic is degenerate (all classifiers fully right or wrong).
struct EvalResult {
  std::vector<double> branch_top1;  // m entries, leader last
  std::vector<double> branch_top5;
  double leader_top1 = 0.0;
  double leader_top5 = 0.0;
  double ensemble_top1 = 0.0;  // mean of auxiliary-branch logits
  double interrater = 0.0;
  std::size_t samples = 0;
};

/// 100 * (1 - fraction of samples whose label ranks among the k largest
/// logits). Ties rank the lower class index first. Requires 1 <= k < C.
double top_k_error(const Tensor& logits, const std::vector<int>& labels,
                   std::size_t k);

/// Arithmetic mean of the given logit tensors (detached).
Tensor ensemble_predict(const std::vector<Tensor>& logits);

/// Interrater agreement s over a [samples][classifiers] correctness matrix:
///   s = 1 - [ (1/T) * sum_k rho_k (T - rho_k) ]
///         / [ M (T-1) pbar (1 - pbar) ]
/// with T classifiers, M samples, rho_k the number of classifiers correct on
/// sample k, and pbar the mean per-classifier accuracy. Smaller s means more
/// diversity. Errors when pbar is 0 or 1 (zero denominator).
double interrater_agreement(const std::vector<std::vector<bool>>& correctness);

struct EvalOptions {
  std::size_t batch_size = 256;
  /// Measure diversity over all m branches rather than the auxiliaries only.
  bool diversity_all_branches = false;
};

EvalResult evaluate(MultiBranchNet& net, const Dataset& test,
                    const EvalOptions& options);

}  // namespace okd
