#include "okd/metrics.hpp"

#include <cmath>
#include <limits>

namespace okd {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw Error(msg); }

// Rank of the true label under the tie rule "lower class index first".
bool label_in_top_k(const double* row, std::size_t classes, int label,
                    std::size_t k) {
  const double ly = row[label];
  std::size_t rank = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (row[c] > ly || (row[c] == ly && int(c) < label)) ++rank;
  }
  return rank < k;
}

}  // namespace

double top_k_error(const Tensor& logits, const std::vector<int>& labels,
                   std::size_t k) {
  if (!logits.defined() || logits.rank() != 2) {
    fail("top_k_error: expected logits [N, C]");
  }
  const std::size_t n = logits.shape()[0], classes = logits.shape()[1];
  if (k == 0 || k >= classes) {
    fail("top_k_error: k = " + std::to_string(k) +
         " must satisfy 1 <= k < C = " + std::to_string(classes));
  }
  if (labels.size() != n) fail("top_k_error: label count mismatch");
  std::size_t hits = 0;
  const double* v = logits.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || std::size_t(y) >= classes) {
      fail("top_k_error: label " + std::to_string(y) + " out of range");
    }
    if (label_in_top_k(v + i * classes, classes, y, k)) ++hits;
  }
  return 100.0 * (1.0 - double(hits) / double(n));
}

Tensor ensemble_predict(const std::vector<Tensor>& logits) {
  if (logits.empty()) fail("ensemble_predict: empty logits list");
  const Shape& s = logits[0].shape();
  for (const Tensor& t : logits) {
    if (t.shape() != s) {
      fail("ensemble_predict: shape mismatch " + shape_str(s) + " vs " +
           shape_str(t.shape()));
    }
  }
  std::vector<double> acc(logits[0].size(), 0.0);
  for (const Tensor& t : logits) {
    const auto& v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) acc[i] += v[i];
  }
  const double inv = 1.0 / double(logits.size());
  for (double& v : acc) v *= inv;
  return Tensor::from(s, std::move(acc));
}

double interrater_agreement(
    const std::vector<std::vector<bool>>& correctness) {
  const std::size_t m_samples = correctness.size();
  if (m_samples == 0) fail("interrater_agreement: no samples");
  const std::size_t t_classifiers = correctness[0].size();
  if (t_classifiers < 2) {
    fail("interrater_agreement: need at least 2 classifiers, got " +
         std::to_string(t_classifiers));
  }
  std::size_t total_correct = 0;
  double rho_term = 0.0;
  for (const auto& row : correctness) {
    if (row.size() != t_classifiers) {
      fail("interrater_agreement: ragged correctness matrix");
    }
    std::size_t rho = 0;
    for (bool b : row) rho += b ? 1 : 0;
    total_correct += rho;
    rho_term += double(rho) * double(t_classifiers - rho);
  }
  const double pbar =
      double(total_correct) / double(m_samples * t_classifiers);
  if (pbar <= 0.0 || pbar >= 1.0) {
    fail("interrater_agreement: degenerate mean accuracy " +
         std::to_string(pbar) + " (all classifiers fully right or wrong)");
  }
  const double numerator = rho_term / double(t_classifiers);
  const double denominator = double(m_samples) *
                             double(t_classifiers - 1) * pbar * (1.0 - pbar);
  return 1.0 - numerator / denominator;
}

EvalResult evaluate(MultiBranchNet& net, const Dataset& test,
                    const EvalOptions& options) {
  const std::size_t m = net.config().branches;
  const std::size_t classes = net.config().num_classes;
  const std::size_t n = test.size();
  if (n == 0) fail("evaluate: empty test set");

  // Gather per-branch logits over the whole split in eval mode.
  std::vector<std::vector<double>> branch_logits(
      m, std::vector<double>(n * classes));
  BatchIterator it(test, options.batch_size);
  it.start_epoch(nullptr);
  std::vector<double> buf;
  std::vector<int> labels;
  std::size_t row = 0;
  while (it.next(buf, labels)) {
    const std::size_t got = labels.size();
    Tensor x = Tensor::from({got, test.channels, test.height, test.width}, buf);
    BranchOutput out = net.forward(x, Mode::Eval);
    for (std::size_t b = 0; b < m; ++b) {
      const auto& v = out.logits[b].values();
      std::copy(v.begin(), v.end(),
                branch_logits[b].begin() + std::ptrdiff_t(row * classes));
    }
    row += got;
  }

  EvalResult res;
  res.samples = n;
  const bool top5_valid = classes > 5;
  const double nan = std::numeric_limits<double>::quiet_NaN();

  std::vector<Tensor> logit_tensors;
  for (std::size_t b = 0; b < m; ++b) {
    logit_tensors.push_back(Tensor::from({n, classes}, branch_logits[b]));
  }
  for (std::size_t b = 0; b < m; ++b) {
    res.branch_top1.push_back(top_k_error(logit_tensors[b], test.labels, 1));
    res.branch_top5.push_back(
        top5_valid ? top_k_error(logit_tensors[b], test.labels, 5) : nan);
  }
  res.leader_top1 = res.branch_top1.back();
  res.leader_top5 = res.branch_top5.back();

  std::vector<Tensor> aux(logit_tensors.begin(), logit_tensors.end() - 1);
  res.ensemble_top1 = top_k_error(ensemble_predict(aux), test.labels, 1);

  const std::size_t div_count = options.diversity_all_branches ? m : m - 1;
  std::vector<std::vector<bool>> correctness(
      n, std::vector<bool>(div_count, false));
  for (std::size_t b = 0; b < div_count; ++b) {
    const double* v = logit_tensors[b].values().data();
    for (std::size_t i = 0; i < n; ++i) {
      correctness[i][b] =
          label_in_top_k(v + i * classes, classes, test.labels[i], 1);
    }
  }
  try {
    res.interrater = interrater_agreement(correctness);
  } catch (const Error&) {
    res.interrater = nan;  // degenerate split; keep the evaluation usable
  }
  return res;
}

}  // namespace okd
