#include "stfm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "stfm/error.hpp"

namespace stfm {
namespace {

constexpr double kLogFloor = 1e-12;
constexpr double kVarFloor = 1e-6;

// Stable softmax of one row/column of a value matrix, in plain doubles (used
// for the frozen teacher side and for focal coefficients, which never carry
// gradient).
std::vector<double> softmax_line(const std::vector<double>& v, int n, int m,
                                 int index, int axis, double temperature) {
  const int len = axis == 1 ? m : n;
  std::vector<double> out(static_cast<size_t>(len));
  auto at = [&](int k) {
    return axis == 1 ? v[static_cast<size_t>(index * m + k)]
                     : v[static_cast<size_t>(k * m + index)];
  };
  double hi = at(0);
  for (int k = 1; k < len; ++k) hi = std::max(hi, at(k));
  double denom = 0.0;
  for (int k = 0; k < len; ++k) {
    out[static_cast<size_t>(k)] = std::exp((at(k) - hi) / temperature);
    denom += out[static_cast<size_t>(k)];
  }
  for (double& x : out) x /= denom;
  return out;
}

}  // namespace

void LossWeights::validate() const {
  if (!(temperature > 0.0)) {
    throw ConfigError("loss temperature must be > 0, got " +
                      std::to_string(temperature));
  }
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw ConfigError("focal alpha must be in (0, 1], got " +
                      std::to_string(alpha));
  }
  if (!(gamma >= 0.0)) {
    throw ConfigError("focal gamma must be >= 0, got " +
                      std::to_string(gamma));
  }
  for (double lambda : {lambda0, lambda1, lambda2, lambda3}) {
    if (!(lambda >= 0.0)) {
      throw ConfigError("loss weights must be >= 0, got " +
                        std::to_string(lambda));
    }
  }
}

double focal_weight(double p, bool positive, double alpha, double gamma) {
  if (!(p >= 0.0) || p > 1.0) {
    throw ContractError("focal_weight expects a probability in [0, 1], got " +
                        std::to_string(p));
  }
  const double p_hat = positive ? p : 1.0 - p;
  return alpha * std::pow(1.0 - p_hat, gamma);
}

Tensor coarse_loss(const Tensor& p_c,
                   const std::vector<std::pair<int, int>>& gt_matches,
                   double alpha, double gamma) {
  if (p_c.rank() != 2) {
    throw ContractError("coarse_loss expects a [n x m] probability matrix");
  }
  if (gt_matches.empty()) {
    throw ContractError("coarse_loss requires at least one GT match");
  }
  const int n = p_c.dim(0), m = p_c.dim(1);
  std::vector<int> flat;
  std::vector<double> weights;
  flat.reserve(gt_matches.size());
  weights.reserve(gt_matches.size());
  for (const auto& [i, j] : gt_matches) {
    if (i < 0 || i >= n || j < 0 || j >= m) {
      throw ContractError("coarse_loss GT match out of range");
    }
    flat.push_back(i * m + j);
    // Focal coefficient from the current value; no gradient flows through it.
    weights.push_back(
        focal_weight(p_c.value()[static_cast<size_t>(i * m + j)], true, alpha,
                     gamma));
  }
  const Tensor picked = gather_elems(p_c, flat);
  const Tensor logp = log(clamp_min(picked, kLogFloor));
  const Tensor w = make_tensor({static_cast<int>(flat.size())},
                               std::move(weights), /*connected=*/false);
  return mul(sum(mul(w, logp)), -1.0 / static_cast<double>(flat.size()));
}

Tensor fine_loss(const FineMatchSet& fine,
                 const std::vector<std::optional<Eigen::Vector2d>>& targets) {
  if (targets.size() != fine.matches.size()) {
    throw ContractError("fine_loss targets must align with the match list");
  }
  Tensor total;
  int counted = 0;
  for (size_t k = 0; k < targets.size(); ++k) {
    if (!targets[k]) continue;  // no ground truth at this match
    const FineResult& r = fine.matches[k].result;
    const Tensor target = make_tensor(
        {1, 2}, {targets[k]->x(), targets[k]->y()}, /*connected=*/false);
    const Tensor sq_err = sum(square(sub(r.mu_offset, target)));
    const Tensor var = clamp_min(stop_gradient(r.sigma2), kVarFloor);
    const Tensor term = div(sq_err, var);
    total = total.defined() ? add(total, term) : term;
    ++counted;
  }
  if (counted == 0) {
    std::cerr << "warning: fine_loss saw no matches with ground truth; "
                 "contributing zero\n";
    return Tensor::scalar(0.0);
  }
  return mul(total, 1.0 / static_cast<double>(counted));
}

Tensor mqd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                const std::vector<std::pair<int, int>>& gt_matches,
                const MqdOptions& options) {
  if (student_logits.rank() != 2 || teacher_logits.rank() != 2 ||
      student_logits.shape() != teacher_logits.shape()) {
    throw ContractError("mqd_loss expects student/teacher logits of equal "
                        "[n x m] shape");
  }
  if (!(options.temperature > 0.0)) {
    throw ContractError("mqd_loss temperature must be > 0");
  }
  const int n = student_logits.dim(0), m = student_logits.dim(1);
  const std::vector<double>& o_s = student_logits.value();
  const std::vector<double>& o_t = teacher_logits.value();

  // GT column per row and GT row per column; -1 where unmatched.
  std::vector<int> row_gt(static_cast<size_t>(n), -1);
  std::vector<int> col_gt(static_cast<size_t>(m), -1);
  for (const auto& [i, j] : gt_matches) {
    if (i < 0 || i >= n || j < 0 || j >= m) {
      throw ContractError("mqd_loss GT match out of range");
    }
    row_gt[static_cast<size_t>(i)] = j;
    col_gt[static_cast<size_t>(j)] = i;
  }

  // The teacher is frozen: both coefficient matrices are built from values.
  // coeff(i, k) = FL_i * log(clamp(teacher softmax)) so that the whole
  // direction reduces to sum(student_softmax * coeff).
  auto coeff_matrix = [&](int axis) {
    std::vector<double> coeff(static_cast<size_t>(n * m), 0.0);
    const int lines = axis == 1 ? n : m;
    const auto& gt = axis == 1 ? row_gt : col_gt;
    for (int line = 0; line < lines; ++line) {
      double weight = 0.0;
      if (gt[static_cast<size_t>(line)] >= 0) {
        const std::vector<double> p =
            softmax_line(o_s, n, m, line, axis, 1.0);
        weight = focal_weight(p[static_cast<size_t>(gt[line])], true,
                              options.alpha, options.gamma);
      } else if (options.include_unmatched) {
        const std::vector<double> p =
            softmax_line(o_s, n, m, line, axis, 1.0);
        const size_t arg = static_cast<size_t>(
            std::max_element(p.begin(), p.end()) - p.begin());
        weight = focal_weight(p[arg], false, options.alpha, options.gamma);
      } else {
        continue;  // unmatched query contributes zero
      }
      const std::vector<double> q =
          softmax_line(o_t, n, m, line, axis, options.temperature);
      for (size_t k = 0; k < q.size(); ++k) {
        const double logq = std::log(std::max(q[k], kLogFloor));
        const size_t idx = axis == 1 ? static_cast<size_t>(line) * m + k
                                     : k * static_cast<size_t>(m) + line;
        coeff[idx] = weight * logq;
      }
    }
    return make_tensor({n, m}, std::move(coeff), /*connected=*/false);
  };

  const Tensor q_rows = softmax_T(student_logits, options.temperature, 1);
  const Tensor q_cols = softmax_T(student_logits, options.temperature, 0);
  const Tensor total =
      add(sum(mul(q_rows, coeff_matrix(1))), sum(mul(q_cols, coeff_matrix(0))));
  return mul(total, -1.0 / static_cast<double>(n + m));
}

Tensor attentive_loss(const std::vector<Tensor>& mu_s,
                      const std::vector<Tensor>& mu_t,
                      const std::vector<Tensor>& sigma2_t) {
  if (mu_t.size() != mu_s.size() || sigma2_t.size() != mu_s.size()) {
    throw ContractError("attentive_loss expects aligned mu_s/mu_t/sigma2_t");
  }
  if (mu_s.empty()) {
    std::cerr << "warning: attentive_loss saw an empty match set; "
                 "contributing zero\n";
    return Tensor::scalar(0.0);
  }
  Tensor total;
  for (size_t k = 0; k < mu_s.size(); ++k) {
    const Tensor diff = sub(mu_s[k], stop_gradient(mu_t[k]));
    const Tensor denom =
        mul(clamp_min(stop_gradient(sigma2_t[k]), kVarFloor), 2.0);
    const Tensor term = div(sum(square(diff)), denom);
    total = total.defined() ? add(total, term) : term;
  }
  return mul(total, 1.0 / static_cast<double>(mu_s.size()));
}

double gaussian_kl(double mu_s, double sigma_s, double mu_t, double sigma_t) {
  if (!(sigma_s > 0.0) || !(sigma_t > 0.0)) {
    throw ContractError("gaussian_kl requires positive standard deviations");
  }
  const double d = mu_s - mu_t;
  return std::log(sigma_t / sigma_s) +
         (sigma_s * sigma_s + d * d) / (2.0 * sigma_t * sigma_t) - 0.5;
}

Tensor total_loss(ModelRole role, const Tensor& l_c, const Tensor& l_f,
                  const Tensor& l_mqd, const Tensor& l_att,
                  const LossWeights& weights) {
  weights.validate();
  Tensor total = add(mul(l_c, weights.lambda0), mul(l_f, weights.lambda1));
  if (role == ModelRole::kStudent) {
    if (!l_mqd.defined() || !l_att.defined()) {
      throw ContractError("student total loss requires MQD and attentive "
                          "terms");
    }
    total = add(total, add(mul(l_mqd, weights.lambda2),
                           mul(l_att, weights.lambda3)));
  }
  return total;
}

}  // namespace stfm
