#pragma once

#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "stfm/model.hpp"
#include "stfm/tensor.hpp"

namespace stfm {

struct LossWeights {
  double lambda0 = 0.25;  // coarse
  double lambda1 = 0.25;  // fine
  double lambda2 = 4.0;   // mutual query divergence
  double lambda3 = 0.25;  // attentive
  double temperature = 1.0;  // distillation temperature T
  double alpha = 0.25, gamma = 2.0;  // focal parameters

  void validate() const;  // T > 0, alpha in (0,1], gamma >= 0, lambdas >= 0
};

// alpha * (1 - p_hat)^gamma with p_hat = p when positive else 1 - p. Treated
// as a stop-gradient coefficient everywhere it is used.
double focal_weight(double p, bool positive, double alpha, double gamma);

// L_c = -(1/|M|) sum over GT matches of FL(P_c(i,j)) * log P_c(i,j), log
// clamped below at 1e-12. The focal weight is computed from values and
// carries no gradient.
Tensor coarse_loss(const Tensor& p_c,
                   const std::vector<std::pair<int, int>>& gt_matches,
                   double alpha, double gamma);

// L_f = (1/|M_f|) sum (1/sigma^2) * ||mu - target||^2 over matches with a GT
// target (rest excluded); gradient stopped through sigma^2, which is clamped
// below at 1e-6. targets[k] aligns with fine.matches[k], in fine px relative
// to the window center. All targets missing -> warning and zero.
Tensor fine_loss(const FineMatchSet& fine,
                 const std::vector<std::optional<Eigen::Vector2d>>& targets);

struct MqdOptions {
  double temperature = 1.0;
  double alpha = 0.25, gamma = 2.0;
  // Query distributions without a GT match contribute zero by default; with
  // this flag they participate with y = 0 at the student's argmax position.
  bool include_unmatched = false;
};

// Mutual query divergence over the n = hw + hw row and column distributions
// of the correlation logits (o = S_c / tau). For each distribution with a GT
// match: -FL(p_S at GT) * sum_k softmax(o_S/T)_k * log softmax(o_T/T)_k,
// teacher side clamped at 1e-12; mean over all n. Gradient flows through the
// student softmax only; the teacher is treated as frozen.
Tensor mqd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                const std::vector<std::pair<int, int>>& gt_matches,
                const MqdOptions& options = {});

// L_att = (1/|M_f|) sum ||mu_s - mu_t||^2 / (2 sigma_t^2): the trained
// reduction of the per-match Gaussian KL, keeping only the term that depends
// on the student mean. Gradient stopped through mu_t and sigma_t^2 (clamped
// below at 1e-6). Empty match set -> warning and zero.
Tensor attentive_loss(const std::vector<Tensor>& mu_s,
                      const std::vector<Tensor>& mu_t,
                      const std::vector<Tensor>& sigma2_t);

// KL(N(mu_s, sigma_s^2) || N(mu_t, sigma_t^2)) =
// log(sigma_t/sigma_s) + (sigma_s^2 + (mu_s-mu_t)^2) / (2 sigma_t^2) - 1/2.
// Diagnostic/reference only; sigmas are standard deviations and must be > 0.
double gaussian_kl(double mu_s, double sigma_s, double mu_t, double sigma_t);

enum class ModelRole { kTeacher, kStudent };

// Teacher: lambda0 L_c + lambda1 L_f. Student adds lambda2 L_MQD and
// lambda3 L_att. For the teacher role l_mqd / l_att may be undefined.
Tensor total_loss(ModelRole role, const Tensor& l_c, const Tensor& l_f,
                  const Tensor& l_mqd, const Tensor& l_att,
                  const LossWeights& weights);

}  // namespace stfm
