#pragma once

// Focal loss and self-balancing focal loss (SBFL) for binary segmentation.
//
// Per pixel, with p = y_pred and y = y_true:
//   S1 = -y       * (1-p)^gamma * log(p + eps)        foreground term
//   S0 = -(1 - y) * p^gamma     * log(1 - p + eps)    background term
//   FL   = alpha * S1 + (1 - alpha) * S0
//   SBFL = beta  * S1 + (1 - beta)  * S0,  beta = 0.4 * sum(S0) / (sum(S0) + sum(S1)) + 0.5
// beta is recomputed every batch and treated as a constant by backward.
// The returned scalars are means over pixels.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <utility>

#include "tscnn/tensor.hpp"

namespace tscnn {

struct FocalConfig {
  double alpha = 0.9;
  double gamma = 2.0;
  double epsilon = 1e-7;
  /// Use the masks exactly as typeset in the SBFL definition (y_pred in place
  /// of y_true). Off by default; see README.
  bool sbfl_mask_by_prediction = false;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("focal alpha must lie in (0, 1)");
    if (!(gamma >= 0.0)) throw InvalidArgument("focal gamma must be >= 0");
    if (!(epsilon >= 0.0)) throw InvalidArgument("focal epsilon must be >= 0");
  }
};

/// One optimization step's loss decomposition.
struct LossReport {
  double sum_bg = 0;  // sum(S0), or (1-alpha)*sum(S0) for focal-loss runs
  double sum_fg = 0;  // sum(S1), or alpha*sum(S1) for focal-loss runs
  double beta = 0.5;  // beta for SBFL, the constant alpha for focal-loss runs
  double total = 0;
  std::uint64_t step = 0;
};

template <class T>
struct SbflTerms {
  Tensor<T> s0;
  Tensor<T> s1;
};

namespace detail {
template <class T>
void check_loss_inputs(const Tensor<T>& y_true, const Tensor<T>& y_pred, const char* op) {
  check_same_shape(y_true, y_pred, op);
}
}  // namespace detail

/// Per-pixel background (S0) and foreground (S1) focal terms without alpha.
template <class T>
SbflTerms<T> sbfl_components(const Tensor<T>& y_true, const Tensor<T>& y_pred, double gamma, double epsilon,
                             bool mask_by_prediction = false) {
  detail::check_loss_inputs(y_true, y_pred, "sbfl_components");
  const T g = static_cast<T>(gamma), e = static_cast<T>(epsilon);
  Tensor<T> one_minus_p = rsub_scalar(T(1), y_pred);
  Tensor<T> fg_mask = mask_by_prediction ? y_pred : y_true;
  Tensor<T> bg_mask = mask_by_prediction ? one_minus_p : rsub_scalar(T(1), y_true);
  Tensor<T> s1 = neg(mul(mul(fg_mask, pow_scalar(one_minus_p, g)), log_shift(y_pred, e)));
  Tensor<T> s0 = neg(mul(mul(bg_mask, pow_scalar(y_pred, g)), log_shift(one_minus_p, e)));
  return {std::move(s0), std::move(s1)};
}

/// beta = 0.4 * sum0 / (sum0 + sum1) + 0.5, in [0.5, 0.9]; 0.5 when both sums vanish.
inline double balance_beta(double sum0, double sum1) {
  if (!(sum0 >= 0.0) || !(sum1 >= 0.0)) {
    throw InvalidArgument("balance_beta: loss sums must be non-negative (got " + std::to_string(sum0) + ", " +
                          std::to_string(sum1) + ")");
  }
  const double total = sum0 + sum1;
  if (total < 1e-12) return 0.5;
  return 0.4 * (sum0 / total) + 0.5;  // ratio first: it cannot round above 1, so beta stays <= 0.9
}

/// Mean over pixels of weight_fg * S1 + (1 - weight_fg) * S0.
template <class T>
Tensor<T> weighted_focal_mean(const SbflTerms<T>& terms, double weight_fg) {
  const T w = static_cast<T>(weight_fg);
  return mean(add(mul_scalar(terms.s1, w), mul_scalar(terms.s0, T(1) - w)));
}

/// Per-pixel focal loss values (before reduction).
template <class T>
Tensor<T> focal_loss_map(const Tensor<T>& y_true, const Tensor<T>& y_pred, const FocalConfig& cfg) {
  cfg.validate();
  auto terms = sbfl_components(y_true, y_pred, cfg.gamma, cfg.epsilon);
  const T a = static_cast<T>(cfg.alpha);
  return add(mul_scalar(terms.s1, a), mul_scalar(terms.s0, T(1) - a));
}

/// Mean focal loss over all pixels.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& y_true, const Tensor<T>& y_pred, const FocalConfig& cfg) {
  return mean(focal_loss_map(y_true, y_pred, cfg));
}

/// Focal loss plus a trace record holding alpha-weighted term sums, with beta := alpha.
template <class T>
std::pair<Tensor<T>, LossReport> focal_loss_report(const Tensor<T>& y_true, const Tensor<T>& y_pred,
                                                   const FocalConfig& cfg) {
  cfg.validate();
  auto terms = sbfl_components(y_true, y_pred, cfg.gamma, cfg.epsilon);
  Tensor<T> total = weighted_focal_mean(terms, cfg.alpha);
  LossReport r;
  r.sum_fg = cfg.alpha * std::max(0.0, static_cast<double>(sum(terms.s1.detach()).item()));
  r.sum_bg = (1.0 - cfg.alpha) * std::max(0.0, static_cast<double>(sum(terms.s0.detach()).item()));
  r.beta = cfg.alpha;
  r.total = static_cast<double>(total.item());
  return {std::move(total), r};
}

/// SBFL with beta fixed by the caller (gradient checks freeze beta this way).
template <class T>
Tensor<T> sbfl_with_beta(const Tensor<T>& y_true, const Tensor<T>& y_pred, const FocalConfig& cfg, double beta) {
  return weighted_focal_mean(sbfl_components(y_true, y_pred, cfg.gamma, cfg.epsilon, cfg.sbfl_mask_by_prediction), beta);
}

/// Self-balancing focal loss. The term sums are clamped at zero: with eps > 0
/// a pixel's term can dip below zero by at most eps-order slack.
template <class T>
std::pair<Tensor<T>, LossReport> sbfl(const Tensor<T>& y_true, const Tensor<T>& y_pred, const FocalConfig& cfg) {
  if (!(cfg.gamma >= 0.0) || !(cfg.epsilon >= 0.0)) throw InvalidArgument("sbfl: gamma and epsilon must be >= 0");
  auto terms = sbfl_components(y_true, y_pred, cfg.gamma, cfg.epsilon, cfg.sbfl_mask_by_prediction);
  LossReport r;
  r.sum_bg = std::max(0.0, static_cast<double>(sum(terms.s0.detach()).item()));
  r.sum_fg = std::max(0.0, static_cast<double>(sum(terms.s1.detach()).item()));
  r.beta = balance_beta(r.sum_bg, r.sum_fg);
  Tensor<T> total = weighted_focal_mean(terms, r.beta);
  r.total = static_cast<double>(total.item());
  return {std::move(total), r};
}

}  // namespace tscnn
