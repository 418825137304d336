#pragma once

// Belief-matching loss and the softmax cross-entropy baseline.
//
// Logits f map to Dirichlet concentrations alpha = exp(clamp(f)). The
// objective per sample is the (optionally KL-scaled) evidence lower bound
//
//   l(y, alpha) = psi(alpha_y) - psi(alpha_0) - lam * KL(Dir(alpha) || Dir(beta))
//
// whose derivative with respect to alpha_k is
//
//   (onehot_k - lam (alpha_k - beta_k)) psi'(alpha_k) - (1 - lam (alpha_0 - beta_0)) psi'(alpha_0).
//
// Everything here is O(K) per sample.

#include <bm/linalg.hpp>
#include <bm/simplex.hpp>
#include <bm/specfn.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace bm {

/// Belief-matching hyperparameters.
struct LossConfig {
  double lam = 0.01;                   ///< multiplier on the KL term
  std::optional<Concentration> prior;  ///< beta; all-ones of length K when unset
  double logit_clamp = 30.0;           ///< logits are clamped to [-c, c] before exp

  void validate() const {
    if (!(lam > 0.0) || !std::isfinite(lam)) throw DomainError("LossConfig: lam must be positive");
    if (!(logit_clamp > 0.0)) throw DomainError("LossConfig: logit_clamp must be positive");
  }

  [[nodiscard]] Concentration prior_for(std::size_t k) const {
    if (!prior) return Concentration::uniform(k, 1.0);
    detail::require_same_size(prior->size(), k, "LossConfig prior");
    return *prior;
  }

  [[nodiscard]] bool prior_is_ones() const {
    return !prior || std::all_of(prior->values().begin(), prior->values().end(), [](double b) { return b == 1.0; });
  }
};

namespace detail {

inline void require_finite_logits(std::span<const double> f, const char* what) {
  for (double v : f) {
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << what << ": non-finite logit " << v;
      throw DomainError(msg.str());
    }
  }
}

}  // namespace detail

/// Numerically stable softmax.
inline ProbVector softmax(std::span<const double> f) {
  detail::require_finite_logits(f, "softmax");
  const double top = *std::max_element(f.begin(), f.end());
  std::vector<double> p(f.size());
  double total = 0.0;
  for (std::size_t k = 0; k < f.size(); ++k) {
    p[k] = std::exp(f[k] - top);
    total += p[k];
  }
  for (double& v : p) v /= total;
  return ProbVector(std::move(p));
}

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;  ///< derivative of loss with respect to the logits
};

/// -ln softmax_y(f) and its gradient softmax(f) - onehot(y).
inline LossAndGrad softmax_ce(std::span<const double> f, std::size_t y) {
  detail::require_class(y, f.size(), "softmax_ce");
  detail::require_finite_logits(f, "softmax_ce");
  const double top = *std::max_element(f.begin(), f.end());
  double total = 0.0;
  for (double v : f) total += std::exp(v - top);
  LossAndGrad out;
  out.loss = std::log(total) + top - f[y];
  out.grad.resize(f.size());
  for (std::size_t k = 0; k < f.size(); ++k) out.grad[k] = std::exp(f[k] - top) / total;
  out.grad[y] -= 1.0;
  return out;
}

/// alpha_k = exp(clamp(f_k, -c, c)).
inline Concentration alpha_from_logits(std::span<const double> f, const LossConfig& cfg) {
  detail::require_finite_logits(f, "alpha_from_logits");
  std::vector<double> alpha(f.size());
  for (std::size_t k = 0; k < f.size(); ++k) alpha[k] = std::exp(std::clamp(f[k], -cfg.logit_clamp, cfg.logit_clamp));
  return Concentration(std::move(alpha));
}

/// ELBO with KL weight `lam` against an arbitrary prior. elbo() and
/// elbo_lambda() are the lam = 1 and beta = 1 special cases.
inline double scaled_elbo(std::span<const double> f, std::size_t y, double lam, const Concentration& prior,
                          double logit_clamp) {
  detail::require_class(y, f.size(), "elbo");
  LossConfig cfg;
  cfg.logit_clamp = logit_clamp;
  const Concentration alpha = alpha_from_logits(f, cfg);
  return expected_log_prob(alpha, y) - lam * kl_dirichlet(alpha, prior);
}

/// d scaled_elbo / d f. Components whose logit is clamped get zero.
inline std::vector<double> grad_logits_scaled(std::span<const double> f, std::size_t y, double lam,
                                              const Concentration& prior, double logit_clamp) {
  detail::require_class(y, f.size(), "grad_logits");
  detail::require_same_size(f.size(), prior.size(), "grad_logits");
  LossConfig cfg;
  cfg.logit_clamp = logit_clamp;
  const Concentration alpha = alpha_from_logits(f, cfg);
  const double shared =
      (1.0 - lam * (alpha.alpha0() - prior.alpha0())) * specfn::trigamma(alpha.alpha0());
  std::vector<double> g(f.size(), 0.0);
  for (std::size_t k = 0; k < f.size(); ++k) {
    if (f[k] > logit_clamp || f[k] < -logit_clamp) continue;
    const double onehot = k == y ? 1.0 : 0.0;
    const double d_alpha = (onehot - lam * (alpha[k] - prior[k])) * specfn::trigamma(alpha[k]) - shared;
    g[k] = alpha[k] * d_alpha;
  }
  return g;
}

/// l_EB = E[ln z_y] - KL(Dir(alpha) || Dir(beta)), the quantity to maximize.
inline double elbo(std::span<const double> f, std::size_t y, const LossConfig& cfg) {
  return scaled_elbo(f, y, 1.0, cfg.prior_for(f.size()), cfg.logit_clamp);
}

/// E[ln z_y] - lam KL(Dir(alpha) || Dir(1)). Requires the all-ones prior.
inline double elbo_lambda(std::span<const double> f, std::size_t y, const LossConfig& cfg) {
  if (!cfg.prior_is_ones()) throw DomainError("elbo_lambda: prior must be all ones");
  return scaled_elbo(f, y, cfg.lam, Concentration::uniform(f.size()), cfg.logit_clamp);
}

/// d l_EB / d alpha.
inline std::vector<double> grad_alpha(const Concentration& alpha, std::size_t y, const Concentration& prior) {
  detail::require_same_size(alpha.size(), prior.size(), "grad_alpha");
  detail::require_class(y, alpha.size(), "grad_alpha");
  const double shared = (1.0 - (alpha.alpha0() - prior.alpha0())) * specfn::trigamma(alpha.alpha0());
  std::vector<double> g(alpha.size());
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    const double onehot = k == y ? 1.0 : 0.0;
    g[k] = (onehot - (alpha[k] - prior[k])) * specfn::trigamma(alpha[k]) - shared;
  }
  return g;
}

/// d elbo_lambda / d f.
inline std::vector<double> grad_logits_lambda(std::span<const double> f, std::size_t y, const LossConfig& cfg) {
  if (!cfg.prior_is_ones()) throw DomainError("grad_logits_lambda: prior must be all ones");
  return grad_logits_scaled(f, y, cfg.lam, Concentration::uniform(f.size()), cfg.logit_clamp);
}

/// Minimization form: loss = -scaled_elbo(lam, prior), gradient negated.
inline LossAndGrad bm_loss(std::span<const double> f, std::size_t y, const LossConfig& cfg) {
  const Concentration prior = cfg.prior_for(f.size());
  LossAndGrad out;
  out.loss = -scaled_elbo(f, y, cfg.lam, prior, cfg.logit_clamp);
  out.grad = grad_logits_scaled(f, y, cfg.lam, prior, cfg.logit_clamp);
  for (double& g : out.grad) g = -g;
  return out;
}

enum class LossKind { SoftmaxCe, BeliefMatching };

inline std::string to_string(LossKind kind) {
  return kind == LossKind::SoftmaxCe ? "softmax" : "bm";
}

inline LossKind parse_loss_kind(const std::string& name) {
  if (name == "softmax" || name == "softmax-ce" || name == "ce") return LossKind::SoftmaxCe;
  if (name == "bm" || name == "belief-matching") return LossKind::BeliefMatching;
  throw std::invalid_argument("unknown loss '" + name + "' (expected softmax or bm)");
}

inline LossAndGrad sample_loss(LossKind kind, std::span<const double> f, std::size_t y, const LossConfig& cfg) {
  return kind == LossKind::SoftmaxCe ? softmax_ce(f, y) : bm_loss(f, y, cfg);
}

/// Predictive class probabilities: the softmax, or the Dirichlet mean.
inline ProbVector predictive_mean(LossKind kind, std::span<const double> f, const LossConfig& cfg) {
  return kind == LossKind::SoftmaxCe ? softmax(f) : mean(alpha_from_logits(f, cfg));
}

struct BatchLoss {
  double loss = 0.0;  ///< arithmetic mean over the batch
  Matrix grad;        ///< d(mean loss) / d logits
};

/// Mean loss over a batch. Per-sample terms are summed in row order.
inline BatchLoss batch_loss(LossKind kind, const Matrix& logits, std::span<const int> labels, const LossConfig& cfg) {
  detail::require_same_size(static_cast<std::size_t>(logits.rows()), labels.size(), "batch_loss");
  const auto n = logits.rows();
  const auto k = static_cast<std::size_t>(logits.cols());
  BatchLoss out;
  out.grad.resize(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::span<const double> row(logits.row(i).data(), k);
    const auto sample = sample_loss(kind, row, static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]), cfg);
    out.loss += sample.loss;
    for (std::size_t j = 0; j < k; ++j) out.grad(i, static_cast<Eigen::Index>(j)) = sample.grad[j] / static_cast<double>(n);
  }
  out.loss /= static_cast<double>(n);
  return out;
}

}  // namespace bm
