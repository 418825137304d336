#pragma once

// Consistency regularizers for semi-supervised training.
//
// Every consistency measure compares a reference prediction (the clean
// forward pass) with a perturbed one. The reference is a constant: gradients
// flow only through the perturbed pass.

#include <bm/errors.hpp>
#include <bm/linalg.hpp>
#include <bm/loss.hpp>
#include <bm/nn.hpp>
#include <bm/simplex.hpp>
#include <bm/specfn.hpp>
#include <bm/target.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace bm {

enum class Consistency {
  SoftmaxKl,    ///< KL(softmax(f_ref) || softmax(f))
  SoftmaxL2,    ///< ||softmax(f_ref) - softmax(f)||^2
  DirichletKl,  ///< KL(Dir(exp f_ref) || Dir(exp f))
};

inline std::string to_string(Consistency c) {
  switch (c) {
    case Consistency::SoftmaxKl: return "softmax-kl";
    case Consistency::SoftmaxL2: return "softmax-l2";
    case Consistency::DirichletKl: return "dirichlet-kl";
  }
  return "?";
}

inline Consistency parse_consistency(const std::string& name) {
  if (name == "softmax-kl") return Consistency::SoftmaxKl;
  if (name == "softmax-l2") return Consistency::SoftmaxL2;
  if (name == "dirichlet-kl") return Consistency::DirichletKl;
  throw std::invalid_argument("unknown consistency '" + name + "' (expected softmax-kl, softmax-l2 or dirichlet-kl)");
}

/// Pi-model: the perturbed pass sees inputs with added N(0, noise_sd^2) noise.
struct PiConfig {
  double noise_sd = 0.1;
  Consistency consistency = Consistency::SoftmaxL2;
  double coeff = 0.5;

  void validate() const {
    if (!(noise_sd >= 0.0) || !std::isfinite(noise_sd)) throw ConfigError("pi: noise_sd must be non-negative");
    if (consistency == Consistency::SoftmaxKl) throw ConfigError("pi: consistency must be softmax-l2 or dirichlet-kl");
    if (!(coeff >= 0.0)) throw ConfigError("pi: coeff must be non-negative");
  }
};

/// Virtual adversarial training with power-iteration direction search.
struct VatConfig {
  double epsilon = 0.5;  ///< radius of the adversarial perturbation
  double xi = 1e-6;      ///< probe scale for the power iteration
  int power_iters = 1;
  Consistency consistency = Consistency::SoftmaxKl;
  double coeff = 0.03;

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("vat: epsilon must be positive");
    if (!(xi > 0.0) || !std::isfinite(xi)) throw ConfigError("vat: xi must be positive");
    if (power_iters < 1) throw ConfigError("vat: power_iters must be at least 1");
    if (consistency == Consistency::SoftmaxL2) throw ConfigError("vat: consistency must be softmax-kl or dirichlet-kl");
    if (!(coeff >= 0.0)) throw ConfigError("vat: coeff must be non-negative");
  }
};

namespace detail {

inline std::vector<double> softmax_values(std::span<const double> f) {
  const auto p = softmax(f);
  return {p.begin(), p.end()};
}

inline Concentration concentration_of(std::span<const double> f, double clamp) {
  LossConfig cfg;
  cfg.logit_clamp = clamp;
  return alpha_from_logits(f, cfg);
}

}  // namespace detail

/// Divergence of the perturbed prediction `f` from the reference `f_ref`.
inline double consistency(Consistency kind, std::span<const double> f_ref, std::span<const double> f,
                          double logit_clamp = 30.0) {
  detail::require_same_size(f_ref.size(), f.size(), "consistency");
  switch (kind) {
    case Consistency::SoftmaxKl: {
      const auto p = detail::softmax_values(f_ref);
      // ln q_k = f_k - logsumexp(f), which stays finite where q_k underflows.
      const double top = *std::max_element(f.begin(), f.end());
      double z = 0.0;
      for (double v : f) z += std::exp(v - top);
      const double lse = top + std::log(z);
      const double top_ref = *std::max_element(f_ref.begin(), f_ref.end());
      double z_ref = 0.0;
      for (double v : f_ref) z_ref += std::exp(v - top_ref);
      const double lse_ref = top_ref + std::log(z_ref);
      double kl = 0.0;
      for (std::size_t k = 0; k < f.size(); ++k) {
        if (p[k] > 0.0) kl += p[k] * ((f_ref[k] - lse_ref) - (f[k] - lse));
      }
      return std::max(kl, 0.0);
    }
    case Consistency::SoftmaxL2: {
      const auto p = detail::softmax_values(f_ref);
      const auto q = detail::softmax_values(f);
      double s = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) s += (p[k] - q[k]) * (p[k] - q[k]);
      return s;
    }
    case Consistency::DirichletKl:
      return kl_dirichlet(detail::concentration_of(f_ref, logit_clamp), detail::concentration_of(f, logit_clamp));
  }
  return 0.0;
}

/// d consistency / d f, holding f_ref fixed.
inline std::vector<double> consistency_grad(Consistency kind, std::span<const double> f_ref, std::span<const double> f,
                                            double logit_clamp = 30.0) {
  detail::require_same_size(f_ref.size(), f.size(), "consistency_grad");
  const std::size_t k_max = f.size();
  std::vector<double> g(k_max, 0.0);
  switch (kind) {
    case Consistency::SoftmaxKl: {
      const auto p = detail::softmax_values(f_ref);
      const auto q = detail::softmax_values(f);
      for (std::size_t k = 0; k < k_max; ++k) g[k] = q[k] - p[k];
      break;
    }
    case Consistency::SoftmaxL2: {
      // d/df_j sum_k (q_k - p_k)^2 = 2 q_j (d_j - <q, d>), d = q - p.
      const auto p = detail::softmax_values(f_ref);
      const auto q = detail::softmax_values(f);
      double qd = 0.0;
      for (std::size_t k = 0; k < k_max; ++k) qd += q[k] * (q[k] - p[k]);
      for (std::size_t k = 0; k < k_max; ++k) g[k] = 2.0 * q[k] * ((q[k] - p[k]) - qd);
      break;
    }
    case Consistency::DirichletKl: {
      // d KL(Dir(a) || Dir(b)) / d b_k = psi(b_k) - psi(b_0) - psi(a_k) + psi(a_0).
      const Concentration a = detail::concentration_of(f_ref, logit_clamp);
      const Concentration b = detail::concentration_of(f, logit_clamp);
      const double shared = specfn::digamma(a.alpha0()) - specfn::digamma(b.alpha0());
      for (std::size_t k = 0; k < k_max; ++k) {
        if (f[k] > logit_clamp || f[k] < -logit_clamp) continue;
        g[k] = b[k] * (specfn::digamma(b[k]) - specfn::digamma(a[k]) + shared);
      }
      break;
    }
  }
  return g;
}

/// Pi-model consistency between a clean and a noisy forward pass.
inline double pi_consistency(std::span<const double> f_clean, std::span<const double> f_noisy, const PiConfig& cfg) {
  return consistency(cfg.consistency, f_clean, f_noisy);
}

/// Mean consistency over a batch and its parameter gradient.
struct ConsistencyTerm {
  double value = 0.0;
  Gradients grads;
};

/// Mean over rows of consistency(ref_logits row, model(x_perturbed) row).
/// The reference logits enter as constants.
inline ConsistencyTerm consistency_term(const Mlp& model, const Matrix& x_perturbed, const Matrix& ref_logits,
                                        Consistency kind, double logit_clamp = 30.0) {
  if (ref_logits.rows() != x_perturbed.rows()) throw DimensionError("consistency_term: batch size mismatch");
  ForwardTape tape;
  const Matrix f = model.forward(x_perturbed, &tape);
  const auto n = f.rows();
  const auto k = static_cast<std::size_t>(f.cols());
  Matrix upstream(n, f.cols());
  ConsistencyTerm out;
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::span<const double> ref(ref_logits.row(i).data(), k), pert(f.row(i).data(), k);
    out.value += consistency(kind, ref, pert, logit_clamp);
    const auto g = consistency_grad(kind, ref, pert, logit_clamp);
    for (std::size_t j = 0; j < k; ++j) upstream(i, static_cast<Eigen::Index>(j)) = g[j] / static_cast<double>(n);
  }
  out.value /= static_cast<double>(n);
  out.grads = model.backward(tape, upstream);
  return out;
}

struct VatDirection {
  Matrix r;                ///< one perturbation per row, each of norm epsilon
  std::vector<bool> flat;  ///< rows where the divergence gradient vanished
};

namespace detail {

template <class Rng>
Matrix random_unit_rows(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix d(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double norm = 0.0;
    while (!(norm > 0.0)) {
      for (Eigen::Index c = 0; c < cols; ++c) d(i, c) = normal(rng);
      norm = d.row(i).norm();
    }
    d.row(i) /= norm;
  }
  return d;
}

}  // namespace detail

/// Power-iteration estimate of the most sensitive input direction at every
/// row of x: start from a random unit d, then power_iters times set d to
/// the normalized gradient of the divergence at x + xi d. A row whose
/// gradient vanishes keeps its random direction and is flagged.
template <class Rng>
VatDirection vat_direction(const Mlp& model, const Matrix& x, const VatConfig& cfg, Rng& rng) {
  cfg.validate();
  const Matrix ref = model.forward(x);
  Matrix d = detail::random_unit_rows(x.rows(), x.cols(), rng);
  VatDirection out{Matrix(), std::vector<bool>(static_cast<std::size_t>(x.rows()), false)};
  for (int it = 0; it < cfg.power_iters; ++it) {
    const auto term = consistency_term(model, x + cfg.xi * d, ref, cfg.consistency);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double norm = term.grads.input.row(i).norm();
      if (norm > 0.0 && std::isfinite(norm)) {
        d.row(i) = term.grads.input.row(i) / norm;
        out.flat[static_cast<std::size_t>(i)] = false;
      } else {
        out.flat[static_cast<std::size_t>(i)] = true;
      }
    }
  }
  out.r = cfg.epsilon * d;
  return out;
}

/// VAT consistency term: divergence between the clean prediction and the
/// prediction at the adversarial point, with parameter gradient through the
/// adversarial pass only.
template <class Rng>
ConsistencyTerm vat_term(const Mlp& model, const Matrix& x, const VatConfig& cfg, Rng& rng) {
  const Matrix ref = model.forward(x);
  const VatDirection dir = vat_direction(model, x, cfg, rng);
  return consistency_term(model, x + dir.r, ref, cfg.consistency);
}

template <class Rng>
double vat_loss(const Mlp& model, const Matrix& x, const VatConfig& cfg, Rng& rng) {
  return vat_term(model, x, cfg, rng).value;
}

/// Pi-model term: clean pass as reference, Gaussian input noise on the other.
template <class Rng>
ConsistencyTerm pi_term(const Mlp& model, const Matrix& x, const PiConfig& cfg, Rng& rng) {
  cfg.validate();
  const Matrix ref = model.forward(x);
  Matrix noisy = x;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < noisy.rows(); ++i) {
    for (Eigen::Index c = 0; c < noisy.cols(); ++c) noisy(i, c) += cfg.noise_sd * normal(rng);
  }
  return consistency_term(model, noisy, ref, cfg.consistency);
}

enum class SemisupMethod { None, Pi, Vat };

inline std::string to_string(SemisupMethod m) {
  return m == SemisupMethod::Pi ? "pi" : m == SemisupMethod::Vat ? "vat" : "none";
}

inline SemisupMethod parse_semisup_method(const std::string& name) {
  if (name == "none" || name == "supervised") return SemisupMethod::None;
  if (name == "pi" || name == "pi-model") return SemisupMethod::Pi;
  if (name == "vat") return SemisupMethod::Vat;
  throw std::invalid_argument("unknown semi-supervised method '" + name + "' (expected none, pi or vat)");
}

struct SemisupConfig {
  SemisupMethod method = SemisupMethod::Vat;
  PiConfig pi;
  VatConfig vat;
  int unlabeled_batch_size = 64;

  [[nodiscard]] double coeff() const {
    return method == SemisupMethod::Pi ? pi.coeff : method == SemisupMethod::Vat ? vat.coeff : 0.0;
  }

  void validate() const {
    if (method == SemisupMethod::Pi) pi.validate();
    if (method == SemisupMethod::Vat) vat.validate();
    if (unlabeled_batch_size < 1) throw ConfigError("unlabeled_batch_size must be positive");
  }
};

struct SemisupStep {
  double supervised = 0.0;
  double consistency = 0.0;  ///< mean over the unlabeled batch
  double objective = 0.0;    ///< supervised + coeff * consistency
  Gradients grads;
};

/// Supervised loss on the labeled batch plus coeff times the mean
/// consistency over the unlabeled batch, with the combined gradient.
template <class Rng>
SemisupStep semisup_step(const Mlp& model, const LabeledDataset& labeled, const Matrix& unlabeled, LossKind kind,
                         const LossConfig& loss_cfg, const SemisupConfig& cfg, Rng& rng) {
  ForwardTape tape;
  const Matrix logits = model.forward(labeled.inputs, &tape);
  const BatchLoss sup = batch_loss(kind, logits, labeled.labels, loss_cfg);
  SemisupStep out;
  out.supervised = sup.loss;
  out.grads = model.backward(tape, sup.grad);
  const double coeff = cfg.coeff();
  if (cfg.method != SemisupMethod::None && unlabeled.rows() > 0) {
    const ConsistencyTerm term =
        cfg.method == SemisupMethod::Pi ? pi_term(model, unlabeled, cfg.pi, rng) : vat_term(model, unlabeled, cfg.vat, rng);
    out.consistency = term.value;
    for (std::size_t l = 0; l < out.grads.layers.size(); ++l) {
      out.grads.layers[l].weights += coeff * term.grads.layers[l].weights;
      out.grads.layers[l].biases += coeff * term.grads.layers[l].biases;
    }
  }
  out.objective = out.supervised + coeff * out.consistency;
  return out;
}

template <class Rng>
double semisup_objective(const Mlp& model, const LabeledDataset& labeled, const Matrix& unlabeled, LossKind kind,
                         const LossConfig& loss_cfg, const SemisupConfig& cfg, Rng& rng) {
  return semisup_step(model, labeled, unlabeled, kind, loss_cfg, cfg, rng).objective;
}

/// Semi-supervised training. An epoch is one pass over the unlabeled set in
/// shuffled minibatches; each step pairs an unlabeled batch with the next
/// min(batch_size, n_labeled) labeled samples from a reshuffled cyclic
/// stream. With method None the unlabeled set only sets the step count.
inline TrainResult train_semisup(Mlp model, const LabeledDataset& labeled, const Matrix& unlabeled,
                                 const LabeledDataset* val, const TrainConfig& cfg, const SemisupConfig& scfg) {
  cfg.validate();
  scfg.validate();
  labeled.validate();
  if (unlabeled.rows() == 0) throw DomainError("train_semisup: no unlabeled data");
  if (unlabeled.cols() != labeled.inputs.cols()) throw DimensionError("train_semisup: unlabeled feature count mismatch");

  std::mt19937_64 rng(cfg.seed);
  Optimizer optimizer(cfg.optimizer, cfg.momentum);
  std::vector<std::size_t> u_order(static_cast<std::size_t>(unlabeled.rows()));
  std::iota(u_order.begin(), u_order.end(), std::size_t{0});
  std::vector<std::size_t> l_order(labeled.size());
  std::iota(l_order.begin(), l_order.end(), std::size_t{0});
  std::shuffle(l_order.begin(), l_order.end(), rng);
  std::size_t l_pos = 0;
  const std::size_t l_batch = std::min(labeled.size(), static_cast<std::size_t>(cfg.batch_size));
  const auto u_batch = static_cast<std::size_t>(scfg.unlabeled_batch_size);

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr_schedule(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.milestones);
    std::shuffle(u_order.begin(), u_order.end(), rng);
    double objective_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < u_order.size(); start += u_batch) {
      const std::size_t stop = std::min(u_order.size(), start + u_batch);
      Matrix ub(static_cast<Eigen::Index>(stop - start), unlabeled.cols());
      for (std::size_t i = start; i < stop; ++i) {
        ub.row(static_cast<Eigen::Index>(i - start)) = unlabeled.row(static_cast<Eigen::Index>(u_order[i]));
      }
      std::vector<std::size_t> pick;
      while (pick.size() < l_batch) {
        if (l_pos == l_order.size()) {
          std::shuffle(l_order.begin(), l_order.end(), rng);
          l_pos = 0;
        }
        pick.push_back(l_order[l_pos++]);
      }
      SemisupStep step = semisup_step(model, labeled.subset(pick), ub, cfg.loss, cfg.loss_cfg, scfg, rng);
      if (!std::isfinite(step.objective)) {
        throw DivergenceError("semi-supervised training diverged: non-finite objective at epoch " + std::to_string(epoch));
      }
      objective_sum += step.objective;
      ++steps;
      entry.max_grad_norm = std::max(entry.max_grad_norm, clip_grad_norm(step.grads, cfg.clip_norm));
      optimizer.step(model, step.grads, entry.lr);
    }
    entry.train_loss = objective_sum / static_cast<double>(steps);
    const auto train_eval = evaluate(model, labeled, cfg.loss, cfg.loss_cfg);
    entry.train_error = train_eval.error;
    if (val) {
      const auto ev = evaluate(model, *val, cfg.loss, cfg.loss_cfg);
      entry.val_loss = ev.loss;
      entry.val_error = ev.error;
    }
    result.log.push_back(entry);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace bm
