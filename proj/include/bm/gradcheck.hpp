#pragma once

// Finite-difference verification of every analytic gradient in the library.
//
// Each suite compares an analytic gradient against central differences of
// the same objective recomputed in long double, so that the reference is
// not limited by cancellation in the double-precision evaluation. Network
// coordinates whose +-h step flips a ReLU are skipped.

#include <bm/errors.hpp>
#include <bm/linalg.hpp>
#include <bm/loss.hpp>
#include <bm/nn.hpp>
#include <bm/semisup.hpp>
#include <bm/specfn.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace bm {

struct GradcheckConfig {
  std::uint64_t seed = 0;
  int trials = 20;
  double tolerance = 1e-5;
  long double step = 1e-5L;
  double floor = 1e-8;  ///< denominator floor of the relative error

  void validate() const {
    if (trials < 1) throw ConfigError("gradcheck: trials must be at least 1");
    if (!(tolerance > 0.0)) throw ConfigError("gradcheck: tolerance must be positive");
    if (!(step > 0.0L)) throw ConfigError("gradcheck: step must be positive");
  }
};

struct SuiteResult {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  ///< coordinates at a ReLU kink
  bool passed = false;
};

struct GradcheckReport {
  std::uint64_t seed = 0;
  int trials = 0;
  double tolerance = 0.0;
  std::vector<SuiteResult> suites;

  [[nodiscard]] bool passed() const {
    return std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.passed; });
  }
};

namespace detail {

using Ld = long double;
using LdRows = std::vector<std::vector<Ld>>;

inline Ld kl_ld(std::span<const Ld> alpha, std::span<const Ld> beta) {
  Ld a0 = 0, b0 = 0;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    a0 += alpha[k];
    b0 += beta[k];
  }
  const Ld psi0 = specfn::digamma(a0);
  Ld kl = specfn::lgamma(a0) - specfn::lgamma(b0);
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    kl += specfn::lgamma(beta[k]) - specfn::lgamma(alpha[k]) + (alpha[k] - beta[k]) * (specfn::digamma(alpha[k]) - psi0);
  }
  return kl;
}

inline Ld elbo_ld(std::span<const Ld> alpha, std::size_t y, Ld lam, std::span<const Ld> beta) {
  Ld a0 = 0;
  for (Ld a : alpha) a0 += a;
  return specfn::digamma(alpha[y]) - specfn::digamma(a0) - lam * kl_ld(alpha, beta);
}

inline std::vector<Ld> softmax_ld(std::span<const Ld> f) {
  const Ld top = *std::max_element(f.begin(), f.end());
  std::vector<Ld> p(f.size());
  Ld z = 0;
  for (std::size_t k = 0; k < f.size(); ++k) z += (p[k] = std::exp(f[k] - top));
  for (Ld& v : p) v /= z;
  return p;
}

inline Ld sample_loss_ld(LossKind kind, std::span<const Ld> f, std::size_t y, Ld lam) {
  if (kind == LossKind::SoftmaxCe) return -std::log(softmax_ld(f)[y]);
  std::vector<Ld> alpha(f.size()), beta(f.size(), 1.0L);
  for (std::size_t k = 0; k < f.size(); ++k) alpha[k] = std::exp(std::clamp(f[k], Ld{-30}, Ld{30}));
  return -elbo_ld(alpha, y, lam, beta);
}

inline Ld consistency_ld(Consistency kind, std::span<const Ld> f_ref, std::span<const Ld> f) {
  if (kind == Consistency::DirichletKl) {
    std::vector<Ld> a(f.size()), b(f.size());
    for (std::size_t k = 0; k < f.size(); ++k) {
      a[k] = std::exp(f_ref[k]);
      b[k] = std::exp(f[k]);
    }
    return kl_ld(a, b);
  }
  const auto p = softmax_ld(f_ref), q = softmax_ld(f);
  Ld s = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    s += kind == Consistency::SoftmaxKl ? p[k] * std::log(p[k] / q[k]) : (p[k] - q[k]) * (p[k] - q[k]);
  }
  return s;
}

/// Long double forward pass from flattened parameters; records the ReLU pattern.
inline LdRows forward_ld(const Mlp& shape, std::span<const Ld> params, const Matrix& x, std::vector<bool>& mask) {
  mask.clear();
  LdRows act(static_cast<std::size_t>(x.rows()));
  for (std::size_t i = 0; i < act.size(); ++i) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) act[i].push_back(x(static_cast<Eigen::Index>(i), c));
  }
  std::size_t at = 0;
  const auto& layers = shape.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto out = static_cast<std::size_t>(layers[l].fan_out());
    const auto in = static_cast<std::size_t>(layers[l].fan_in());
    const Ld* w = params.data() + at;
    const Ld* b = w + out * in;
    at += out * in + out;
    const bool hidden = l + 1 < layers.size();
    for (auto& a : act) {
      std::vector<Ld> z(out);
      for (std::size_t r = 0; r < out; ++r) {
        Ld s = b[r];
        for (std::size_t c = 0; c < in; ++c) s += w[r * in + c] * a[c];
        if (hidden) {
          mask.push_back(s > 0);
          s = std::max(s, Ld{0});
        }
        z[r] = s;
      }
      a = std::move(z);
    }
  }
  return act;
}

class Tally {
 public:
  explicit Tally(const GradcheckConfig& cfg) : cfg_(cfg) {}

  void compare(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), cfg_.floor});
    const double rel = std::abs(analytic - numeric) / denom;
    // NaN must register as a failure.
    worst_ = std::isnan(rel) ? rel : std::max(worst_, rel);
    ++checked_;
  }
  void compare(std::span<const double> analytic, std::span<const double> numeric) {
    for (std::size_t i = 0; i < analytic.size(); ++i) compare(analytic[i], numeric[i]);
  }
  void skip() { ++skipped_; }

  [[nodiscard]] SuiteResult result(std::string name) const {
    return {std::move(name), worst_, checked_, skipped_, checked_ > 0 && worst_ <= cfg_.tolerance};
  }

 private:
  const GradcheckConfig& cfg_;
  double worst_ = 0.0;
  std::size_t checked_ = 0;
  std::size_t skipped_ = 0;
};

template <class F>
std::vector<double> central_differences(F&& f, std::span<const double> x, Ld h) {
  std::vector<Ld> p(x.begin(), x.end());
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Ld x0 = p[i];
    p[i] = x0 + h;
    const Ld up = f(p);
    p[i] = x0 - h;
    const Ld down = f(p);
    p[i] = x0;
    g[i] = static_cast<double>((up - down) / (2 * h));
  }
  return g;
}

/// Compares flattened analytic parameter gradients with central differences
/// of `objective(logit rows)`, skipping coordinates at a ReLU kink.
template <class Objective>
void check_network(const Mlp& model, const Matrix& x, const Vector& analytic, Objective objective,
                   const GradcheckConfig& cfg, Tally& tally) {
  const Vector p0 = model.parameters();
  std::vector<Ld> p(p0.data(), p0.data() + p0.size());
  std::vector<bool> base, up_mask, down_mask;
  forward_ld(model, p, x, base);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Ld v = p[i];
    p[i] = v + cfg.step;
    const Ld up = objective(forward_ld(model, p, x, up_mask));
    p[i] = v - cfg.step;
    const Ld down = objective(forward_ld(model, p, x, down_mask));
    p[i] = v;
    if (up_mask != base || down_mask != base) {
      tally.skip();
      continue;
    }
    tally.compare(analytic[static_cast<Eigen::Index>(i)], static_cast<double>((up - down) / (2 * cfg.step)));
  }
}

template <class Rng>
Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = normal(rng);
  }
  return m;
}

inline constexpr double kLambdaGrid[] = {1.0, 0.1, 0.01};

}  // namespace detail

/// d l_EB / d alpha and d l_EB^lam / d f on random instances with
/// alpha in [0.1, 50], K in {2..10}; also the general prior/lambda gradient.
inline SuiteResult gradcheck_bmloss(const GradcheckConfig& cfg) {
  using detail::Ld;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> classes(2, 10);
  std::uniform_real_distribution<double> conc(0.1, 50.0), prior(0.2, 5.0);
  detail::Tally tally(cfg);
  for (int t = 0; t < cfg.trials; ++t) {
    const std::size_t k = classes(rng);
    std::uniform_int_distribution<std::size_t> label(0, k - 1);
    const std::size_t y = label(rng);
    std::vector<double> alpha(k), beta(k), f(k);
    for (std::size_t j = 0; j < k; ++j) {
      alpha[j] = conc(rng);
      beta[j] = prior(rng);
      f[j] = std::log(alpha[j]);
    }
    const std::vector<Ld> ones(k, 1.0L), beta_ld(beta.begin(), beta.end());

    tally.compare(grad_alpha(Concentration(alpha), y, Concentration::uniform(k)),
                  detail::central_differences([&](const std::vector<Ld>& a) { return detail::elbo_ld(a, y, 1.0L, ones); },
                                              alpha, cfg.step));

    LossConfig lc;
    lc.lam = detail::kLambdaGrid[static_cast<std::size_t>(t) % 3];
    const auto exp_all = [](const std::vector<Ld>& g) {
      std::vector<Ld> a(g.size());
      for (std::size_t j = 0; j < g.size(); ++j) a[j] = std::exp(g[j]);
      return a;
    };
    tally.compare(grad_logits_lambda(f, y, lc),
                  detail::central_differences(
                      [&](const std::vector<Ld>& g) { return detail::elbo_ld(exp_all(g), y, Ld(lc.lam), ones); }, f,
                      cfg.step));

    lc.prior = Concentration(beta);
    const auto loss = bm_loss(f, y, lc);
    tally.compare(loss.grad, detail::central_differences(
                                 [&](const std::vector<Ld>& g) { return -detail::elbo_ld(exp_all(g), y, Ld(lc.lam), beta_ld); },
                                 f, cfg.step));
  }
  return tally.result("bmloss");
}

/// Full-network parameter gradients for both losses on a 2-16-16-3 MLP.
inline SuiteResult gradcheck_nn(const GradcheckConfig& cfg) {
  std::mt19937_64 rng(cfg.seed + 1);
  const std::vector<int> dims{2, 16, 16, 3};
  detail::Tally tally(cfg);
  for (int t = 0; t < cfg.trials; ++t) {
    const Mlp model = Mlp::he(dims, rng);
    const Matrix x = detail::gaussian_matrix(8, 2, rng);
    std::uniform_int_distribution<int> label(0, 2);
    std::vector<int> labels(8);
    for (int& y : labels) y = label(rng);
    for (LossKind kind : {LossKind::SoftmaxCe, LossKind::BeliefMatching}) {
      LossConfig lc;
      lc.lam = detail::kLambdaGrid[static_cast<std::size_t>(t) % 3];
      ForwardTape tape;
      const BatchLoss loss = batch_loss(kind, model.forward(x, &tape), labels, lc);
      const Vector analytic = Mlp::flatten(model.backward(tape, loss.grad).layers);
      detail::check_network(
          model, x, analytic,
          [&](const detail::LdRows& f) {
            detail::Ld total = 0;
            for (std::size_t i = 0; i < f.size(); ++i) {
              total += detail::sample_loss_ld(kind, f[i], static_cast<std::size_t>(labels[i]), lc.lam);
            }
            return total / static_cast<detail::Ld>(f.size());
          },
          cfg, tally);
    }
  }
  return tally.result("nn");
}

/// Consistency gradients with the reference held fixed: per-logit and
/// through the network, for every consistency measure.
inline SuiteResult gradcheck_semisup(const GradcheckConfig& cfg) {
  using detail::Ld;
  std::mt19937_64 rng(cfg.seed + 2);
  const std::vector<int> dims{2, 16, 16, 3};
  detail::Tally tally(cfg);
  for (int t = 0; t < cfg.trials; ++t) {
    const Mlp model = Mlp::he(dims, rng);
    const Matrix x = detail::gaussian_matrix(6, 2, rng);
    const Matrix xp = x + 0.2 * detail::gaussian_matrix(6, 2, rng);
    const Matrix ref = model.forward(x);
    for (Consistency kind : {Consistency::SoftmaxKl, Consistency::SoftmaxL2, Consistency::DirichletKl}) {
      const std::span<const double> r0(ref.row(0).data(), 3);
      const std::vector<Ld> r0_ld(r0.begin(), r0.end());
      const Matrix fp = model.forward(xp);
      const std::vector<double> f0(fp.row(0).data(), fp.row(0).data() + 3);
      tally.compare(consistency_grad(kind, r0, f0),
                    detail::central_differences(
                        [&](const std::vector<Ld>& g) { return detail::consistency_ld(kind, r0_ld, g); }, f0, cfg.step));

      const ConsistencyTerm term = consistency_term(model, xp, ref, kind);
      detail::check_network(
          model, xp, Mlp::flatten(term.grads.layers),
          [&](const detail::LdRows& f) {
            Ld total = 0;
            for (std::size_t i = 0; i < f.size(); ++i) {
              const auto row = ref.row(static_cast<Eigen::Index>(i));
              const std::vector<Ld> r(row.begin(), row.end());
              total += detail::consistency_ld(kind, r, f[i]);
            }
            return total / static_cast<Ld>(f.size());
          },
          cfg, tally);
    }
  }
  return tally.result("semisup");
}

inline GradcheckReport run_gradcheck(const GradcheckConfig& cfg) {
  cfg.validate();
  GradcheckReport report{cfg.seed, cfg.trials, cfg.tolerance, {}};
  report.suites.push_back(gradcheck_bmloss(cfg));
  report.suites.push_back(gradcheck_nn(cfg));
  report.suites.push_back(gradcheck_semisup(cfg));
  return report;
}

/// {"seed", "trials", "tolerance", "passed", "suites": [{"name",
/// "max_relative_error", "checked", "skipped", "passed"}]}
inline nlohmann::json to_json(const GradcheckReport& r) {
  nlohmann::json suites = nlohmann::json::array();
  for (const auto& s : r.suites) {
    suites.push_back({{"name", s.name},
                      {"max_relative_error", s.max_relative_error},
                      {"checked", s.checked},
                      {"skipped", s.skipped},
                      {"passed", s.passed}});
  }
  return {{"seed", r.seed}, {"trials", r.trials}, {"tolerance", r.tolerance}, {"passed", r.passed()}, {"suites", suites}};
}

}  // namespace bm
