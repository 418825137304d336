#pragma once

// Fully connected ReLU classifier with hand-written backpropagation.

#include <bm/errors.hpp>
#include <bm/linalg.hpp>
#include <bm/loss.hpp>
#include <bm/target.hpp>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace bm {

/// Affine map x -> W x + b with W of shape fan_out x fan_in.
struct Layer {
  Matrix weights;
  Vector biases;

  [[nodiscard]] Eigen::Index fan_in() const { return weights.cols(); }
  [[nodiscard]] Eigen::Index fan_out() const { return weights.rows(); }
};

/// He-normal weights N(0, 2 / fan_in), zero biases.
template <class Rng>
Layer he_init(int fan_in, int fan_out, Rng& rng) {
  if (fan_in < 1 || fan_out < 1) throw DimensionError("he_init: dimensions must be at least 1");
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  Layer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out)};
  for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
    for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = normal(rng);
  }
  return layer;
}

/// Activations recorded by a forward pass, consumed by backward.
struct ForwardTape {
  std::vector<Matrix> layer_inputs;     // input to layer l (post-ReLU of l-1)
  std::vector<Matrix> pre_activations;  // W x + b of layer l

  [[nodiscard]] bool empty() const { return layer_inputs.empty(); }
};

struct Gradients {
  std::vector<Layer> layers;  ///< same shapes as the model
  Matrix input;               ///< d loss / d input batch

  [[nodiscard]] double squared_norm() const {
    double s = 0.0;
    for (const auto& l : layers) s += l.weights.squaredNorm() + l.biases.squaredNorm();
    return s;
  }
};

class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(std::vector<Layer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw DimensionError("Mlp: no layers");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (layers_[l].biases.size() != layers_[l].fan_out()) throw DimensionError("Mlp: bias length mismatch");
      if (l > 0 && layers_[l].fan_in() != layers_[l - 1].fan_out()) {
        std::ostringstream msg;
        msg << "Mlp: layer " << l << " expects " << layers_[l].fan_in() << " inputs but layer " << l - 1
            << " produces " << layers_[l - 1].fan_out();
        throw DimensionError(msg.str());
      }
    }
  }

  /// Layer widths {input, hidden..., classes}, He-initialized.
  template <class Rng>
  static Mlp he(std::span<const int> dims, Rng& rng) {
    if (dims.size() < 2) throw DimensionError("Mlp::he: need input and output widths");
    std::vector<Layer> layers;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) layers.push_back(he_init(dims[l], dims[l + 1], rng));
    return Mlp(std::move(layers));
  }

  [[nodiscard]] std::vector<int> dims() const {
    std::vector<int> d{static_cast<int>(layers_.front().fan_in())};
    for (const auto& l : layers_) d.push_back(static_cast<int>(l.fan_out()));
    return d;
  }
  [[nodiscard]] Eigen::Index input_dim() const { return layers_.front().fan_in(); }
  [[nodiscard]] Eigen::Index output_dim() const { return layers_.back().fan_out(); }
  [[nodiscard]] const std::vector<Layer>& layers() const { return layers_; }
  [[nodiscard]] std::vector<Layer>& layers() { return layers_; }

  /// Logits for a batch (one row per sample). Fills `tape` when given.
  Matrix forward(const Matrix& x, ForwardTape* tape = nullptr) const {
    if (x.cols() != input_dim()) {
      std::ostringstream msg;
      msg << "Mlp::forward: input has " << x.cols() << " features, model expects " << input_dim();
      throw DimensionError(msg.str());
    }
    if (tape) *tape = ForwardTape{};
    Matrix a = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Matrix z = a * layers_[l].weights.transpose();
      z.rowwise() += layers_[l].biases.transpose();
      if (tape) {
        tape->layer_inputs.push_back(a);
        tape->pre_activations.push_back(z);
      }
      a = l + 1 < layers_.size() ? Matrix(z.cwiseMax(0.0)) : std::move(z);
    }
    return a;
  }

  /// Parameter and input gradients given d loss / d logits for the taped batch.
  [[nodiscard]] Gradients backward(const ForwardTape& tape, const Matrix& grad_logits) const {
    if (tape.empty()) throw std::logic_error("Mlp::backward: no forward pass recorded");
    if (tape.layer_inputs.size() != layers_.size()) throw std::logic_error("Mlp::backward: tape from another model");
    const Eigen::Index n = tape.layer_inputs.front().rows();
    if (grad_logits.rows() != n || grad_logits.cols() != output_dim()) {
      throw DimensionError("Mlp::backward: gradient shape does not match the forward batch");
    }
    Gradients g;
    g.layers.resize(layers_.size());
    Matrix delta = grad_logits;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      g.layers[l].weights = delta.transpose() * tape.layer_inputs[l];
      g.layers[l].biases = delta.colwise().sum().transpose();
      Matrix upstream = delta * layers_[l].weights;
      if (l > 0) upstream.array() *= (tape.pre_activations[l - 1].array() > 0.0).cast<double>();
      delta = std::move(upstream);
    }
    g.input = std::move(delta);
    return g;
  }

  [[nodiscard]] Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& l : layers_) n += l.weights.size() + l.biases.size();
    return n;
  }

  /// All weights (row-major) then biases, layer by layer.
  [[nodiscard]] Vector parameters() const { return flatten(layers_); }

  void set_parameters(const Vector& p) {
    if (p.size() != parameter_count()) throw DimensionError("Mlp::set_parameters: wrong length");
    Eigen::Index at = 0;
    for (auto& l : layers_) {
      std::copy(p.data() + at, p.data() + at + l.weights.size(), l.weights.data());
      at += l.weights.size();
      l.biases = p.segment(at, l.biases.size());
      at += l.biases.size();
    }
  }

  static Vector flatten(const std::vector<Layer>& layers) {
    Eigen::Index n = 0;
    for (const auto& l : layers) n += l.weights.size() + l.biases.size();
    Vector p(n);
    Eigen::Index at = 0;
    for (const auto& l : layers) {
      std::copy(l.weights.data(), l.weights.data() + l.weights.size(), p.data() + at);
      at += l.weights.size();
      p.segment(at, l.biases.size()) = l.biases;
      at += l.biases.size();
    }
    return p;
  }

 private:
  std::vector<Layer> layers_;
};

/// Rescales gradients in place so the global L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_grad_norm(Gradients& grads, double max_norm = 1.0) {
  const double norm = std::sqrt(grads.squared_norm());
  if (!std::isfinite(norm)) throw DivergenceError("clip_grad_norm: non-finite gradient");
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& l : grads.layers) {
      l.weights *= scale;
      l.biases *= scale;
    }
  }
  return norm;
}

/// Warm-up fractions of the base rate for the first five epochs.
inline constexpr std::array<double, 5> kWarmupFractions{0.1, 0.2, 0.4, 0.6, 0.8};

/// Learning rate for `epoch` (0-based). A warm-up shorter than five epochs
/// uses the tail of kWarmupFractions. Each milestone <= epoch multiplies the
/// rate by 0.1.
inline double lr_schedule(int epoch, double base_lr, int warmup_epochs = 5, std::span<const int> milestones = {}) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch");
  if (warmup_epochs < 0 || warmup_epochs > static_cast<int>(kWarmupFractions.size())) {
    throw std::invalid_argument("lr_schedule: warmup_epochs must be in [0, 5]");
  }
  if (epoch < warmup_epochs) {
    return kWarmupFractions[kWarmupFractions.size() - static_cast<std::size_t>(warmup_epochs) + static_cast<std::size_t>(epoch)] * base_lr;
  }
  double lr = base_lr;
  for (int m : milestones) {
    if (epoch >= m) lr *= 0.1;
  }
  return lr;
}

/// Heavy-ball SGD: v <- mu v + g; p <- p - lr v.
struct SgdMomentum {
  double momentum = 0.9;
  Vector velocity;

  void step(Vector& params, const Vector& grad, double lr) {
    if (velocity.size() != params.size()) velocity = Vector::Zero(params.size());
    velocity = momentum * velocity + grad;
    params -= lr * velocity;
  }
};

/// Adam with bias-corrected moment estimates.
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  Vector m, v;
  long steps = 0;

  void step(Vector& params, const Vector& grad, double lr) {
    if (m.size() != params.size()) {
      m = Vector::Zero(params.size());
      v = Vector::Zero(params.size());
    }
    ++steps;
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + epsilon);
  }
};

enum class OptimizerKind { SgdMomentum, Adam };

inline OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd" || name == "sgd-momentum") return OptimizerKind::SgdMomentum;
  if (name == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd or adam)");
}

inline std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "sgd"; }

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double momentum) {
    if (kind == OptimizerKind::Adam) {
      state_ = Adam{};
    } else {
      state_ = SgdMomentum{momentum, {}};
    }
  }

  void step(Mlp& model, const Gradients& grads, double lr) {
    Vector params = model.parameters();
    const Vector g = Mlp::flatten(grads.layers);
    std::visit([&](auto& opt) { opt.step(params, g, lr); }, state_);
    model.set_parameters(params);
  }

 private:
  std::variant<SgdMomentum, Adam> state_;
};

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;
  double base_lr = 0.05;
  int warmup_epochs = 5;
  double clip_norm = 1.0;
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  double momentum = 0.9;
  std::vector<int> milestones;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::SoftmaxCe;
  LossConfig loss_cfg;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(base_lr > 0.0)) throw ConfigError("lr must be positive");
    if (warmup_epochs < 0 || warmup_epochs > 5) throw ConfigError("warmup_epochs must be in [0, 5]");
    if (warmup_epochs > epochs) throw ConfigError("warmup_epochs exceeds epochs");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    try {
      loss_cfg.validate();
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;   ///< mean over the epoch's minibatches, weighted by size
  double train_error = 0.0;  ///< fraction misclassified during the epoch
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_error = std::numeric_limits<double>::quiet_NaN();
  double max_grad_norm = 0.0;  ///< largest pre-clip gradient norm of the epoch
};

struct TrainResult {
  Mlp model;
  std::vector<EpochLog> log;
};

/// Predictive class probabilities, one row per sample.
inline Matrix predict_proba(const Mlp& model, const Matrix& x, LossKind kind, const LossConfig& cfg) {
  const Matrix logits = model.forward(x);
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const auto m = predictive_mean(kind, {logits.row(i).data(), static_cast<std::size_t>(logits.cols())}, cfg);
    for (Eigen::Index k = 0; k < logits.cols(); ++k) p(i, k) = m[static_cast<std::size_t>(k)];
  }
  return p;
}

inline int argmax_row(const Matrix& m, Eigen::Index row) {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < m.cols(); ++k) {
    if (m(row, k) > m(row, best)) best = k;
  }
  return static_cast<int>(best);
}

struct Evaluation {
  double loss = 0.0;
  double error = 0.0;
};

inline Evaluation evaluate(const Mlp& model, const LabeledDataset& data, LossKind kind, const LossConfig& cfg) {
  const Matrix logits = model.forward(data.inputs);
  Evaluation out;
  out.loss = batch_loss(kind, logits, data.labels, cfg).loss;
  std::size_t wrong = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (argmax_row(logits, i) != data.labels[static_cast<std::size_t>(i)]) ++wrong;
  }
  out.error = static_cast<double>(wrong) / static_cast<double>(data.size());
  return out;
}

/// Shuffled minibatch training of the configured loss. The shuffling stream
/// is seeded from cfg.seed, so a (model, data, cfg) triple always produces
/// the same trajectory.
inline TrainResult train(Mlp model, const LabeledDataset& data, const LabeledDataset* val, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  if (static_cast<int>(model.output_dim()) != data.num_classes) throw DimensionError("train: output width != class count");

  std::mt19937_64 rng(cfg.seed);
  Optimizer optimizer(cfg.optimizer, cfg.momentum);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr_schedule(epoch, cfg.base_lr, cfg.warmup_epochs, cfg.milestones);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t wrong = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const LabeledDataset batch = data.subset(std::span<const std::size_t>(order).subspan(start, stop - start));
      ForwardTape tape;
      const Matrix logits = model.forward(batch.inputs, &tape);
      if (!logits.allFinite()) {
        std::ostringstream msg;
        msg << "training diverged: non-finite logits at epoch " << epoch << ", batch starting at " << start;
        throw DivergenceError(msg.str());
      }
      const BatchLoss loss = batch_loss(cfg.loss, logits, batch.labels, cfg.loss_cfg);
      if (!std::isfinite(loss.loss)) {
        std::ostringstream msg;
        msg << "training diverged: non-finite loss at epoch " << epoch << ", batch starting at " << start;
        throw DivergenceError(msg.str());
      }
      loss_sum += loss.loss * static_cast<double>(stop - start);
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        if (argmax_row(logits, i) != batch.labels[static_cast<std::size_t>(i)]) ++wrong;
      }
      Gradients grads = model.backward(tape, loss.grad);
      try {
        entry.max_grad_norm = std::max(entry.max_grad_norm, clip_grad_norm(grads, cfg.clip_norm));
      } catch (const DivergenceError&) {
        std::ostringstream msg;
        msg << "training diverged: non-finite gradient at epoch " << epoch;
        throw DivergenceError(msg.str());
      }
      optimizer.step(model, grads, entry.lr);
    }
    entry.train_loss = loss_sum / static_cast<double>(data.size());
    entry.train_error = static_cast<double>(wrong) / static_cast<double>(data.size());
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

/// Everything needed to reuse a trained model: weights, the input
/// standardization it was trained under, and how to read its outputs.
///
/// JSON schema (format "bm-mlp", version 1):
///   {"format": "bm-mlp", "version": 1, "dims": [d0, d1, ..., K],
///    "layers": [{"fan_in": n, "fan_out": m, "weights": [m*n row-major], "biases": [m]}, ...],
///    "input_mean": [d0], "input_sd": [d0],
///    "loss": "softmax" | "bm", "lambda": x, "prior": [K] | null, "logit_clamp": c}
struct ModelCheckpoint {
  Mlp model;
  std::vector<double> input_mean;
  std::vector<double> input_sd;
  LossKind loss = LossKind::SoftmaxCe;
  LossConfig loss_cfg;
};

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_to_json(const ModelCheckpoint& ckpt) {
  nlohmann::json j;
  j["format"] = "bm-mlp";
  j["version"] = kCheckpointVersion;
  j["dims"] = ckpt.model.dims();
  j["layers"] = nlohmann::json::array();
  for (const auto& l : ckpt.model.layers()) {
    j["layers"].push_back({{"fan_in", l.fan_in()},
                           {"fan_out", l.fan_out()},
                           {"weights", std::vector<double>(l.weights.data(), l.weights.data() + l.weights.size())},
                           {"biases", std::vector<double>(l.biases.data(), l.biases.data() + l.biases.size())}});
  }
  j["input_mean"] = ckpt.input_mean;
  j["input_sd"] = ckpt.input_sd;
  j["loss"] = to_string(ckpt.loss);
  j["lambda"] = ckpt.loss_cfg.lam;
  if (ckpt.loss_cfg.prior) {
    j["prior"] = std::vector<double>(ckpt.loss_cfg.prior->values().begin(), ckpt.loss_cfg.prior->values().end());
  } else {
    j["prior"] = nullptr;
  }
  j["logit_clamp"] = ckpt.loss_cfg.logit_clamp;
  return j;
}

inline ModelCheckpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "bm-mlp") throw DomainError("checkpoint: unknown format");
    if (j.at("version").get<int>() != kCheckpointVersion) throw DomainError("checkpoint: unsupported version");
    std::vector<Layer> layers;
    for (const auto& jl : j.at("layers")) {
      const auto fan_in = jl.at("fan_in").get<Eigen::Index>();
      const auto fan_out = jl.at("fan_out").get<Eigen::Index>();
      const auto w = jl.at("weights").get<std::vector<double>>();
      const auto b = jl.at("biases").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(w.size()) != fan_in * fan_out || static_cast<Eigen::Index>(b.size()) != fan_out) {
        throw DimensionError("checkpoint: parameter array length mismatch");
      }
      Layer layer{Matrix(fan_out, fan_in), Vector(fan_out)};
      std::copy(w.begin(), w.end(), layer.weights.data());
      std::copy(b.begin(), b.end(), layer.biases.data());
      layers.push_back(std::move(layer));
    }
    ModelCheckpoint ckpt;
    ckpt.model = Mlp(std::move(layers));
    if (j.at("dims").get<std::vector<int>>() != ckpt.model.dims()) throw DimensionError("checkpoint: dims disagree with layers");
    ckpt.input_mean = j.at("input_mean").get<std::vector<double>>();
    ckpt.input_sd = j.at("input_sd").get<std::vector<double>>();
    ckpt.loss = parse_loss_kind(j.at("loss").get<std::string>());
    ckpt.loss_cfg.lam = j.at("lambda").get<double>();
    if (!j.at("prior").is_null()) ckpt.loss_cfg.prior = Concentration(j.at("prior").get<std::vector<double>>());
    ckpt.loss_cfg.logit_clamp = j.at("logit_clamp").get<double>();
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out << checkpoint_to_json(ckpt).dump(1) << '\n';
  if (!out) throw IoError("failed writing checkpoint " + path);
}

inline ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DomainError("checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace bm
