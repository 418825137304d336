#pragma once

// Empirical targets: label counts per unique input, the Dirichlet posterior
// they induce, label smoothing, and the view of empirical risk as a weighted
// sum of per-input KL divergences.

#include <bm/linalg.hpp>
#include <bm/simplex.hpp>

#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace bm {

/// Labeled samples: one row of `inputs` per label.
struct LabeledDataset {
  Matrix inputs;
  std::vector<int> labels;
  int num_classes = 0;

  [[nodiscard]] std::size_t size() const { return labels.size(); }
  [[nodiscard]] std::size_t dim() const { return static_cast<std::size_t>(inputs.cols()); }

  void validate() const {
    if (labels.empty()) throw DomainError("LabeledDataset: no samples");
    if (static_cast<std::size_t>(inputs.rows()) != labels.size()) {
      throw DimensionError("LabeledDataset: inputs and labels differ in length");
    }
    if (num_classes < 2) throw DomainError("LabeledDataset: need at least two classes");
    for (int y : labels) {
      if (y < 0 || y >= num_classes) throw DomainError("LabeledDataset: label out of range");
    }
  }

  /// Rows selected by index, in the given order.
  [[nodiscard]] LabeledDataset subset(std::span<const std::size_t> index) const {
    LabeledDataset out;
    out.num_classes = num_classes;
    out.inputs.resize(static_cast<Eigen::Index>(index.size()), inputs.cols());
    out.labels.resize(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
      out.inputs.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(index[i]));
      out.labels[i] = labels[index[i]];
    }
    return out;
  }
};

/// Byte-exact key of one feature vector. Inputs are equal iff keys are equal.
inline std::string input_key(std::span<const double> x) {
  return std::string(reinterpret_cast<const char*>(x.data()), x.size_bytes());
}

inline std::string input_key(const Matrix& inputs, Eigen::Index row) {
  return input_key(std::span<const double>(inputs.row(row).data(), static_cast<std::size_t>(inputs.cols())));
}

struct CountEntry {
  std::vector<double> input;
  std::vector<std::size_t> counts;

  [[nodiscard]] std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
};

/// Label-frequency vector for every unique input, in first-seen order.
class CountTable {
 public:
  explicit CountTable(int num_classes) : num_classes_(num_classes) {}

  void add(std::span<const double> x, int label) {
    const std::string key = input_key(x);
    auto [it, inserted] = index_.try_emplace(key, entries_.size());
    if (inserted) {
      entries_.push_back({std::vector<double>(x.begin(), x.end()),
                          std::vector<std::size_t>(static_cast<std::size_t>(num_classes_), 0)});
    }
    ++entries_[it->second].counts[static_cast<std::size_t>(label)];
    ++total_;
  }

  [[nodiscard]] const std::vector<CountEntry>& entries() const { return entries_; }
  [[nodiscard]] std::size_t total() const { return total_; }
  [[nodiscard]] int num_classes() const { return num_classes_; }

  [[nodiscard]] const CountEntry* find(std::span<const double> x) const {
    auto it = index_.find(input_key(x));
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

 private:
  int num_classes_;
  std::vector<CountEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

inline CountTable count_labels(const LabeledDataset& d) {
  d.validate();
  CountTable table(d.num_classes);
  for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) {
    table.add(std::span<const double>(d.inputs.row(i).data(), d.dim()), d.labels[static_cast<std::size_t>(i)]);
  }
  return table;
}

/// Conjugate update: Dir(prior) observed `counts` times -> Dir(prior + counts).
inline Concentration posterior_target(const Concentration& prior, std::span<const std::size_t> counts) {
  detail::require_same_size(prior.size(), counts.size(), "posterior_target");
  std::vector<double> alpha(prior.values().begin(), prior.values().end());
  for (std::size_t k = 0; k < alpha.size(); ++k) alpha[k] += static_cast<double>(counts[k]);
  return Concentration(std::move(alpha));
}

/// (1 - lam) * onehot(y) + lam / K.
inline ProbVector smoothed_label(std::size_t y, double lam, std::size_t num_classes) {
  detail::require_class(y, num_classes, "smoothed_label");
  if (!(lam >= 0.0 && lam <= 1.0)) throw DomainError("smoothed_label: lambda must lie in [0, 1]");
  std::vector<double> p(num_classes, lam / static_cast<double>(num_classes));
  p[y] += 1.0 - lam;
  return ProbVector(std::move(p));
}

struct RiskDecomposition {
  double direct = 0.0;      ///< mean cross-entropy over samples
  double decomposed = 0.0;  ///< sum over unique inputs of weight * (KL + entropy)
};

/// Model probabilities per unique input, keyed by input_key.
using ModelProbs = std::unordered_map<std::string, std::vector<double>>;

inline RiskDecomposition empirical_risk_decomposition(const LabeledDataset& d, const ModelProbs& model_probs) {
  d.validate();
  const auto lookup = [&](const std::string& key) -> const std::vector<double>& {
    auto it = model_probs.find(key);
    if (it == model_probs.end()) throw std::out_of_range("empirical_risk_decomposition: no model probability for an input");
    return it->second;
  };

  const double n = static_cast<double>(d.size());
  RiskDecomposition out;
  for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) {
    const auto& q = lookup(input_key(d.inputs, i));
    out.direct -= std::log(q[static_cast<std::size_t>(d.labels[static_cast<std::size_t>(i)])]);
  }
  out.direct /= n;

  const CountTable table = count_labels(d);
  for (const auto& entry : table.entries()) {
    const auto& q = lookup(input_key(entry.input));
    const double total = static_cast<double>(entry.total());
    double kl = 0.0, entropy = 0.0;
    for (std::size_t k = 0; k < entry.counts.size(); ++k) {
      if (entry.counts[k] == 0) continue;  // 0 ln 0 = 0
      const double p = static_cast<double>(entry.counts[k]) / total;
      kl += p * (std::log(p) - std::log(q[k]));
      entropy -= p * std::log(p);
    }
    out.decomposed += (total / n) * (kl + entropy);
  }
  return out;
}

}  // namespace bm
