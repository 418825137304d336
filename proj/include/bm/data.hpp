#pragma once

// Synthetic datasets, file loaders, splitting and feature standardization.
//
// CSV format: one header row, then one row per sample with the feature
// columns followed by an integer class label in the last column.

#include <bm/errors.hpp>
#include <bm/linalg.hpp>
#include <bm/target.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace bm {

/// Isotropic Gaussian clusters, `n_per_class` rows per class, grouped by class.
/// `centers` holds one row per class.
inline LabeledDataset gen_blobs(int num_classes, int n_per_class, const Matrix& centers, double noise_sd,
                                std::uint64_t seed) {
  if (num_classes < 2) throw DomainError("gen_blobs: need at least two classes");
  if (n_per_class < 1) throw DomainError("gen_blobs: n_per_class must be positive");
  if (centers.rows() != num_classes) throw DimensionError("gen_blobs: one center per class required");
  if (!(noise_sd >= 0.0)) throw DomainError("gen_blobs: noise_sd must be non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledDataset d;
  d.num_classes = num_classes;
  d.inputs.resize(static_cast<Eigen::Index>(num_classes) * n_per_class, centers.cols());
  Eigen::Index row = 0;
  for (int k = 0; k < num_classes; ++k) {
    for (int i = 0; i < n_per_class; ++i, ++row) {
      for (Eigen::Index c = 0; c < centers.cols(); ++c) d.inputs(row, c) = centers(k, c) + noise_sd * normal(rng);
      d.labels.push_back(k);
    }
  }
  return d;
}

/// Two interleaving half circles: class 0 on the upper unit arc centred at
/// the origin, class 1 on the lower arc centred at (1, 0.5). Arc positions
/// are uniform, Gaussian noise is added to both coordinates and the rows are
/// shuffled.
inline LabeledDataset gen_two_moons(int n, double noise_sd, std::uint64_t seed) {
  if (n < 2) throw DomainError("gen_two_moons: n must be at least 2");
  if (!(noise_sd >= 0.0)) throw DomainError("gen_two_moons: noise_sd must be non-negative");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> arc(0.0, std::numbers::pi);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int n_upper = n / 2;
  LabeledDataset d;
  d.num_classes = 2;
  d.inputs.resize(n, 2);
  d.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double t = arc(rng);
    const bool upper = i < n_upper;
    d.inputs(i, 0) = upper ? std::cos(t) : 1.0 - std::cos(t);
    d.inputs(i, 1) = upper ? std::sin(t) : 0.5 - std::sin(t);
    d.labels[static_cast<std::size_t>(i)] = upper ? 0 : 1;
  }
  if (noise_sd > 0.0) {
    for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) {
      d.inputs(i, 0) += noise_sd * normal(rng);
      d.inputs(i, 1) += noise_sd * normal(rng);
    }
  }
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return d.subset(order);
}

/// Points distributed uniformly (by area) on the annulus
/// r_min <= |x - center| <= r_max in the plane.
inline Matrix gen_ood_ring(int n, double r_min, double r_max, std::uint64_t seed, std::array<double, 2> center = {0.0, 0.0}) {
  if (n < 1) throw DomainError("gen_ood_ring: n must be positive");
  if (!(r_min >= 0.0 && r_max > r_min)) throw DomainError("gen_ood_ring: need 0 <= r_min < r_max");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> r2(r_min * r_min, r_max * r_max);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  Matrix x(n, 2);
  for (int i = 0; i < n; ++i) {
    const double r = std::sqrt(r2(rng));
    const double theta = angle(rng);
    x(i, 0) = center[0] + r * std::cos(theta);
    x(i, 1) = center[1] + r * std::sin(theta);
  }
  return x;
}

/// Uniform samples from the box [lo, hi]^dim. With lo = 0, hi = 1 and dim =
/// 784 this is the uniform-noise image source.
inline Matrix gen_uniform_box(int n, int dim, double lo, double hi, std::uint64_t seed) {
  if (n < 1 || dim < 1) throw DomainError("gen_uniform_box: n and dim must be positive");
  if (!(hi > lo)) throw DomainError("gen_uniform_box: need lo < hi");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix x(n, dim);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) x(i, c) = u(rng);
  }
  return x;
}

// ---------------------------------------------------------------------------
// IDX files

/// Base of all IDX parse failures. Every failure mode has its own subtype.
class IdxError : public IoError {
 public:
  using IoError::IoError;
};

class IdxBadMagicError : public IdxError {
 public:
  using IdxError::IdxError;
};

class IdxTruncatedError : public IdxError {
 public:
  using IdxError::IdxError;
};

class IdxCountMismatchError : public IdxError {
 public:
  using IdxError::IdxError;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& path) {
  if (bytes.size() < offset + 4) throw IdxTruncatedError(path + ": truncated header");
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void require_magic(std::uint32_t got, std::uint32_t want, const std::string& path) {
  if (got != want) {
    std::ostringstream msg;
    msg << path << ": bad magic 0x" << std::hex << got << ", expected 0x" << want;
    throw IdxBadMagicError(msg.str());
  }
}

}  // namespace detail

/// Reads an IDX image file (unsigned bytes, N x rows x cols) and its label
/// file. Pixels are scaled to [0, 1]; each image becomes one row. The class
/// count is the largest label plus one, but at least `min_classes`.
inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path, int min_classes = 2) {
  const auto images = detail::read_file(images_path);
  const auto labels = detail::read_file(labels_path);
  detail::require_magic(detail::read_be32(images, 0, images_path), kIdxImageMagic, images_path);
  detail::require_magic(detail::read_be32(labels, 0, labels_path), kIdxLabelMagic, labels_path);

  const std::size_t n = detail::read_be32(images, 4, images_path);
  const std::size_t rows = detail::read_be32(images, 8, images_path);
  const std::size_t cols = detail::read_be32(images, 12, images_path);
  const std::size_t n_labels = detail::read_be32(labels, 4, labels_path);
  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + n * pixels) throw IdxTruncatedError(images_path + ": fewer pixel bytes than the header declares");
  if (labels.size() < 8 + n_labels) throw IdxTruncatedError(labels_path + ": fewer labels than the header declares");
  if (n_labels != n) {
    std::ostringstream msg;
    msg << labels_path << ": " << n_labels << " labels for " << n << " images";
    throw IdxCountMismatchError(msg.str());
  }
  if (n == 0 || pixels == 0) throw IdxCountMismatchError(images_path + ": no images");

  LabeledDataset d;
  d.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(pixels));
  d.labels.resize(n);
  int top = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) {
      d.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(p)) = images[16 + i * pixels + p] / 255.0;
    }
    d.labels[i] = labels[8 + i];
    top = std::max(top, d.labels[i]);
  }
  d.num_classes = std::max(top + 1, min_classes);
  return d;
}

/// Reads the CSV format described at the top of this file.
inline LabeledDataset load_csv(const std::string& path, int min_classes = 2) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError(path + ": empty file");
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> fields;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || cell.find_first_not_of(" \t", used) != std::string::npos || !std::isfinite(v)) {
        throw IoError(path + ":" + std::to_string(line_no) + ": bad value '" + cell + "'");
      }
      fields.push_back(v);
    }
    if (fields.size() < 2) throw IoError(path + ":" + std::to_string(line_no) + ": need features and a label");
    if (!rows.empty() && fields.size() != rows.front().size() + 1) {
      throw IoError(path + ":" + std::to_string(line_no) + ": inconsistent column count");
    }
    const double label = fields.back();
    if (label < 0 || label != std::floor(label)) {
      throw IoError(path + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
    }
    labels.push_back(static_cast<int>(label));
    fields.pop_back();
    rows.push_back(std::move(fields));
  }
  if (rows.empty()) throw IoError(path + ": no data rows");
  LabeledDataset d;
  d.inputs.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) d.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
  }
  d.labels = std::move(labels);
  d.num_classes = std::max(*std::max_element(d.labels.begin(), d.labels.end()) + 1, min_classes);
  return d;
}

inline void save_csv(const std::string& path, const LabeledDataset& d) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  for (std::size_t c = 0; c < d.dim(); ++c) out << 'x' << c << ',';
  out << "label\n";
  for (Eigen::Index i = 0; i < d.inputs.rows(); ++i) {
    for (Eigen::Index c = 0; c < d.inputs.cols(); ++c) out << d.inputs(i, c) << ',';
    out << d.labels[static_cast<std::size_t>(i)] << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Splits and standardization

struct SplitSpec {
  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    for (double f : {train_frac, val_frac, test_frac}) {
      if (!(f > 0.0 && f < 1.0)) throw DomainError("SplitSpec: fractions must lie in (0, 1)");
    }
    if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-12) throw DomainError("SplitSpec: fractions must sum to 1");
  }
};

struct Splits {
  LabeledDataset train, val, test;
};

/// Seeded shuffle, then consecutive blocks of round(frac * N) rows for train
/// and validation; the test block takes the remainder.
inline Splits split(const LabeledDataset& d, const SplitSpec& s) {
  s.validate();
  d.validate();
  const std::size_t n = d.size();
  if (n < 3) throw DomainError("split: need at least three samples");
  const auto n_train = static_cast<std::size_t>(std::llround(s.train_frac * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(s.val_frac * static_cast<double>(n)));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) throw DomainError("split: a split would be empty");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(s.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::span<const std::size_t> all(order);
  return {d.subset(all.subspan(0, n_train)), d.subset(all.subspan(n_train, n_val)),
          d.subset(all.subspan(n_train + n_val))};
}

/// Per-feature affine map (x - mean) / sd fitted on training inputs.
struct Standardizer {
  static constexpr double kSdFloor = 1e-8;

  std::vector<double> mean;
  std::vector<double> sd;

  /// Population statistics of each column. A column whose values are all
  /// identical gets that value as its mean, so it maps to exact zeros.
  static Standardizer fit(const Matrix& x) {
    if (x.rows() == 0) throw DomainError("Standardizer: empty training set");
    Standardizer s;
    const double n = static_cast<double>(x.rows());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const auto col = x.col(c);
      const bool constant = (col.array() == col(0)).all();
      const double mu = constant ? col(0) : col.sum() / n;
      const double var = (col.array() - mu).square().sum() / n;
      s.mean.push_back(mu);
      s.sd.push_back(std::max(std::sqrt(var), kSdFloor));
    }
    return s;
  }

  [[nodiscard]] Matrix apply(const Matrix& x) const {
    if (static_cast<std::size_t>(x.cols()) != mean.size()) throw DimensionError("Standardizer: feature count mismatch");
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const auto k = static_cast<std::size_t>(c);
      out.col(c) = (x.col(c).array() - mean[k]) / sd[k];
    }
    return out;
  }

  [[nodiscard]] LabeledDataset apply(const LabeledDataset& d) const {
    LabeledDataset out = d;
    out.inputs = apply(d.inputs);
    return out;
  }
};

/// Fits on `train` and transforms it and every dataset in `others` in place.
template <class... Others>
Standardizer standardize(LabeledDataset& train, Others&... others) {
  const Standardizer s = Standardizer::fit(train.inputs);
  train.inputs = s.apply(train.inputs);
  ((others.inputs = s.apply(others.inputs)), ...);
  return s;
}

}  // namespace bm
