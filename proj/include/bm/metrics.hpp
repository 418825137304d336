#pragma once

// Calibration and uncertainty summaries of classifier predictions.
//
// CSV exports:
//   reliability:  lower,upper,count,avg_conf,avg_acc   (one row per bin)
//   entropy:      source,lower,upper,count             (one row per bin and source)

#include <bm/errors.hpp>
#include <bm/linalg.hpp>
#include <bm/simplex.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace bm {

inline constexpr int kDefaultCalibrationBins = 15;

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double avg_confidence = 0.0;  ///< 0 for an empty bin
  double avg_accuracy = 0.0;    ///< 0 for an empty bin

  friend bool operator==(const CalibrationBin&, const CalibrationBin&) = default;
};

struct CalibrationReport {
  int num_bins = kDefaultCalibrationBins;
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
  std::size_t total = 0;

  friend bool operator==(const CalibrationReport&, const CalibrationReport&) = default;
};

/// Index of the bin (i/M, (i+1)/M] holding `c`; c = 0 lands in bin 0.
inline int calibration_bin(double c, int num_bins) {
  const double m = num_bins;
  int i = std::clamp(static_cast<int>(std::ceil(c * m)) - 1, 0, num_bins - 1);
  // Settle rounding at the edges against the same boundaries the report prints.
  while (i > 0 && c <= i / m) --i;
  while (i < num_bins - 1 && c > (i + 1) / m) ++i;
  return i;
}

/// Expected calibration error over `num_bins` equal-width confidence bins.
/// Within a bin, confidences are summed in sorted order, so the report does
/// not depend on the order of the predictions. A bin whose confidences are
/// all equal reports that value exactly.
inline CalibrationReport ece(std::span<const double> confidences, const std::vector<bool>& correct,
                             int num_bins = kDefaultCalibrationBins) {
  if (confidences.size() != correct.size()) throw DimensionError("ece: confidences and outcomes differ in length");
  if (num_bins < 1) throw DomainError("ece: need at least one bin");
  std::vector<std::vector<double>> members(static_cast<std::size_t>(num_bins));
  std::vector<std::size_t> hits(static_cast<std::size_t>(num_bins), 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("ece: confidence outside [0, 1]");
    const auto b = static_cast<std::size_t>(calibration_bin(c, num_bins));
    members[b].push_back(c);
    hits[b] += correct[i] ? 1 : 0;
  }

  CalibrationReport report;
  report.num_bins = num_bins;
  report.total = confidences.size();
  const double n = static_cast<double>(report.total);
  for (std::size_t b = 0; b < members.size(); ++b) {
    CalibrationBin bin;
    bin.lower = static_cast<double>(b) / num_bins;
    bin.upper = static_cast<double>(b + 1) / num_bins;
    bin.count = members[b].size();
    if (bin.count > 0) {
      std::sort(members[b].begin(), members[b].end());
      const double size = static_cast<double>(bin.count);
      if (members[b].front() == members[b].back()) {
        bin.avg_confidence = members[b].front();  // exact when all agree
      } else {
        double sum = 0.0;
        for (double c : members[b]) sum += c;
        bin.avg_confidence = sum / size;
      }
      bin.avg_accuracy = static_cast<double>(hits[b]) / size;
      report.ece += (size / n) * std::abs(bin.avg_accuracy - bin.avg_confidence);
    }
    report.bins.push_back(bin);
  }
  return report;
}

/// Shannon entropy of a predictive distribution, in nats.
inline double predictive_entropy(const ProbVector& p) { return categorical_entropy(p.values()); }

struct Prediction {
  double confidence = 0.0;
  std::size_t label = 0;
};

/// Largest probability and its class; ties go to the lowest index.
inline Prediction confidence_and_prediction(const ProbVector& p) {
  Prediction out{p[0], 0};
  for (std::size_t k = 1; k < p.size(); ++k) {
    if (p[k] > out.confidence) out = {p[k], k};
  }
  return out;
}

/// Same for one row of a probability matrix.
inline Prediction confidence_and_prediction(const Matrix& probs, Eigen::Index row) {
  Prediction out{probs(row, 0), 0};
  for (Eigen::Index k = 1; k < probs.cols(); ++k) {
    if (probs(row, k) > out.confidence) out = {probs(row, k), static_cast<std::size_t>(k)};
  }
  return out;
}

struct EntropyHistogram {
  double lower = 0.0;
  double upper = 0.0;
  std::vector<std::size_t> counts;
  std::size_t total = 0;
  std::optional<double> mean;    ///< absent for empty input
  std::optional<double> median;  ///< absent for empty input

  [[nodiscard]] double bin_lower(std::size_t i) const { return lower + (upper - lower) * static_cast<double>(i) / counts.size(); }
  [[nodiscard]] double bin_upper(std::size_t i) const { return bin_lower(i + 1); }
};

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Fixed-range histogram on [lower, upper] with `bins` equal-width bins
/// (the last one closed). Values outside the range are counted in the end
/// bins, so counts always sum to the number of inputs.
inline EntropyHistogram entropy_histogram(std::span<const double> entropies, int bins, double lower, double upper) {
  if (bins < 1) throw DomainError("entropy_histogram: need at least one bin");
  if (!(upper > lower)) throw DomainError("entropy_histogram: empty range");
  EntropyHistogram h;
  h.lower = lower;
  h.upper = upper;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  h.total = entropies.size();
  if (entropies.empty()) return h;
  double sum = 0.0;
  for (double e : entropies) {
    const double t = (e - lower) / (upper - lower) * bins;
    const int i = std::clamp(static_cast<int>(std::floor(t)), 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(i)];
    sum += e;
  }
  h.mean = sum / static_cast<double>(entropies.size());
  h.median = median_of({entropies.begin(), entropies.end()});
  return h;
}

/// Histogram over the natural entropy range [0, ln K].
inline EntropyHistogram entropy_histogram(std::span<const double> entropies, int bins, std::size_t num_classes) {
  return entropy_histogram(entropies, bins, 0.0, std::log(static_cast<double>(num_classes)));
}

inline void write_reliability_csv(const std::string& path, const CalibrationReport& report) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "lower,upper,count,avg_conf,avg_acc\n";
  for (const auto& b : report.bins) {
    out << b.lower << ',' << b.upper << ',' << b.count << ',' << b.avg_confidence << ',' << b.avg_accuracy << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

inline void write_entropy_csv(const std::string& path,
                              const std::vector<std::pair<std::string, EntropyHistogram>>& sources) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out.precision(17);
  out << "source,lower,upper,count\n";
  for (const auto& [name, h] : sources) {
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
      out << name << ',' << h.bin_lower(i) << ',' << h.bin_upper(i) << ',' << h.counts[i] << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + path);
}

}  // namespace bm
