#pragma once

#include <Eigen/Dense>

namespace bm {

/// Row-major so that each sample (row) is contiguous in memory.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

}  // namespace bm
