#pragma once

#include <Eigen/Dense>

namespace cfair {

// Rows are samples, columns are coordinates. Row-major keeps each sample
// contiguous for the pairwise kernel loops.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// Vectorized finiteness test: 0 * (inf or nan) is nan, which poisons the sum.
// Eigen's allFinite() is a scalar loop and showed up in training profiles.
template <typename Derived>
inline bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return (m.derived().array() * 0.0).sum() == 0.0;
}

}  // namespace cfair
