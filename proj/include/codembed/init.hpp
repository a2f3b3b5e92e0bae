#pragma once

#include <codembed/tensor.hpp>

#include <random>

namespace codembed {

/// Draws in double precision and casts, so float and double models built
/// from one seed agree up to rounding.
template <typename Scalar>
Matrix<Scalar> normal_matrix(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
  return m;
}

}  // namespace codembed
