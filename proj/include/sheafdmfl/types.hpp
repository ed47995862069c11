#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace sheafdmfl {

template <class S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using Scalar = double;
using Matrix = MatrixX<Scalar>;
using Vector = VectorX<Scalar>;
using IntVector = Eigen::VectorXi;

using Edge = std::pair<int, int>;  // stored with first < second

}  // namespace sheafdmfl
